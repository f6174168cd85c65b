"""Temporal recurrences: exponential moving average (fixed alpha, trainable
alpha, residual skip) and a peephole ConvLSTM cell.

EMA update: e_t = alpha * s_t + (1 - alpha) * e_{t-1}, with e_0 = s_0 so the
first frame behaves like a static predictor. The trainable variant squashes a
scalar parameter p through a sigmoid to keep the combination convex.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .layers import ParameterRegistry, xavier_init
from .tensor import (Tensor, add, add_const, broadcast_mul, conv2d, mul,
                     scale, sigmoid, tanh)


@dataclass
class EmaConfig:
    alpha: float = 0.1
    trainable: bool = False
    residual: bool = False
    p: Optional[Tensor] = None  # pre-sigmoid scalar, set when trainable

    def __post_init__(self):
        if not self.trainable and not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")

    def init_trainable(self, registry: ParameterRegistry, name: str) -> None:
        """Register the scalar p at 0, so the starting alpha is sigmoid(0) = 0.5."""
        self.p = registry.register(name, Tensor(np.asarray(0.0)))


@dataclass
class EmaState:
    accumulator: Optional[Tensor] = None


def effective_alpha(cfg: EmaConfig) -> Union[float, Tensor]:
    """Fixed alpha, or sigmoid(p) as a differentiable scalar tensor."""
    if cfg.trainable:
        if cfg.p is None:
            raise ValueError("trainable EMA has no registered p parameter")
        return sigmoid(cfg.p)
    return cfg.alpha


def ema_step(s_t: Tensor, state: EmaState, cfg: EmaConfig,
             alpha_override: Optional[float] = None) -> tuple[Tensor, EmaState]:
    """One EMA update; returns (output, advanced state).

    With residual enabled the returned value is s_t + e_t while the
    accumulator still stores e_t. `alpha_override` supports inference-time
    alpha sweeps without touching the config.
    """
    if state.accumulator is None:
        e_t = s_t
    else:
        prev = state.accumulator
        if prev.shape != s_t.shape:
            raise ValueError(
                f"ema_step: input shape {s_t.shape} does not match "
                f"accumulator shape {prev.shape}")
        a = alpha_override if alpha_override is not None else effective_alpha(cfg)
        if isinstance(a, Tensor):
            one_minus = add_const(scale(a, -1.0), 1.0)
            e_t = add(broadcast_mul(s_t, a), broadcast_mul(prev, one_minus))
        elif a == 1.0:
            e_t = s_t  # bit-exact identity
        else:
            e_t = add(scale(s_t, a), scale(prev, 1.0 - a))
    new_state = EmaState(accumulator=e_t)
    out = add(s_t, e_t) if cfg.residual else e_t
    return out, new_state


@dataclass
class ConvLstmState:
    cell: Tensor
    hidden: Tensor

    @classmethod
    def zeros(cls, n: int, channels: int, h: int, w: int) -> "ConvLstmState":
        return cls(cell=Tensor(np.zeros((n, channels, h, w))),
                   hidden=Tensor(np.zeros((n, channels, h, w))))


class ConvLstmWeights:
    """Parameters of the peephole ConvLSTM cell (Glorot-initialized).

    Gates u/f/o each own an input kernel, a hidden kernel, a bias, and an
    elementwise peephole on the previous cell state; the candidate gate has
    no peephole. Peepholes are per-position (channels, H, W) by default, or
    per-channel (channels, 1, 1) when `per_channel_peephole` is set.
    """

    GATES = ("u", "f", "o", "c")

    def __init__(self, registry: ParameterRegistry, name: str,
                 in_ch: int, channels: int, spatial: tuple[int, int],
                 rng: np.random.Generator, ksize: int = 3,
                 per_channel_peephole: bool = False):
        self.channels = channels
        self.ksize = ksize
        self.padding = ksize // 2
        peep_shape = ((channels, 1, 1) if per_channel_peephole
                      else (channels,) + tuple(spatial))
        self.input_kernels = {}
        self.hidden_kernels = {}
        self.biases = {}
        self.peepholes = {}
        fan_in_s = in_ch * ksize * ksize
        fan_in_h = channels * ksize * ksize
        fan_out = channels * ksize * ksize
        for g in self.GATES:
            self.input_kernels[g] = registry.register(
                f"{name}.{g}.input_kernel",
                xavier_init((channels, in_ch, ksize, ksize), fan_in_s, fan_out, rng))
            self.hidden_kernels[g] = registry.register(
                f"{name}.{g}.hidden_kernel",
                xavier_init((channels, channels, ksize, ksize), fan_in_h, fan_out, rng))
            self.biases[g] = registry.register(
                f"{name}.{g}.bias", Tensor(np.zeros(channels)))
            if g != "c":
                self.peepholes[g] = registry.register(
                    f"{name}.{g}.peephole",
                    xavier_init(peep_shape, int(np.prod(peep_shape)),
                                int(np.prod(peep_shape)), rng))


def convlstm_step(s_t: Tensor, state: ConvLstmState, w: ConvLstmWeights,
                  emit_hidden: bool = False) -> tuple[Tensor, ConvLstmState]:
    """One ConvLSTM step; emits the new cell state C_t by default (the
    routing used downstream), or H_t when `emit_hidden` is set."""
    if s_t.shape[2:] != state.cell.shape[2:]:
        raise ValueError(
            f"convlstm_step: input spatial dims {s_t.shape} do not match "
            f"state {state.cell.shape}")

    def gate(g: str) -> Tensor:
        pre = add(conv2d(s_t, w.input_kernels[g], w.biases[g], padding=w.padding),
                  conv2d(state.hidden, w.hidden_kernels[g], padding=w.padding))
        if g != "c":
            pre = add(pre, broadcast_mul(w.peepholes[g], state.cell))
        return sigmoid(pre) if g != "c" else tanh(pre)

    u_t, f_t, o_t, cand = gate("u"), gate("f"), gate("o"), gate("c")
    c_t = add(mul(f_t, state.cell), mul(u_t, cand))
    h_t = mul(o_t, tanh(c_t))
    new_state = ConvLstmState(cell=c_t, hidden=h_t)
    return (h_t if emit_hidden else c_t), new_state


def reset_state(state):
    """Fresh state of the same kind: cleared EMA accumulator or zeroed
    ConvLSTM pair. Idempotent."""
    if isinstance(state, EmaState):
        return EmaState()
    if isinstance(state, ConvLstmState):
        n, c, h, w = state.cell.shape
        return ConvLstmState.zeros(n, c, h, w)
    raise TypeError(f"unknown recurrence state {type(state).__name__}")
