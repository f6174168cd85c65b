"""Central finite-difference verification of the analytic gradients.

Used by the test suite and by the `gradcheck` CLI command. Relative error is
|analytic - numeric| / max(|analytic|, |numeric|, 1e-8), elementwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import recurrence as rec
from .layers import ParameterRegistry
from .model import ModelConfig, build
from .tensor import (Tensor, activation, add, backward, conv2d, maxpool2d,
                     mul, scale, tsum, upsample_nearest)
from .training import bce_loss

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-4


def max_rel_error(fn: Callable[[], Tensor], tensors: Sequence[Tensor],
                  h: float = DEFAULT_H,
                  max_coords: Optional[int] = None,
                  rng: Optional[np.random.Generator] = None) -> float:
    """Compare analytic gradients of the scalar fn() against central finite
    differences over every (or a sampled subset of) coordinate."""
    for t in tensors:
        t.requires_grad = True
        t.zero_grad()
    loss = fn()
    backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in tensors]
    worst = 0.0
    for t, a in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            ana = a.reshape(-1)[i]
            err = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _rand(rng, *shape, lo=-2.0, hi=2.0):
    return Tensor(rng.uniform(lo, hi, size=shape))


def check_tensor_ops(seed: int = 0, tol: float = DEFAULT_TOL) -> list[GradCheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    x = _rand(rng, 1, 2, 6, 6)
    k = _rand(rng, 3, 2, 3, 3)
    b = _rand(rng, 3)
    results.append(GradCheckResult(
        "conv2d", max_rel_error(lambda: tsum(conv2d(x, k, b, padding=1)),
                                [x, k, b]), tol))
    x2 = _rand(rng, 1, 2, 4, 4)
    results.append(GradCheckResult(
        "maxpool2d", max_rel_error(lambda: tsum(mul(maxpool2d(x2), maxpool2d(x2))),
                                   [x2]), tol))
    x3 = _rand(rng, 1, 2, 3, 3)
    results.append(GradCheckResult(
        "upsample_nearest",
        max_rel_error(lambda: tsum(mul(upsample_nearest(x3), upsample_nearest(x3))),
                      [x3]), tol))
    for kind in ("sigmoid", "tanh", "relu"):
        xa = _rand(rng, 5, 5)
        if kind == "relu":  # keep the checker away from the kink at 0
            xa.data[np.abs(xa.data) < 1e-3] = 0.5
        results.append(GradCheckResult(
            kind, max_rel_error(lambda: tsum(activation(xa, kind)), [xa]), tol))
    a, bb = _rand(rng, 4, 4), _rand(rng, 4, 4)
    results.append(GradCheckResult(
        "elementwise", max_rel_error(
            lambda: tsum(mul(add(a, bb), scale(mul(a, bb), 0.5))), [a, bb]), tol))
    return results


def check_recurrence(seed: int = 0, tol: float = DEFAULT_TOL) -> list[GradCheckResult]:
    rng = np.random.default_rng(seed)
    results = []

    frames = [_rand(rng, 1, 1, 2, 2) for _ in range(5)]
    cfg = rec.EmaConfig(alpha=0.3)

    def ema_run():
        state = rec.EmaState()
        total = None
        for f in frames:
            out, state = rec.ema_step(f, state, cfg)
            s = tsum(mul(out, out))
            total = s if total is None else add(total, s)
        return total

    results.append(GradCheckResult(
        "ema_step (5-frame unroll)", max_rel_error(ema_run, frames), tol))

    reg = ParameterRegistry()
    tcfg = rec.EmaConfig(alpha=0.3, trainable=True)
    tcfg.init_trainable(reg, "ema.p")

    def trainable_run():
        state = rec.EmaState()
        total = None
        for f in frames:
            out, state = rec.ema_step(f, state, tcfg)
            s = tsum(mul(out, out))
            total = s if total is None else add(total, s)
        return total

    results.append(GradCheckResult(
        "trainable alpha", max_rel_error(trainable_run, [tcfg.p]), tol))

    reg2 = ParameterRegistry()
    w = rec.ConvLstmWeights(reg2, "clstm", 2, 2, (3, 3),
                            np.random.default_rng(seed + 1))
    lframes = [_rand(rng, 1, 2, 3, 3, lo=-1, hi=1) for _ in range(5)]
    params = [reg2[n] for n in reg2.names()]

    def clstm_run():
        state = rec.ConvLstmState.zeros(1, 2, 3, 3)
        total = None
        for f in lframes:
            out, state = rec.convlstm_step(f, state, w)
            s = tsum(mul(out, out))
            total = s if total is None else add(total, s)
        return total

    results.append(GradCheckResult(
        "convlstm_step (5-frame unroll)",
        max_rel_error(clstm_run, params + lframes, max_coords=6,
                      rng=np.random.default_rng(seed + 2)), tol))
    return results


def check_loss(seed: int = 0, tol: float = DEFAULT_TOL) -> list[GradCheckResult]:
    rng = np.random.default_rng(seed)
    pred = Tensor(rng.uniform(0.05, 0.95, size=(4, 4)))
    gt = Tensor(rng.uniform(0.0, 1.0, size=(4, 4)))
    return [GradCheckResult(
        "bce_loss", max_rel_error(lambda: bce_loss(pred, gt), [pred]), tol)]


def check_model(seed: int = 0, tol: float = DEFAULT_TOL) -> list[GradCheckResult]:
    """Gradient of a 3-frame clip loss w.r.t. every parameter of a tiny model
    with EMA at the bottleneck (sampled coordinates)."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(input_size=(8, 8), stages=2, base_channels=2,
                      recurrence="ema", alpha=0.3, seed=seed)
    model = build(cfg)
    frames = [Tensor(rng.uniform(0, 1, size=(1, 1, 8, 8))) for _ in range(3)]
    gts = [Tensor(rng.uniform(0.05, 0.95, size=(1, 1, 8, 8))) for _ in range(3)]

    def run():
        states = model.fresh_states()
        total = None
        for f, g in zip(frames, gts):
            pred = model.forward_frame(f, states)
            l = bce_loss(pred, g)
            total = l if total is None else add(total, l)
        return scale(total, 1.0 / len(frames))

    params = [model.registry[n] for n in model.registry.names()]
    return [GradCheckResult(
        "model clip loss", max_rel_error(run, params, max_coords=4,
                                         rng=np.random.default_rng(seed + 3)),
        tol)]


MODULE_CHECKS = {
    "tensor": check_tensor_ops,
    "recurrence": check_recurrence,
    "loss": check_loss,
    "model": check_model,
}


def run_checks(modules: Sequence[str], seed: int = 0,
               tol: float = DEFAULT_TOL) -> list[GradCheckResult]:
    results = []
    for m in modules:
        if m not in MODULE_CHECKS:
            raise ValueError(f"unknown gradcheck module {m!r}")
        results.extend(MODULE_CHECKS[m](seed=seed, tol=tol))
    return results
