"""Miniature encoder-decoder saliency model ("MiniSal") with a temporal
recurrence inserted at configurable points.

Encoder: `stages` blocks of conv3x3 -> relu -> maxpool2. Decoder mirrors with
upsampling. Head: 1x1 conv -> sigmoid producing a per-frame probability map.
The recurrence (EMA variants or a ConvLSTM at the bottleneck) wraps the
activations at the configured insertion points.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .layers import ConvLayer, ParameterRegistry, dropout_forward
from .recurrence import (ConvLstmState, ConvLstmWeights, EmaConfig, EmaState,
                         convlstm_step, ema_step)
from .tensor import Tensor, maxpool2d, no_grad, relu, sigmoid, upsample_nearest

RECURRENCE_KINDS = ("none", "ema", "ema-trainable", "ema-residual", "convlstm")


@dataclass(frozen=True)
class InsertionPoint:
    """Where a recurrence wraps the activations: encoder stage k, the
    bottleneck, decoder stage k, or the output map."""
    kind: str  # encoder | bottleneck | decoder | output
    index: int = 0

    @classmethod
    def parse(cls, text: str) -> "InsertionPoint":
        text = text.strip().lower()
        if text == "bottleneck":
            return cls("bottleneck")
        if text == "output":
            return cls("output")
        for prefix in ("encoder", "decoder"):
            if text.startswith(prefix):
                try:
                    return cls(prefix, int(text[len(prefix):]))
                except ValueError:
                    break
        raise ValueError(f"cannot parse insertion point {text!r}")

    def __str__(self) -> str:
        if self.kind in ("bottleneck", "output"):
            return self.kind
        return f"{self.kind}{self.index}"


BOTTLENECK = InsertionPoint("bottleneck")
OUTPUT = InsertionPoint("output")


@dataclass
class ModelConfig:
    input_size: tuple[int, int] = (32, 32)
    in_channels: int = 1
    stages: int = 3
    base_channels: int = 8
    recurrence: str = "none"
    ema_points: tuple[InsertionPoint, ...] = (BOTTLENECK,)
    alpha: float = 0.1
    dropout: bool = False
    dropout_p: float = 0.5
    output_ema_after_sigmoid: bool = True
    convlstm_emit_hidden: bool = False
    per_channel_peephole: bool = False
    seed: int = 0

    def __post_init__(self):
        h, w = self.input_size
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if h % (1 << self.stages) or w % (1 << self.stages):
            raise ValueError(
                f"input size {self.input_size} not divisible by 2^{self.stages}")
        if self.recurrence not in RECURRENCE_KINDS:
            raise ValueError(f"unknown recurrence {self.recurrence!r}")
        pts = tuple(InsertionPoint.parse(p) if isinstance(p, str) else p
                    for p in self.ema_points)
        self.ema_points = pts
        if self.recurrence == "convlstm":
            if pts != (BOTTLENECK,):
                raise ValueError("convlstm recurrence is placed only at the "
                                 "bottleneck; --ema-at does not apply")
        elif self.recurrence != "none":
            if not 1 <= len(pts) <= 2:
                raise ValueError("ema supports 1 or 2 insertion points")
            if len(set(pts)) != len(pts):
                raise ValueError("duplicate insertion points")
        for p in pts:
            if p.kind in ("encoder", "decoder") and not 1 <= p.index <= self.stages:
                raise ValueError(f"insertion point {p} outside 1..{self.stages}")

    def encoder_channels(self) -> list[int]:
        return [self.base_channels << k for k in range(self.stages)]

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels << (self.stages - 1)

    @property
    def bottleneck_size(self) -> tuple[int, int]:
        h, w = self.input_size
        return h >> self.stages, w >> self.stages


class RecurrenceStates:
    """Per-video recurrence state bundle, tagged with its owning model and
    the video it belongs to."""

    def __init__(self, model: "Model", video_id: Optional[str] = None):
        self.model = model
        self.video_id = video_id
        self.states: dict[InsertionPoint, object] = {}
        cfg = model.cfg
        if cfg.recurrence == "convlstm":
            h, w = cfg.bottleneck_size
            self.states[BOTTLENECK] = ConvLstmState.zeros(
                1, cfg.bottleneck_channels, h, w)
        elif cfg.recurrence != "none":
            for p in cfg.ema_points:
                self.states[p] = EmaState()

    def detach(self) -> None:
        """Sever gradient flow at a clip boundary; values carry forward."""
        for point, st in self.states.items():
            if isinstance(st, EmaState):
                if st.accumulator is not None:
                    self.states[point] = EmaState(st.accumulator.detach())
            else:
                self.states[point] = ConvLstmState(st.cell.detach(),
                                                   st.hidden.detach())


class Model:
    """Encoder-decoder saliency predictor; see `build`."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.registry = ParameterRegistry()
        rng = np.random.default_rng(cfg.seed)
        chans = cfg.encoder_channels()
        self.enc_convs = []
        prev = cfg.in_channels
        for k, c in enumerate(chans, start=1):
            self.enc_convs.append(
                ConvLayer(self.registry, f"enc{k}", prev, c, 3, rng, padding=1))
            prev = c
        self.dec_convs = []
        dec_out = chans[-2::-1] + [cfg.base_channels]
        for k, c in enumerate(dec_out, start=1):
            self.dec_convs.append(
                ConvLayer(self.registry, f"dec{k}", prev, c, 3, rng, padding=1))
            prev = c
        self.head = ConvLayer(self.registry, "head", prev, 1, 1, rng)

        self.ema_cfg: Optional[EmaConfig] = None
        self.convlstm: Optional[ConvLstmWeights] = None
        if cfg.recurrence == "convlstm":
            self.convlstm = ConvLstmWeights(
                self.registry, "convlstm", cfg.bottleneck_channels,
                cfg.bottleneck_channels, cfg.bottleneck_size, rng,
                per_channel_peephole=cfg.per_channel_peephole)
        elif cfg.recurrence != "none":
            self.ema_cfg = EmaConfig(
                alpha=cfg.alpha,
                trainable=cfg.recurrence == "ema-trainable",
                residual=cfg.recurrence == "ema-residual")
            if self.ema_cfg.trainable:
                self.ema_cfg.init_trainable(self.registry, "ema.p")

    def fresh_states(self, video_id: Optional[str] = None) -> RecurrenceStates:
        return RecurrenceStates(self, video_id)

    def _recur(self, x: Tensor, point: InsertionPoint, states: RecurrenceStates,
               training: bool, rng, alpha_override):
        if point not in states.states:
            return x
        if self.cfg.dropout:
            x = dropout_forward(x, self.cfg.dropout_p, training, rng)
        st = states.states[point]
        if isinstance(st, EmaState):
            out, states.states[point] = ema_step(
                x, st, self.ema_cfg, alpha_override=alpha_override)
        else:
            out, states.states[point] = convlstm_step(
                x, st, self.convlstm, emit_hidden=self.cfg.convlstm_emit_hidden)
        return out

    def forward_frame(self, frame: Tensor, states: RecurrenceStates,
                      training: bool = False, rng=None,
                      alpha_override: Optional[float] = None) -> Tensor:
        """One frame in, one saliency map (shape [1, 1, H, W]) out; advances
        the recurrence state at every configured insertion point."""
        if states.model is not self:
            raise ValueError("recurrence states belong to a different model")
        h, w = self.cfg.input_size
        if frame.shape != (1, self.cfg.in_channels, h, w):
            raise ValueError(
                f"frame shape {frame.shape} does not match configured "
                f"(1, {self.cfg.in_channels}, {h}, {w})")
        x = frame
        for k, conv in enumerate(self.enc_convs, start=1):
            x = maxpool2d(relu(conv(x)))
            x = self._recur(x, InsertionPoint("encoder", k), states,
                            training, rng, alpha_override)
        x = self._recur(x, BOTTLENECK, states, training, rng, alpha_override)
        for k, conv in enumerate(self.dec_convs, start=1):
            x = upsample_nearest(relu(conv(x)))
            x = self._recur(x, InsertionPoint("decoder", k), states,
                            training, rng, alpha_override)
        x = self.head(x)
        # residual EMA at the output stays pre-sigmoid so the map keeps to [0,1]
        output_after = (self.cfg.output_ema_after_sigmoid
                        and not (self.ema_cfg and self.ema_cfg.residual))
        if not output_after:
            x = self._recur(x, OUTPUT, states, training, rng, alpha_override)
        x = sigmoid(x)
        if output_after:
            x = self._recur(x, OUTPUT, states, training, rng, alpha_override)
        vals = x.data
        if not np.all(np.isfinite(vals)) or vals.min() < 0.0 or vals.max() > 1.0:
            raise RuntimeError("saliency map left [0, 1] or went non-finite")
        return x

    def forward_sequence(self, frames: list[Tensor], training: bool = False,
                         rng=None, alpha_override: Optional[float] = None,
                         video_id: Optional[str] = None) -> list[Tensor]:
        """Fold `forward_frame` over the frames from a fresh state."""
        if not frames:
            raise ValueError("forward_sequence needs at least one frame")
        states = self.fresh_states(video_id)
        return [self.forward_frame(f, states, training, rng, alpha_override)
                for f in frames]

    def predict_sequence(self, frames: list[np.ndarray],
                         alpha_override: Optional[float] = None) -> list[np.ndarray]:
        """Evaluation-mode maps as plain (H, W) float arrays."""
        with no_grad():
            tensors = [Tensor(f[None, None] if f.ndim == 2 else f[None])
                       for f in frames]
            maps = self.forward_sequence(tensors, training=False,
                                         alpha_override=alpha_override)
        return [m.data[0, 0] for m in maps]


def build(cfg: ModelConfig) -> Model:
    return Model(cfg)
