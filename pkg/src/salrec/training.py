"""Training: pixel-wise BCE loss, Adam, truncated-BPTT clip training with
state carry-over, right-angle augmentation, and binary checkpoints.

Clips of at most `clip_length` frames are unrolled and backpropagated as one
graph; the recurrence state is detached at clip boundaries so values carry
forward while gradients do not.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .model import Model, ModelConfig, RecurrenceStates, build
from .tensor import (Tensor, add, add_const, backward, clamp, log, mul,
                     scale, tmean)

CHECKPOINT_MAGIC = b"SALR"
CHECKPOINT_VERSION = 1
BCE_CLAMP = 1e-7


@dataclass
class TrainConfig:
    clip_length: int = 10
    epochs: int = 7
    lr: float = 1e-3  # paper value 1e-7 presumes a pretrained encoder
    alpha_lr: float = 0.1  # only the trainable alpha parameter uses this
    augment: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.clip_length < 1:
            raise ValueError("clip_length must be >= 1")
        if self.lr <= 0 or self.alpha_lr <= 0:
            raise ValueError("learning rates must be positive")


def bce_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """Mean binary cross entropy over pixels, target-weighted logs, with the
    prediction clamped to [1e-7, 1 - 1e-7] before the logs."""
    if pred.shape != gt.shape:
        raise ValueError(f"bce_loss: shape mismatch {pred.shape} vs {gt.shape}")
    if gt.data.min() < 0.0 or gt.data.max() > 1.0:
        raise ValueError("bce_loss: ground truth must lie in [0, 1]")
    p = clamp(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    q = gt
    one_minus_q = add_const(scale(q, -1.0), 1.0)
    one_minus_p = add_const(scale(p, -1.0), 1.0)
    ll = add(mul(q, log(p)), mul(one_minus_q, log(one_minus_p)))
    return scale(tmean(ll), -1.0)


class Adam:
    """Adam with bias correction over a parameter registry. The trainable
    alpha parameter (name `ema.p`) is stepped with its own learning rate."""

    def __init__(self, registry, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 alpha_lr: float = 0.1, alpha_param: str = "ema.p"):
        self.registry = registry
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.alpha_lr = alpha_lr
        self.alpha_param = alpha_param
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in registry.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in registry.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.registry.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            lr = self.alpha_lr if name == self.alpha_param else self.lr
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def train_clip(model: Model, frames: list[Tensor], gts: list[Tensor],
               state: RecurrenceStates, optimizer: Adam,
               video_id: str, rng=None) -> tuple[float, RecurrenceStates]:
    """One optimizer step over an unrolled clip; returns (mean BCE, carried
    state). The state must come from the same video or be fresh."""
    if state.video_id is None:
        state.video_id = video_id
    elif state.video_id != video_id:
        raise ValueError(f"state carries video {state.video_id!r} but clip is "
                         f"from {video_id!r}; reset at video boundaries")
    losses = []
    for frame, gt in zip(frames, gts):
        pred = model.forward_frame(frame, state, training=True, rng=rng)
        losses.append(bce_loss(pred, gt))
    total = losses[0]
    for l in losses[1:]:
        total = add(total, l)
    loss = scale(total, 1.0 / len(losses))
    model.registry.zero_grad()
    backward(loss)
    optimizer.step()
    state.detach()  # sever BPTT at the clip boundary
    return loss.item(), state


@dataclass
class EpochReport:
    mean_loss: float
    per_video: dict[str, float]


def _augment_video(frames, gts, mirror: bool, rot_k: int):
    def tx(a):
        if mirror:
            a = a[:, ::-1]
        if rot_k:
            a = np.rot90(a, rot_k)
        return np.ascontiguousarray(a)

    return [tx(f) for f in frames], [tx(g) for g in gts]


def train_epoch(model: Model, samples, cfg: TrainConfig, optimizer: Adam,
                rng: np.random.Generator) -> EpochReport:
    """One pass over the dataset: videos in shuffled order, consecutive
    clips within a video carry state, augmentation drawn per video."""
    if not samples:
        raise ValueError("empty dataset")
    order = rng.permutation(len(samples))
    per_video: dict[str, float] = {}
    for idx in order:
        s = samples[int(idx)]
        frames, gts = s.frames, s.gt_maps
        if cfg.augment:
            mirror = bool(rng.integers(0, 2))
            square = frames[0].shape[0] == frames[0].shape[1]
            rot_k = int(rng.choice([0, 1, 2, 3] if square else [0, 2]))
            frames, gts = _augment_video(frames, gts, mirror, rot_k)
        state = model.fresh_states(s.video_id)
        clip_losses = []
        for start in range(0, len(frames), cfg.clip_length):
            clip_f = [Tensor(f[None, None]) for f in frames[start:start + cfg.clip_length]]
            clip_g = [Tensor(g[None, None]) for g in gts[start:start + cfg.clip_length]]
            loss, state = train_clip(model, clip_f, clip_g, state, optimizer,
                                     s.video_id, rng=rng)
            clip_losses.append(loss)
        per_video[s.video_id] = float(np.mean(clip_losses))
    return EpochReport(mean_loss=float(np.mean(list(per_video.values()))),
                       per_video=per_video)


# ---------------------------------------------------------------------------
# checkpoint format: magic "SALR", u32 version, length-prefixed JSON config,
# then named float64 blobs (parameters, Adam moments), then a JSON RNG state
# block and the epoch counter.


def _write_blob(f, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    f.write(struct.pack("<I", len(nb)))
    f.write(nb)
    f.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<I", d))
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ValueError(f"{getattr(f, 'name', '?')}: truncated checkpoint")
    return data


def _read_blob(f) -> tuple[str, np.ndarray]:
    (nlen,) = struct.unpack("<I", _read_exact(f, 4))
    name = _read_exact(f, nlen).decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exact(f, 4))
    shape = tuple(struct.unpack("<I", _read_exact(f, 4))[0] for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(f, 8 * count), dtype="<f8").reshape(shape)
    return name, data.astype(np.float64)


def _config_to_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["ema_points"] = [str(p) for p in cfg.ema_points]
    d["input_size"] = list(cfg.input_size)
    return d


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d["input_size"] = tuple(d["input_size"])
    d["ema_points"] = tuple(d["ema_points"])
    return ModelConfig(**d)


def save_checkpoint(path: Path, model: Model, optimizer: Adam,
                    rng: np.random.Generator, epoch: int,
                    train_cfg: Optional[TrainConfig] = None) -> None:
    path = Path(path)
    header = {
        "model": _config_to_dict(model.cfg),
        "train": asdict(train_cfg) if train_cfg else None,
        "adam": {"lr": optimizer.lr, "beta1": optimizer.beta1,
                 "beta2": optimizer.beta2, "eps": optimizer.eps,
                 "alpha_lr": optimizer.alpha_lr, "t": optimizer.t},
    }
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        cfg_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
        f.write(struct.pack("<I", len(cfg_bytes)))
        f.write(cfg_bytes)
        names = model.registry.names()
        f.write(struct.pack("<I", len(names)))
        for name in names:
            _write_blob(f, name, model.registry[name].data)
        f.write(struct.pack("<I", 2 * len(names)))
        for name in names:
            _write_blob(f, f"adam.m.{name}", optimizer.m[name])
        for name in names:
            _write_blob(f, f"adam.v.{name}", optimizer.v[name])
        rng_bytes = json.dumps(rng.bit_generator.state, sort_keys=True).encode()
        f.write(struct.pack("<I", len(rng_bytes)))
        f.write(rng_bytes)
        f.write(struct.pack("<I", epoch))


def load_checkpoint(path: Path) -> tuple[Model, Adam, np.random.Generator,
                                         int, Optional[TrainConfig]]:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            if _read_exact(f, 4) != CHECKPOINT_MAGIC:
                raise ValueError(f"{path}: not a checkpoint (bad magic)")
            (version,) = struct.unpack("<I", _read_exact(f, 4))
            if version != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: checkpoint version {version}, "
                                 f"expected {CHECKPOINT_VERSION}")
            (clen,) = struct.unpack("<I", _read_exact(f, 4))
            header = json.loads(_read_exact(f, clen).decode("utf-8"))
            model = build(config_from_dict(header["model"]))
            (n_params,) = struct.unpack("<I", _read_exact(f, 4))
            if n_params != len(model.registry):
                raise ValueError(f"{path}: {n_params} parameters in file, "
                                 f"model has {len(model.registry)}")
            for _ in range(n_params):
                name, data = _read_blob(f)
                if name not in model.registry:
                    raise ValueError(f"{path}: unknown parameter {name!r}")
                param = model.registry[name]
                if param.shape != data.shape:
                    raise ValueError(
                        f"{path}: parameter {name!r} has shape {data.shape}, "
                        f"model expects {param.shape}")
                param.data[...] = data
            adam_hdr = header["adam"]
            optimizer = Adam(model.registry, lr=adam_hdr["lr"],
                             beta1=adam_hdr["beta1"], beta2=adam_hdr["beta2"],
                             eps=adam_hdr["eps"], alpha_lr=adam_hdr["alpha_lr"])
            optimizer.t = adam_hdr["t"]
            (n_moments,) = struct.unpack("<I", _read_exact(f, 4))
            for _ in range(n_moments):
                name, data = _read_blob(f)
                kind, pname = name.split(".", 2)[1], name.split(".", 2)[2]
                target = optimizer.m if kind == "m" else optimizer.v
                if pname not in target or target[pname].shape != data.shape:
                    raise ValueError(f"{path}: moment {name!r} does not match model")
                target[pname][...] = data
            (rlen,) = struct.unpack("<I", _read_exact(f, 4))
            rng_state = json.loads(_read_exact(f, rlen).decode("utf-8"))
            rng = np.random.default_rng(0)
            rng.bit_generator.state = rng_state
            (epoch,) = struct.unpack("<I", _read_exact(f, 4))
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    train_cfg = TrainConfig(**header["train"]) if header["train"] else None
    return model, optimizer, rng, epoch, train_cfg


def train(model: Model, samples, cfg: TrainConfig,
          optimizer: Optional[Adam] = None,
          rng: Optional[np.random.Generator] = None,
          start_epoch: int = 0,
          epoch_callback=None) -> tuple[Adam, np.random.Generator, list[EpochReport]]:
    """Run the remaining epochs of the schedule; returns the optimizer, the
    rng (for checkpointing) and the per-epoch reports."""
    if optimizer is None:
        optimizer = Adam(model.registry, lr=cfg.lr, alpha_lr=cfg.alpha_lr)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    reports = []
    for epoch in range(start_epoch, cfg.epochs):
        report = train_epoch(model, samples, cfg, optimizer, rng)
        reports.append(report)
        if epoch_callback is not None:
            epoch_callback(epoch, report, optimizer, rng)
    return optimizer, rng, reports
