"""Synthetic video-saliency data: moving Gaussian blobs with fixation
sampling, plus the on-disk dataset layout.

Layout under a dataset root:
    manifest.json
    <video_id>/frames/NNNN.pgm   8-bit binary PGM (P5), luminance
    <video_id>/gt/NNNN.pgm       ground-truth map, max-normalized
    <video_id>/fix/NNNN.txt      one "row col" fixation per line
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .metrics import FixationMap

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


# ---------------------------------------------------------------------------
# PGM (P5, maxval 255)


def write_pgm(path: Path, values: np.ndarray) -> None:
    """Quantize a [0, 1] float map to 8 bits and write binary PGM."""
    if values.ndim != 2:
        raise ValueError(f"PGM expects a 2d map, got shape {values.shape}")
    h, w = values.shape
    data = np.clip(np.floor(values * 255.0 + 0.5), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    """Read binary PGM back to a [0, 1] float map."""
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if not m:
        raise ValueError(f"{path}: malformed PGM header")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pixels = raw[m.end():]
    if len(pixels) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixels, got {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w) / 255.0


def write_fixations(path: Path, fix: FixationMap) -> None:
    with open(path, "w") as f:
        for r, c in fix.points:
            f.write(f"{r} {c}\n")


def read_fixations(path: Path, extent: tuple[int, int]) -> FixationMap:
    points = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        r, c = line.split()
        points.append((int(r), int(c)))
    return FixationMap(points=points, extent=extent)


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass
class SynthConfig:
    n_videos: int = 20
    frames_per_video: int = 40
    height: int = 32
    width: int = 32
    n_blobs: int = 2  # per video, 1-3
    sigma: float = 3.0  # blob width in pixels
    max_speed: float = 1.5  # pixels per frame
    noise: float = 0.05  # uniform pixel noise amplitude
    fixations_per_frame: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.max_speed < 0:
            raise ValueError("max_speed must be >= 0")
        if not 1 <= self.n_blobs <= 3:
            raise ValueError("n_blobs must be in 1..3")


@dataclass
class VideoSample:
    video_id: str
    frames: list[np.ndarray]  # (H, W) luminance in [0, 1]
    gt_maps: list[np.ndarray]  # (H, W), peak 1
    fixations: list[FixationMap]

    def __post_init__(self):
        if not len(self.frames) == len(self.gt_maps) == len(self.fixations):
            raise ValueError(f"video {self.video_id}: list lengths differ")


def _render_blobs(centers: np.ndarray, h: int, w: int, sigma: float) -> np.ndarray:
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    acc = np.zeros((h, w))
    for cy, cx in centers:
        acc += np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2.0 * sigma ** 2))
    return acc


def _reflect(pos: float, vel: float, lo: float, hi: float) -> tuple[float, float]:
    """Advance one step with elastic reflection at [lo, hi]."""
    pos += vel
    while pos < lo or pos > hi:
        if pos < lo:
            pos = 2 * lo - pos
        else:
            pos = 2 * hi - pos
        vel = -vel
    return pos, vel


def generate(cfg: SynthConfig) -> list[VideoSample]:
    """Deterministic dataset of blob videos; gt maps are the max-normalized
    Gaussian mixtures and fixations are categorical draws from them."""
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.height, cfg.width
    samples = []
    for v in range(cfg.n_videos):
        pos = rng.uniform([2, 2], [h - 3, w - 3], size=(cfg.n_blobs, 2))
        speed = rng.uniform(0, cfg.max_speed, size=cfg.n_blobs)
        angle = rng.uniform(0, 2 * np.pi, size=cfg.n_blobs)
        vel = np.stack([speed * np.sin(angle), speed * np.cos(angle)], axis=1)
        frames, gts, fixes = [], [], []
        for _ in range(cfg.frames_per_video):
            intensity = _render_blobs(pos, h, w, cfg.sigma)
            frame = np.clip(intensity + rng.uniform(0, cfg.noise, size=(h, w)),
                            0.0, 1.0)
            gt = intensity / intensity.max()
            probs = (gt / gt.sum()).reshape(-1)
            draws = rng.choice(h * w, size=cfg.fixations_per_frame, p=probs)
            points = [(int(d) // w, int(d) % w) for d in draws]
            frames.append(frame)
            gts.append(gt)
            fixes.append(FixationMap(points=points, extent=(h, w)))
            for b in range(cfg.n_blobs):
                pos[b, 0], vel[b, 0] = _reflect(pos[b, 0], vel[b, 0], 0, h - 1)
                pos[b, 1], vel[b, 1] = _reflect(pos[b, 1], vel[b, 1], 0, w - 1)
        samples.append(VideoSample(video_id=f"video{v:03d}", frames=frames,
                                   gt_maps=gts, fixations=fixes))
    return samples


# ---------------------------------------------------------------------------
# dataset read/write


def write_dataset(samples: list[VideoSample], root: Path) -> None:
    """Write the PGM/text tree; the manifest goes last so readers never see
    a partial dataset."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        h, w = s.frames[0].shape
        vdir = root / s.video_id
        for sub in ("frames", "gt", "fix"):
            (vdir / sub).mkdir(parents=True, exist_ok=True)
        for t, (frame, gt, fix) in enumerate(zip(s.frames, s.gt_maps, s.fixations)):
            write_pgm(vdir / "frames" / f"{t:04d}.pgm", frame)
            write_pgm(vdir / "gt" / f"{t:04d}.pgm", gt)
            write_fixations(vdir / "fix" / f"{t:04d}.txt", fix)
        entries.append({"video_id": s.video_id, "frames": len(s.frames),
                        "height": h, "width": w, "path": s.video_id})
    manifest = {"version": MANIFEST_VERSION, "videos": entries}
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")


def _load_manifest(root: Path) -> dict:
    path = Path(root) / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"{path}: dataset manifest missing")
    manifest = json.loads(path.read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest version "
                         f"{manifest.get('version')}")
    return manifest


def read_dataset(root: Path) -> list[VideoSample]:
    root = Path(root)
    manifest = _load_manifest(root)
    samples = []
    for entry in manifest["videos"]:
        vdir = root / entry["path"]
        h, w = entry["height"], entry["width"]
        frames, gts, fixes = [], [], []
        for t in range(entry["frames"]):
            fpath = vdir / "frames" / f"{t:04d}.pgm"
            gpath = vdir / "gt" / f"{t:04d}.pgm"
            xpath = vdir / "fix" / f"{t:04d}.txt"
            for p in (fpath, gpath, xpath):
                if not p.exists():
                    raise FileNotFoundError(f"{p}: listed in manifest but missing")
            frame = read_pgm(fpath)
            gt = read_pgm(gpath)
            for p, arr in ((fpath, frame), (gpath, gt)):
                if arr.shape != (h, w):
                    raise ValueError(f"{p}: shape {arr.shape} does not match "
                                     f"manifest ({h}, {w})")
            frames.append(frame)
            gts.append(gt)
            fixes.append(read_fixations(xpath, (h, w)))
        samples.append(VideoSample(video_id=entry["video_id"], frames=frames,
                                   gt_maps=gts, fixations=fixes))
    return samples


def load_predictions(root: Path, reference: list[VideoSample]
                     ) -> dict[str, list[np.ndarray]]:
    """Load externally produced PGM maps mirroring the dataset layout."""
    root = Path(root)
    preds = {}
    for s in reference:
        vdir = root / s.video_id
        files = sorted(vdir.glob("*.pgm"))
        if len(files) != len(s.frames):
            raise ValueError(f"video {s.video_id}: {len(files)} prediction "
                             f"maps for {len(s.frames)} frames")
        preds[s.video_id] = [read_pgm(p) for p in files]
    return preds


def write_predictions(preds: dict[str, list[np.ndarray]], root: Path) -> None:
    root = Path(root)
    for vid, maps in preds.items():
        vdir = root / vid
        vdir.mkdir(parents=True, exist_ok=True)
        for t, m in enumerate(maps):
            write_pgm(vdir / f"{t:04d}.pgm", m)
