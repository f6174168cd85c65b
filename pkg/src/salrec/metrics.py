"""Saliency evaluation: NSS, CC, SIM, AUC-Judd, shuffled AUC, and the
two-stage aggregation (frame -> video mean -> dataset mean).

Maps are plain (H, W) float arrays; fixations are explicit pixel lists.
Frames where a metric is undefined (constant map, empty fixations) are
marked invalid and excluded from the averages rather than scored as 0.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

METRIC_NAMES = ("AUC-J", "s-AUC", "NSS", "CC", "SIM")


@dataclass
class FixationMap:
    """Discrete gaze locations; duplicates allowed (multiple observers)."""
    points: list[tuple[int, int]]
    extent: tuple[int, int]

    def __post_init__(self):
        h, w = self.extent
        for r, c in self.points:
            if not (0 <= r < h and 0 <= c < w):
                raise ValueError(f"fixation ({r}, {c}) outside extent {self.extent}")

    def unique_indices(self, shape: tuple[int, int]) -> np.ndarray:
        """Unique flat pixel indices of the fixated locations."""
        if shape != self.extent:
            raise ValueError(f"map shape {shape} != fixation extent {self.extent}")
        flat = np.array([r * shape[1] + c for r, c in self.points], dtype=np.int64)
        return np.unique(flat)


def nss(pred: np.ndarray, fix: FixationMap) -> Optional[float]:
    """Mean z-scored (population std) saliency at fixated pixels."""
    if not fix.points:
        return None
    sd = pred.std()  # population std
    if sd == 0.0:
        return None
    if pred.shape != fix.extent:
        raise ValueError(f"map shape {pred.shape} != fixation extent {fix.extent}")
    z = (pred - pred.mean()) / sd
    # every observation counts, duplicates included
    vals = z.reshape(-1)[[r * pred.shape[1] + c for r, c in fix.points]]
    return float(np.mean(vals))


def cc(pred: np.ndarray, gt: np.ndarray) -> Optional[float]:
    """Pearson correlation over all pixels."""
    if pred.shape != gt.shape:
        raise ValueError(f"cc: shape mismatch {pred.shape} vs {gt.shape}")
    p = pred.reshape(-1) - pred.mean()
    g = gt.reshape(-1) - gt.mean()
    denom = np.sqrt((p * p).sum() * (g * g).sum())
    if denom == 0.0:
        return None
    return float((p * g).sum() / denom)


def sim(pred: np.ndarray, gt: np.ndarray) -> Optional[float]:
    """Histogram intersection after normalizing both maps to sum 1."""
    if pred.shape != gt.shape:
        raise ValueError(f"sim: shape mismatch {pred.shape} vs {gt.shape}")
    ps, gs = pred.sum(), gt.sum()
    if ps <= 0.0 or gs <= 0.0:
        return None
    return float(np.minimum(pred / ps, gt / gs).sum())


def _auc_from_scores(pos: np.ndarray, neg: np.ndarray) -> float:
    """ROC area by threshold sweep over all distinct scores (>= counts as a
    detection), trapezoidal rule. Equals the pairwise ordering statistic
    with ties credited 0.5."""
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    pos_sorted = np.sort(pos)
    neg_sorted = np.sort(neg)
    tpr = [0.0]
    fpr = [0.0]
    for t in thresholds:
        tpr.append((len(pos) - np.searchsorted(pos_sorted, t, side="left"))
                   / len(pos))
        fpr.append((len(neg) - np.searchsorted(neg_sorted, t, side="left"))
                   / len(neg))
    return float(np.trapezoid(tpr, fpr))


def auc_judd(pred: np.ndarray, fix: FixationMap) -> Optional[float]:
    """AUC with fixated pixels as positives and all others as negatives."""
    if not fix.points:
        return None
    idx = fix.unique_indices(pred.shape)
    flat = pred.reshape(-1)
    if len(idx) == flat.size:
        return None  # no negatives
    mask = np.zeros(flat.size, dtype=bool)
    mask[idx] = True
    return _auc_from_scores(flat[mask], flat[~mask])


def auc_shuffled(pred: np.ndarray, fix: FixationMap,
                 other_fix: Sequence[FixationMap], n_splits: int = 100,
                 rng_seed: int = 0) -> Optional[float]:
    """AUC whose negatives are fixation locations borrowed from other
    videos/frames, sampled per split; mean over `n_splits`."""
    if not fix.points:
        return None
    if not other_fix:
        raise ValueError("auc_shuffled needs a non-empty pool of other fixations")
    pos_idx = fix.unique_indices(pred.shape)
    pool: set[int] = set()
    w = pred.shape[1]
    for om in other_fix:
        if om.extent != fix.extent:
            raise ValueError("fixation extents differ across the pool")
        pool.update(r * w + c for r, c in om.points)
    pool.difference_update(pos_idx.tolist())
    pool_arr = np.array(sorted(pool), dtype=np.int64)
    if pool_arr.size == 0:
        return None
    flat = pred.reshape(-1)
    n_neg = len(pos_idx)
    replace = pool_arr.size < n_neg
    if replace:
        warnings.warn("s-AUC negative pool smaller than fixation count; "
                      "sampling with replacement")
    rng = np.random.default_rng(rng_seed)
    scores = []
    for _ in range(n_splits):
        neg_idx = rng.choice(pool_arr, size=n_neg, replace=replace)
        scores.append(_auc_from_scores(flat[pos_idx], flat[neg_idx]))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class MetricReport:
    """Frame values (None = invalid), per-video means and the dataset mean
    for each metric. Dataset mean = mean of per-video means, per-video mean =
    mean over valid frames only."""
    per_frame: dict[str, dict[str, list[Optional[float]]]]
    video_means: dict[str, dict[str, Optional[float]]] = field(default_factory=dict)
    valid_counts: dict[str, dict[str, int]] = field(default_factory=dict)
    dataset_means: dict[str, Optional[float]] = field(default_factory=dict)

    def video_ids(self) -> list[str]:
        for frames in self.per_frame.values():
            return list(frames)
        return []


def aggregate(per_frame: dict[str, dict[str, list[Optional[float]]]]) -> MetricReport:
    """Two-stage mean: frames -> per-video mean -> mean over videos."""
    report = MetricReport(per_frame=per_frame)
    for metric, videos in per_frame.items():
        vm: dict[str, Optional[float]] = {}
        vc: dict[str, int] = {}
        for vid, frames in videos.items():
            valid = [v for v in frames if v is not None]
            vc[vid] = len(valid)
            vm[vid] = float(np.mean(valid)) if valid else None
        report.video_means[metric] = vm
        report.valid_counts[metric] = vc
        means = [m for m in vm.values() if m is not None]
        if len(means) < len(vm):
            warnings.warn(f"{metric}: videos with zero valid frames excluded "
                          "from the dataset mean")
        report.dataset_means[metric] = float(np.mean(means)) if means else None
    return report


def compare_per_video(report_a: MetricReport, report_b: MetricReport,
                      metric: str):
    """Per-video signed differences A - B, plus their mean and variance."""
    ma = report_a.video_means[metric]
    mb = report_b.video_means[metric]
    if set(ma) != set(mb):
        raise ValueError("reports cover different video sets")
    diffs = []
    for vid in ma:
        if ma[vid] is None or mb[vid] is None:
            continue
        diffs.append((vid, ma[vid] - mb[vid]))
    values = np.array([d for _, d in diffs])
    return diffs, float(values.mean()), float(values.var())


# ---------------------------------------------------------------------------
# full-dataset evaluation and report emission


def evaluate_predictions(samples, predictions: dict[str, list[np.ndarray]],
                         n_splits: int = 100, seed: int = 0) -> MetricReport:
    """Score predicted maps against a dataset of VideoSamples.

    `predictions` maps video_id to per-frame (H, W) arrays. The s-AUC
    negative pool for a video is the union of fixations from all other
    videos in the set.
    """
    per_frame: dict[str, dict[str, list[Optional[float]]]] = {
        m: {} for m in METRIC_NAMES}
    all_fix = {s.video_id: s.fixations for s in samples}
    for s in samples:
        preds = predictions[s.video_id]
        if len(preds) != len(s.gt_maps):
            raise ValueError(f"video {s.video_id}: {len(preds)} predictions "
                             f"for {len(s.gt_maps)} frames")
        pool = [f for vid, fl in all_fix.items() if vid != s.video_id for f in fl]
        rows = {m: [] for m in METRIC_NAMES}
        for t, pred in enumerate(preds):
            fix = s.fixations[t]
            gt = s.gt_maps[t]
            rows["NSS"].append(nss(pred, fix))
            rows["CC"].append(cc(pred, gt))
            rows["SIM"].append(sim(pred, gt))
            rows["AUC-J"].append(auc_judd(pred, fix))
            rows["s-AUC"].append(
                auc_shuffled(pred, fix, pool, n_splits=n_splits,
                             rng_seed=seed + t) if pool and fix.points else None)
        for m in METRIC_NAMES:
            per_frame[m][s.video_id] = rows[m]
    return aggregate(per_frame)


def report_to_text(report: MetricReport) -> str:
    """Line-oriented table: one row per video plus the dataset means."""
    out = io.StringIO()
    vids = report.video_ids()
    header = ["video"] + list(METRIC_NAMES)
    out.write("  ".join(f"{h:>10}" for h in header) + "\n")

    def fmt(v):
        return f"{v:>10.4f}" if v is not None else f"{'n/a':>10}"

    for vid in vids:
        cells = [f"{vid:>10}"]
        for m in METRIC_NAMES:
            cells.append(fmt(report.video_means.get(m, {}).get(vid)))
        out.write("  ".join(cells) + "\n")
    cells = [f"{'MEAN':>10}"]
    for m in METRIC_NAMES:
        cells.append(fmt(report.dataset_means.get(m)))
    out.write("  ".join(cells) + "\n")
    return out.getvalue()


def report_to_csv(report: MetricReport) -> str:
    """One record per video per metric: video_id, metric, mean, valid frames."""
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["video_id", "metric", "mean", "valid_frames"])
    for m in METRIC_NAMES:
        for vid, mean in report.video_means.get(m, {}).items():
            writer.writerow([vid, m, "" if mean is None else f"{mean:.12g}",
                             report.valid_counts[m][vid]])
    return out.getvalue()
