"""Saliency metrics for pseudo-label selection and benchmark evaluation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

BETA2 = 0.3
N_THRESHOLDS = 256


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def soft_iou(s, g) -> float:
    """Soft intersection over union of two maps in [0, 1].

    Two all-zero maps have no union; that degenerate pair scores 0.
    """
    s, g = _pair(s, g)
    inter = np.sum(s * g)
    union = np.sum(s + g - s * g)
    if union <= 0:
        log.debug("soft_iou: both maps empty")
        return 0.0
    return float(inter / union)


def d_recall(l, t) -> float:
    """Share of the ground-truth mass covered by the location map; NaN for empty ground truth."""
    l, t = _pair(l, t)
    denom = t.sum()
    if denom <= 0:
        return math.nan
    return float(np.sum(l * t) / denom)


def d_precision(l, t) -> float:
    """Share of the location map mass lying on ground truth; NaN for an empty map."""
    l, t = _pair(l, t)
    denom = l.sum()
    if denom <= 0:
        return math.nan
    return float(np.sum(l * t) / denom)


def mae(f, y) -> float:
    f, y = _pair(f, y)
    return float(np.mean(np.abs(f - y)))


def f_measure_curve(f, y):
    """Precision and recall for binarisations ``f > k/255``, ``k = 0..255``.

    An empty prediction has precision 0. Raises on an empty ground truth.
    """
    f, y = _pair(f, y)
    y = y > 0.5
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("ground truth has no foreground")
    thresholds = np.arange(N_THRESHOLDS) / 255.0
    fg = np.sort(f[y])
    every = np.sort(f.ravel())
    # number of values strictly greater than each threshold
    tp = fg.size - np.searchsorted(fg, thresholds, side="right")
    pp = every.size - np.searchsorted(every, thresholds, side="right")
    precision = np.where(pp > 0, tp / np.maximum(pp, 1), 0.0)
    recall = tp / n_pos
    return precision, recall


def f_scores(precision, recall, beta2=BETA2) -> np.ndarray:
    precision = np.asarray(precision, dtype=np.float64)
    recall = np.asarray(recall, dtype=np.float64)
    num = (1 + beta2) * precision * recall
    den = beta2 * precision + recall
    return np.where(num > 0, num / np.where(den > 0, den, 1.0), 0.0)


def f_max(precision, recall, beta2=BETA2) -> float:
    return float(np.max(f_scores(precision, recall, beta2)))


# S-measure: object-aware and region-aware structural similarity.
# Follows the reference MATLAB conventions: unbiased (N-1) variances,
# centroid rounded and shifted by one to mimic 1-based ranges, and the
# limit values 1 - mean(f) / mean(f) for all-background / all-foreground truth.

_EPS = np.spacing(1)


def _object_similarity(x):
    mean = x.mean()
    std = x.std(ddof=1) if x.size > 1 else 0.0
    return 2 * mean / (mean * mean + 1 + std + _EPS)


def _region_ssim(f, y):
    n = f.size
    if n == 0:
        return 0.0
    mx, my = f.mean(), y.mean()
    dof = max(n - 1, 1)
    vx = np.sum((f - mx) ** 2) / dof
    vy = np.sum((y - my) ** 2) / dof
    cxy = np.sum((f - mx) * (y - my)) / dof
    a = 4 * mx * my * cxy
    b = (mx * mx + my * my) * (vx + vy)
    if a != 0:
        return a / (b + _EPS)
    return 1.0 if b == 0 else 0.0


def s_object(f, y) -> float:
    mu = y.mean()
    fg = _object_similarity(f[y])
    bg = _object_similarity((1 - f)[~y])
    return float(mu * fg + (1 - mu) * bg)


def s_region(f, y) -> float:
    h, w = y.shape
    coords = np.argwhere(y)
    if coords.size == 0:
        cy, cx = round(h / 2), round(w / 2)
    else:
        cy, cx = np.round(coords.mean(axis=0))
    cy, cx = int(cy) + 1, int(cx) + 1
    area = h * w
    weights = (cx * cy / area, cy * (w - cx) / area, (h - cy) * cx / area)
    weights = weights + (1 - sum(weights),)
    quads = ((slice(0, cy), slice(0, cx)), (slice(0, cy), slice(cx, w)),
             (slice(cy, h), slice(0, cx)), (slice(cy, h), slice(cx, w)))
    return float(sum(wt * _region_ssim(f[q], y[q].astype(np.float64))
                     for wt, q in zip(weights, quads)))


def s_measure(f, y, alpha: float = 0.5) -> float:
    f, y = _pair(f, y)
    y = y > 0.5
    frac = y.mean()
    if frac == 0:
        score = 1 - f.mean()
    elif frac == 1:
        score = f.mean()
    else:
        score = alpha * s_object(f, y) + (1 - alpha) * s_region(f, y)
    return float(min(1.0, max(0.0, score)))


@dataclass
class MetricReport:
    """Dataset-level scores. ``precision``/``recall`` are the frame-averaged 256-point curve."""

    s_measure: float
    f_max: float
    mae: float
    precision: np.ndarray
    recall: np.ndarray
    n_frames: int = 0
    n_skipped: int = 0
    per_frame: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.precision) != N_THRESHOLDS or len(self.recall) != N_THRESHOLDS:
            raise ValueError("precision/recall curves must have 256 entries")


def _ordered_mean(values):
    # math.fsum is exact, hence independent of accumulation order
    return math.fsum(values) / len(values) if values else math.nan


def evaluate_pairs(pairs, beta2=BETA2) -> MetricReport:
    """Aggregate metrics over ``(prediction, ground_truth)`` pairs.

    Frames with empty ground truth are skipped and counted.
    """
    s_vals, m_vals, p_curves, r_curves, rows = [], [], [], [], []
    skipped = 0
    for key, pred, gt in pairs:
        gt = np.asarray(gt) > 0.5
        if not gt.any():
            skipped += 1
            continue
        p, r = f_measure_curve(pred, gt)
        s_vals.append(s_measure(pred, gt))
        m_vals.append(mae(pred, gt))
        p_curves.append(p)
        r_curves.append(r)
        rows.append((key, s_vals[-1], f_max(p, r, beta2), m_vals[-1]))
    if not s_vals:
        raise ValueError("no frame with ground truth to evaluate")
    p_mean = np.array([math.fsum(c) / len(p_curves) for c in np.stack(p_curves).T])
    r_mean = np.array([math.fsum(c) / len(r_curves) for c in np.stack(r_curves).T])
    return MetricReport(
        s_measure=_ordered_mean(s_vals),
        f_max=f_max(p_mean, r_mean, beta2),
        mae=_ordered_mean(m_vals),
        precision=p_mean,
        recall=r_mean,
        n_frames=len(s_vals),
        n_skipped=skipped,
        per_frame=rows,
    )


def format_table(reports: dict[str, MetricReport]) -> str:
    lines = [f"{'Dataset':<16}{'S_measure':>10}{'F_max':>10}{'MAE':>10}{'frames':>8}{'skipped':>9}"]
    for name in sorted(reports):
        r = reports[name]
        lines.append(f"{name:<16}{r.s_measure:>10.3f}{r.f_max:>10.3f}{r.mae:>10.3f}"
                     f"{r.n_frames:>8d}{r.n_skipped:>9d}")
    return "\n".join(lines) + "\n"


def write_curve_csv(path, report: MetricReport) -> None:
    f = f_scores(report.precision, report.recall)
    with open(path, "w") as fh:
        fh.write("threshold,precision,recall,f_measure\n")
        for k in range(N_THRESHOLDS):
            fh.write(f"{k},{report.precision[k]:.6f},{report.recall[k]:.6f},{f[k]:.6f}\n")


def write_scatter(path, rows) -> None:
    """One ``key, d_recall, d_precision`` row per frame; undefined values are written as nan."""
    with open(path, "w") as fh:
        fh.write("frame\td_recall\td_precision\n")
        for key, rec, prec in rows:
            fh.write(f"{key}\t{rec:.6f}\t{prec:.6f}\n")


def read_scatter(path):
    rows = []
    lines = Path(path).read_text().splitlines()
    for line in lines[1:]:
        key, rec, prec = line.split("\t")
        rows.append((key, float(rec), float(prec)))
    return rows
