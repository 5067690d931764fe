"""Spatiotemporal location pseudo-labels from unlabeled video.

A frame whose static and dynamic location maps agree (soft IoU at or above a
threshold) keeps its static map as label. Labels are then carried to up to
six frames on either side through optical flow and re-located with the
image-trained locator on enlarged crops.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import imaging
from .metrics import soft_iou

log = logging.getLogger(__name__)

Locator = Callable[[np.ndarray], np.ndarray]

HIGH_SALIENCY = "high_saliency"
TRACKED = "tracked"


def default_dilate_radius(shape) -> int:
    return int(round(0.08 * min(shape)))


def default_sigma(shape) -> float:
    return 0.01 * min(shape)


def default_track_radius(shape) -> int:
    return max(1, int(round(2 * min(shape) / 256)))


def body_attention_target(gt, dilate_radius=None, sigma=None) -> np.ndarray:
    """Dilate then blur a mask and rescale so the peak is exactly 1."""
    gt = np.asarray(gt).astype(bool)
    if not gt.any():
        raise ValueError("ground truth mask is empty")
    if dilate_radius is None:
        dilate_radius = default_dilate_radius(gt.shape)
    if sigma is None:
        sigma = default_sigma(gt.shape)
    core = imaging.dilate(gt, dilate_radius).astype(np.float64)
    blurred = imaging.gaussian_blur(core, sigma)
    return blurred / blurred.max()


@dataclass
class HighSaliencyRecord:
    index: int
    static: np.ndarray
    dynamic: np.ndarray
    iou: float

    @property
    def label(self):
        return self.static


@dataclass
class SpatiotemporalLabel:
    index: int
    location: np.ndarray
    provenance: str
    source: int
    distance: int = 0
    iou: float = math.nan

    def __post_init__(self):
        if self.provenance not in (HIGH_SALIENCY, TRACKED):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.provenance == TRACKED and not 1 <= self.distance <= 6:
            raise ValueError(f"tracking distance {self.distance} outside 1..6")


def discriminate_high_saliency(static, dynamic, t_thresh=0.7, index=0):
    """Return a record when the two maps overlap enough, else None."""
    if not 0 < t_thresh < 1:
        raise ValueError("threshold must lie in (0, 1)")
    static = np.asarray(static, dtype=np.float64)
    dynamic = np.asarray(dynamic, dtype=np.float64)
    if not static.any() and not dynamic.any():
        return None
    iou = soft_iou(static, dynamic)
    if iou >= t_thresh:
        return HighSaliencyRecord(index, static, dynamic, iou)
    return None


def track_to_adjacent(m0, flow_n_to_0, frame_n, locator: Locator, radius=None):
    """Carry a location map into an adjacent frame and re-locate inside enlarged boxes.

    Returns None when the warped map leaves nothing in frame.
    """
    remapped = imaging.backward_warp(m0, flow_n_to_0)
    h, w = remapped.shape
    if radius is None:
        radius = default_track_radius((h, w))
    mask = imaging.threshold(remapped, 0.5)
    mask = imaging.closing(mask, radius)
    comps = imaging.connected_components(mask)
    if not comps:
        return None
    canvas = np.zeros((h, w))
    for comp in comps:
        box = imaging.expand_box(imaging.bounding_box(comp), h, w)
        rows, cols = box.slices()
        crop = np.asarray(frame_n)[rows, cols]
        pred = np.asarray(locator(crop), dtype=np.float64)
        canvas[rows, cols] = np.maximum(canvas[rows, cols], pred)
    return canvas


def resolve_label_conflicts(candidates):
    """Own high-saliency label first, otherwise nearest source, ties to the lower source index."""
    if not candidates:
        raise ValueError("no candidates")
    own = [c for c in candidates if c.provenance == HIGH_SALIENCY]
    if own:
        return own[0]
    return min(candidates, key=lambda c: (c.distance, c.source))


def dynamic_pair(clip, i):
    """Forward pair for dynamic saliency; the last frame looks backwards."""
    j = i + 1 if (i + 1) in clip else i - 1
    return i, j


def build_clip_labels(clip, locator: Locator, t_thresh=0.7, window=6, radius=None, batch=None):
    """All labels of one clip plus the high-saliency records, keyed by frame index."""
    batch = batch or (lambda imgs: [locator(im) for im in imgs])
    idx = list(clip.indices)
    frames = [clip.frame(i) for i in idx]
    renders, usable = [], []
    for i in idx:
        r = clip.rendered_flow(*dynamic_pair(clip, i))
        if r is not None:
            renders.append(r)
            usable.append(i)
    statics = dict(zip(idx, batch(frames)))
    dynamics = dict(zip(usable, batch(renders))) if renders else {}

    records = {}
    for i in usable:
        rec = discriminate_high_saliency(statics[i], dynamics[i], t_thresh, index=i)
        if rec is not None:
            records[i] = rec

    candidates: dict[int, list] = {}
    for i, rec in records.items():
        candidates.setdefault(i, []).append(
            SpatiotemporalLabel(i, rec.label, HIGH_SALIENCY, i, 0, rec.iou))
        for d in range(1, window + 1):
            for n in (i - d, i + d):
                if n not in clip or n in records:
                    continue
                flow = clip.flow(n, i)
                if flow is None:
                    continue
                m = track_to_adjacent(rec.label, flow, clip.frame(n), locator, radius)
                if m is None:
                    continue
                candidates.setdefault(n, []).append(
                    SpatiotemporalLabel(n, m, TRACKED, i, d, rec.iou))
    labels = {n: resolve_label_conflicts(c) for n, c in sorted(candidates.items())}
    return labels, records


def build_location_dataset(clips, locator: Locator, t_thresh=0.7, window=6, radius=None, batch=None):
    """Labels for every covered frame of every clip, as ``{clip name: {index: label}}``."""
    out = {}
    for clip in clips:
        labels, records = build_clip_labels(clip, locator, t_thresh, window, radius, batch)
        log.info("%s: %d high-saliency frames, %d labelled of %d",
                 clip.name, len(records), len(labels), len(clip))
        out[clip.name] = labels
    return out


MANIFEST_COLUMNS = ("frame", "provenance", "source", "distance", "iou")


def write_labels(root, clip_name, labels) -> None:
    d = Path(root) / clip_name
    d.mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(MANIFEST_COLUMNS)]
    for n in sorted(labels):
        lab = labels[n]
        imaging.write_gray(d / f"{n:05d}.png", lab.location)
        lines.append(f"{n}\t{lab.provenance}\t{lab.source}\t{lab.distance}\t{lab.iou:.6f}")
    tmp = d / "manifest.tsv.tmp"
    tmp.write_text("\n".join(lines) + "\n")
    tmp.replace(d / "manifest.tsv")


def read_labels(root, clip_name) -> dict:
    d = Path(root) / clip_name
    lines = (d / "manifest.tsv").read_text().splitlines()
    header = tuple(lines[0].split("\t"))
    if header != MANIFEST_COLUMNS:
        raise ValueError(f"{d}/manifest.tsv: unexpected columns {header}")
    out = {}
    for line in lines[1:]:
        frame, prov, src, dist, iou = line.split("\t")
        n = int(frame)
        out[n] = SpatiotemporalLabel(n, imaging.read_gray(d / f"{n:05d}.png"), prov,
                                     int(src), int(dist), float(iou))
    return out
