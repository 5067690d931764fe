"""Three-stage training, label generation and evaluation driven by a flat run config."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import random
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch

from . import imaging, labels as lab, metrics
from .losses import balanced_bce, body_attention_loss, total_locating_loss
from .nets import (CLM, FSM, Locator, NetworkConfig, TwoStreamNet, bundle_tensor, load_checkpoint,
                   progressive_inference, sample_flow_neighbors, save_checkpoint, to_tensor)
from .sampler import attention_sample, sample_mask
from .video import open_clips

log = logging.getLogger(__name__)

__version__ = "0.1.0"


@dataclass
class RunConfig:
    """Run settings. Optimiser defaults are the published two-stream settings;
    toy runs override epochs and learning rates."""

    out: str = "out"
    data_root: str = ""
    image_root: str = ""
    video_root: str = ""
    eval_root: str = ""
    seed: int = 0
    size: int = 64
    widths: str = "16,32,64,128,256"
    decoder_width: int = 32
    depth: int = 2
    t_thresh: float = 0.7
    track_window: int = 6
    track_radius: int = 0
    flow_bundle: int = 5
    flow_offsets: int = 5
    dilate_frac: float = 0.08
    sigma_frac: float = 0.01
    sampler_lambda: float = 0.25
    lr: float = 5e-5
    weight_decay: float = 1e-5
    lr_decay: float = 0.1
    decay_epoch: int = 15
    epochs: int = 24
    image_lr: float = 5e-5
    image_epochs: int = 24
    image_decay_epoch: int = 15
    batch_size: int = 1
    image_batch_size: int = 1
    max_steps: int = 0

    def __post_init__(self):
        if not 0 < self.t_thresh < 1:
            raise ValueError("t_thresh must lie in (0, 1)")
        if not 1 <= self.track_window <= 6:
            raise ValueError("track_window must lie in 1..6")
        if self.flow_bundle != 5:
            raise ValueError("the dynamic branch takes exactly five flow images")

    # data locations default to the synthetic corpus layout under data_root
    def path(self, name) -> Path:
        explicit = getattr(self, f"{name}_root")
        if explicit:
            return Path(explicit)
        sub = {"image": "images", "video": "videos", "eval": "test"}[name]
        return Path(self.data_root) / sub

    def require(self, *names) -> None:
        """Fail before any work if a needed data directory is missing."""
        for name in names:
            p = self.path(name)
            if not p.is_dir():
                raise FileNotFoundError(f"{name} data directory {p} does not exist")

    def network(self) -> NetworkConfig:
        widths = tuple(int(w) for w in str(self.widths).split(","))
        return NetworkConfig((self.size, self.size), widths, self.decoder_width, self.depth, self.seed)

    @property
    def shape(self):
        return (self.size, self.size)


def parse_config(text: str, **overrides) -> RunConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"config line {n}: unknown key {key!r}")
        values[key] = val
    values.update({k: v for k, v in overrides.items() if v is not None})
    for key, val in list(values.items()):
        if key not in types:
            raise ValueError(f"unknown key {key!r}")
        kind = types[key]
        if kind in ("int", int):
            values[key] = int(val)
        elif kind in ("float", float):
            values[key] = float(val)
        else:
            values[key] = str(val)
    return RunConfig(**values)


def load_config(path=None, **overrides) -> RunConfig:
    text = Path(path).read_text() if path else ""
    return parse_config(text, **overrides)


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in fields(cfg))


def seed_everything(seed: int) -> np.random.Generator:
    random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    return np.random.default_rng(seed)


# ------------------------------------------------------------------ manifests

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out, stage, cfg, files=(), losses=None, stats=None) -> Path:
    """Self-describing JSON written via temp file + rename. No timestamps, so reruns match."""
    out = Path(out)
    doc = {
        "stage": stage,
        "version": __version__,
        "torch": torch.__version__,
        "seed": cfg.seed,
        "config": dataclasses.asdict(cfg),
        "files": {str(Path(f).relative_to(out)): _sha256(f) for f in sorted(map(str, files))},
        "losses": losses or {},
        "stats": stats or {},
    }
    path = out / f"manifest_{stage}.json"
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path


# ------------------------------------------------------------------ ingestion

def ingest_image_dataset(root, size=None):
    """Pairs ``images/<stem>.png`` with ``masks/<stem>.png``.

    Returns ``(items, n_warnings)``. Missing or unreadable pairs are skipped;
    non-binary masks are binarised at 0.5.
    """
    root = Path(root)
    items, warnings = [], 0
    img_dir, mask_dir = root / "images", root / "masks"
    stems = sorted(p.stem for p in img_dir.glob("*.png")) if img_dir.is_dir() else []
    for stem in stems:
        mpath = mask_dir / f"{stem}.png"
        if not mpath.exists():
            log.warning("%s: no mask for %s, skipped", root, stem)
            warnings += 1
            continue
        try:
            img = imaging.read_rgb(img_dir / f"{stem}.png")
            mask = imaging.read_gray(mpath)
        except Exception as exc:  # corrupt files are skipped, not fatal
            log.warning("%s: unreadable pair %s (%s)", root, stem, exc)
            warnings += 1
            continue
        if img.shape[:2] != mask.shape:
            log.warning("%s: size mismatch for %s, skipped", root, stem)
            warnings += 1
            continue
        if np.any((mask > 0) & (mask < 1)):
            log.warning("%s: mask %s is not binary, thresholded at 0.5", root, stem)
            warnings += 1
        mask = mask > 0.5
        if size is not None:
            img = imaging.resize(img, size)
            mask = imaging.resize(mask.astype(np.float64), size) > 0.5
        if not mask.any():
            log.warning("%s: empty mask for %s, skipped", root, stem)
            warnings += 1
            continue
        items.append((stem, img, mask))
    if not items:
        raise ValueError(f"{root}: no usable image/mask pairs")
    return items, warnings


# ------------------------------------------------------------------- training

def _batches(rng, n, batch_size):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _optimizer(params, lr, weight_decay, decay_epoch, gamma):
    opt = torch.optim.Adam(params, lr=lr, weight_decay=weight_decay)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=max(1, decay_epoch), gamma=gamma)
    return opt, sched


def _stack(arrays):
    return torch.from_numpy(np.ascontiguousarray(np.stack(arrays), dtype=np.float32))


def _images_tensor(images):
    return _stack([im.transpose(2, 0, 1) for im in images])


def train_locator(net, images, targets, epochs, lr, weight_decay, decay_epoch, gamma,
                  batch_size, rng, max_steps=0):
    """Train a CLM on ``(image, body-attention target)`` pairs; returns the per-step loss trace."""
    opt, sched = _optimizer(net.parameters(), lr, weight_decay, decay_epoch, gamma)
    x_all, q_all = _images_tensor(images), _stack(targets)[:, None]
    trace = []
    net.train()
    for _ in range(epochs):
        for idx in _batches(rng, len(images), batch_size):
            x, q = x_all[idx], q_all[idx]
            if rng.uniform() < 0.5:
                x, q = x.flip(-1), q.flip(-1)
            loss = total_locating_loss(net(x), q)
            opt.zero_grad()
            loss.backward()
            opt.step()
            trace.append(loss.item())
            if max_steps and len(trace) >= max_steps:
                return trace
        sched.step()
    return trace


def morphological_edges(mask) -> np.ndarray:
    mask = np.asarray(mask).astype(bool)
    return imaging.dilate(mask, 1) & ~imaging.erode(mask, 1)


def fsm_training_set(items, cfg):
    """Sampled images, sampled masks and edge maps; the sampler is driven by GT body attention."""
    images, masks, edges = [], [], []
    for _, img, mask in items:
        attn = lab.body_attention_target(mask, *_target_params(cfg, mask.shape))
        sampled, grid = attention_sample(img, attn, lam=cfg.sampler_lambda)
        m = sample_mask(mask, grid) > 0.5
        if not m.any():
            continue
        images.append(sampled)
        masks.append(m.astype(np.float64))
        edges.append(morphological_edges(m).astype(np.float64))
    return images, masks, edges


def fsm_loss(net, x, mask, edge):
    logits, edge_logits = net.forward_logits(x)
    loss = 0
    for z, e in zip(logits, edge_logits):
        loss = loss + torch.nn.functional.binary_cross_entropy_with_logits(z, mask)
        loss = loss + body_attention_loss(torch.sigmoid(z), mask)
        loss = loss + balanced_bce(e, edge)
    return loss


def train_segmenter(net, images, masks, edges, epochs, lr, weight_decay, decay_epoch, gamma,
                    batch_size, rng, max_steps=0):
    opt, sched = _optimizer(net.parameters(), lr, weight_decay, decay_epoch, gamma)
    x_all = _images_tensor(images)
    m_all, e_all = _stack(masks)[:, None], _stack(edges)[:, None]
    trace = []
    net.train()
    for _ in range(epochs):
        for idx in _batches(rng, len(images), batch_size):
            x, m, e = x_all[idx], m_all[idx], e_all[idx]
            if rng.uniform() < 0.5:
                x, m, e = x.flip(-1), m.flip(-1), e.flip(-1)
            loss = fsm_loss(net, x, m, e)
            opt.zero_grad()
            loss.backward()
            opt.step()
            trace.append(loss.item())
            if max_steps and len(trace) >= max_steps:
                return trace
        sched.step()
    return trace


def _target_params(cfg, shape):
    return max(0, int(round(cfg.dilate_frac * min(shape)))), cfg.sigma_frac * min(shape)


def _ckpt_dir(cfg) -> Path:
    d = Path(cfg.out) / "checkpoints"
    d.mkdir(parents=True, exist_ok=True)
    return d


def train_stage_images(cfg: RunConfig):
    """Train CLM on body-attention targets and FSM on attention-sampled images."""
    cfg.require("image")
    rng = seed_everything(cfg.seed)
    items, warnings = ingest_image_dataset(cfg.path("image"), cfg.shape)
    images = [img for _, img, _ in items]
    targets = [lab.body_attention_target(m, *_target_params(cfg, m.shape)) for _, _, m in items]
    clm = CLM(cfg.network())
    clm_trace = train_locator(clm, images, targets, cfg.image_epochs, cfg.image_lr, cfg.weight_decay,
                              cfg.image_decay_epoch, cfg.lr_decay, cfg.image_batch_size, rng, cfg.max_steps)
    fsm = FSM(cfg.network())
    s_images, s_masks, s_edges = fsm_training_set(items, cfg)
    fsm_trace = train_segmenter(fsm, s_images, s_masks, s_edges, cfg.image_epochs, cfg.image_lr,
                                cfg.weight_decay, cfg.image_decay_epoch, cfg.lr_decay,
                                cfg.image_batch_size, rng, cfg.max_steps)
    d = _ckpt_dir(cfg)
    save_checkpoint(d / "clm.ckpt", clm)
    save_checkpoint(d / "fsm.ckpt", fsm)
    write_manifest(cfg.out, "train-images", cfg, [d / "clm.ckpt", d / "fsm.ckpt"],
                   losses={"clm": clm_trace, "fsm": fsm_trace},
                   stats={"pairs": len(items), "warnings": warnings})
    return clm.eval(), fsm.eval(), {"clm": clm_trace, "fsm": fsm_trace}


def run_label_generation(cfg: RunConfig, clm=None, stage_input=None):
    """Build pseudo-labels for every training clip and write them under ``out/labels``."""
    cfg.require("video")
    seed_everything(cfg.seed)
    if clm is None:
        clm = load_checkpoint(Path(stage_input or cfg.out) / "checkpoints" / "clm.ckpt", "clm")
    locator = Locator(clm)
    clips = open_clips(cfg.path("video"))
    label_root = Path(cfg.out) / "labels"
    files, per_clip, ious, hist = [], {}, [], {lab.HIGH_SALIENCY: 0, lab.TRACKED: 0}
    for clip in clips:
        labels, records = lab.build_clip_labels(clip, locator, cfg.t_thresh, cfg.track_window,
                                                cfg.track_radius or None, locator.batch)
        lab.write_labels(label_root, clip.name, labels)
        files.append(label_root / clip.name / "manifest.tsv")
        files.extend(label_root / clip.name / f"{n:05d}.png" for n in sorted(labels))
        per_clip[clip.name] = {"frames": len(clip), "high_saliency": len(records), "labelled": len(labels)}
        ious.extend(r.iou for r in records.values())
        for l in labels.values():
            hist[l.provenance] += 1
    stats = {
        "clips": per_clip,
        "frames_covered": sum(v["labelled"] for v in per_clip.values()),
        "mean_iou": math.fsum(ious) / len(ious) if ious else math.nan,
        "provenance": hist,
    }
    write_manifest(cfg.out, "gen-labels", cfg, files, stats=stats)
    return label_root, stats


def _label_samples(cfg, label_root):
    samples = []
    for clip in open_clips(cfg.path("video")):
        d = Path(label_root) / clip.name
        if not (d / "manifest.tsv").exists():
            continue
        for n, l in sorted(lab.read_labels(label_root, clip.name).items()):
            peak = l.location.max()
            if peak <= 0:
                continue
            # rescale so the brightest pixel is 255 and the peak set is defined
            samples.append((clip, n, l.location / peak))
    return samples


def train_two_stream(net, samples, cfg, rng):
    params = list(net.parameters())
    opt, sched = _optimizer(params, cfg.lr, cfg.weight_decay, cfg.decay_epoch, cfg.lr_decay)
    size = cfg.shape
    trace = []
    net.train()
    for _ in range(cfg.epochs):
        for idx in _batches(rng, len(samples), cfg.batch_size):
            frames, bundles, targets = [], [], []
            for k in idx:
                clip, n, q = samples[k]
                b = sample_flow_neighbors(clip, n, rng, train=True, max_offset=cfg.flow_offsets)
                frames.append(to_tensor(imaging.resize(clip.frame(n), size)))
                bundles.append(bundle_tensor(b, size))
                targets.append(imaging.resize(q, size))
            q = _stack(targets)[:, None]
            loss = total_locating_loss(net(torch.cat(frames), torch.cat(bundles)), q)
            opt.zero_grad()
            loss.backward()
            opt.step()
            trace.append(loss.item())
            if cfg.max_steps and len(trace) >= cfg.max_steps:
                return trace
        sched.step()
    return trace


def train_stage_two_stream(cfg: RunConfig, clm=None, stage_input=None):
    cfg.require("video")
    rng = seed_everything(cfg.seed)
    src = Path(stage_input or cfg.out)
    if clm is None:
        clm = load_checkpoint(src / "checkpoints" / "clm.ckpt", "clm")
    samples = _label_samples(cfg, src / "labels")
    if not samples:
        raise ValueError("no pseudo-labelled frames to train on")
    net = TwoStreamNet.from_clm(clm)
    trace = train_two_stream(net, samples, cfg, rng)
    path = _ckpt_dir(cfg) / "two_stream.ckpt"
    save_checkpoint(path, net)
    write_manifest(cfg.out, "train-video", cfg, [path], losses={"two_stream": trace},
                   stats={"samples": len(samples)})
    return net.eval(), trace


# ----------------------------------------------------------------- evaluation

def infer_clip(two_stream, fsm, clip, cfg, rng=None):
    """Saliency maps for every frame of ``clip``; inference fills use the fixed value."""
    rng = rng or np.random.default_rng(cfg.seed)
    out = {}
    for n in clip.indices:
        bundle = sample_flow_neighbors(clip, n, rng, train=False, max_offset=cfg.flow_offsets)
        out[n] = progressive_inference(two_stream, fsm, clip.frame(n), bundle, cfg.sampler_lambda)
    return out


@torch.no_grad()
def locate_clip(two_stream, clip, cfg, rng):
    maps = {}
    size = cfg.shape
    for n in clip.indices:
        bundle = sample_flow_neighbors(clip, n, rng, train=False, max_offset=cfg.flow_offsets)
        x = to_tensor(imaging.resize(clip.frame(n), size))
        m = two_stream(x, bundle_tensor(bundle, size))[0][0, 0].double().numpy()
        maps[n] = imaging.resize(m, clip.frame(n).shape[:2])
    return maps


def evaluate(cfg: RunConfig, two_stream=None, fsm=None, stage_input=None, dataset=None):
    """Run progressive inference over the evaluation clips and write maps, report, curves, scatter."""
    cfg.require("eval")
    seed_everything(cfg.seed)
    two_stream, fsm = _inference_nets(stage_input or cfg.out, two_stream, fsm)
    root = cfg.path("eval")
    name = dataset or root.name
    out = Path(cfg.out)
    files, pairs, scatter = [], [], []
    for clip in open_clips(root):
        rng = np.random.default_rng(cfg.seed)
        maps = infer_clip(two_stream, fsm, clip, cfg, rng)
        locs = locate_clip(two_stream, clip, cfg, np.random.default_rng(cfg.seed))
        d = out / "maps" / name / clip.name
        d.mkdir(parents=True, exist_ok=True)
        for n, m in maps.items():
            imaging.write_gray(d / f"{n:05d}.png", m)
            files.append(d / f"{n:05d}.png")
            gt = clip.gt(n)
            if gt is None:
                continue
            pairs.append((f"{clip.name}/{n:05d}", m, gt))
            scatter.append((f"{clip.name}/{n:05d}", metrics.d_recall(locs[n], gt),
                            metrics.d_precision(locs[n], gt)))
    report = metrics.evaluate_pairs(pairs)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    table = out / "report.txt"
    table.write_text(metrics.format_table({name: report}))
    curve = out / "curves" / f"{name}.csv"
    metrics.write_curve_csv(curve, report)
    scatter_path = out / "scatter.tsv"
    metrics.write_scatter(scatter_path, scatter)
    files += [table, curve, scatter_path]
    write_manifest(out, "eval", cfg, files, stats={
        "s_measure": report.s_measure, "f_max": report.f_max, "mae": report.mae,
        "frames": report.n_frames, "skipped": report.n_skipped})
    return report


def _inference_nets(src, two_stream=None, fsm=None):
    src = Path(src)
    if two_stream is None:
        two_stream = load_checkpoint(src / "checkpoints" / "two_stream.ckpt", "two_stream")
    if fsm is None:
        fsm = load_checkpoint(src / "checkpoints" / "fsm.ckpt", "fsm")
    return two_stream, fsm


def infer(cfg: RunConfig, two_stream=None, fsm=None, stage_input=None, dataset=None):
    """Saliency maps for every clip under the eval root, ground truth or not."""
    cfg.require("eval")
    seed_everything(cfg.seed)
    two_stream, fsm = _inference_nets(stage_input or cfg.out, two_stream, fsm)
    root = cfg.path("eval")
    name = dataset or root.name
    files = []
    for clip in open_clips(root):
        maps = infer_clip(two_stream, fsm, clip, cfg, np.random.default_rng(cfg.seed))
        d = Path(cfg.out) / "maps" / name / clip.name
        d.mkdir(parents=True, exist_ok=True)
        for n, m in maps.items():
            imaging.write_gray(d / f"{n:05d}.png", m)
            files.append(d / f"{n:05d}.png")
    write_manifest(cfg.out, "infer", cfg, files, stats={"frames": len(files)})
    return files


def synthesize(cfg: RunConfig, spec=None):
    """Write the synthetic corpus under ``out`` and index it in a manifest."""
    from .synthetic import SynthSpec, generate_synthetic_corpus

    out = Path(cfg.out)
    generate_synthetic_corpus(spec or SynthSpec(), out, cfg.seed)
    files = sorted(p for sub in ("images", "videos", "test") for p in (out / sub).rglob("*") if p.is_file())
    write_manifest(out, "synth", cfg, files, stats={"files": len(files)})
    return out
