"""Locating and segmenting networks.

A small strided-conv encoder stands in for the pretrained backbone. CLM and
FSM share one FPN-style top-down decoder with side-out aggregation; the
two-stream network adds a shared-weight optical-flow encoder whose five
pyramids are gated by learned scalar weights and fused level by level.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import imaging
from .sampler import attention_restore, attention_sample
from .video import FlowBundle

CKPT_FORMAT = "provsod-checkpoint"
CKPT_VERSION = 1
N_LEVELS = 5
N_FLOWS = 5


@dataclass
class NetworkConfig:
    size: tuple = (64, 64)
    widths: tuple = (16, 32, 64, 128, 256)
    decoder_width: int = 32
    depth: int = 2
    seed: int = 0

    def __post_init__(self):
        self.size = tuple(int(s) for s in self.size)
        self.widths = tuple(int(w) for w in self.widths)
        h, w = self.size
        if h % 32 or w % 32:
            raise ValueError(f"input size {self.size} must be divisible by 32")
        if min(h, w) < 64:
            raise ValueError("input size must be at least 64x64")
        if len(self.widths) != N_LEVELS:
            raise ValueError("exactly five pyramid widths are required")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")


def _conv(cin, cout, k=3, stride=1, bias=True):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=bias)


class Encoder(nn.Module):
    """Five stride-2 stages; returns ``[C1..C5]`` at strides 2..32."""

    def __init__(self, widths, depth=2):
        super().__init__()
        stages = []
        cin = 3
        for w in widths:
            layers = [_conv(cin, w, stride=2), nn.ReLU(inplace=True)]
            for _ in range(depth - 1):
                layers += [_conv(w, w), nn.ReLU(inplace=True)]
            stages.append(nn.Sequential(*layers))
            cin = w
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        feats = []
        x = x - 0.5
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class SideOutAggregation(nn.Module):
    """Multi-scale average pooling branches added back residually, then a 3x3 conv.

    Without bias terms the module maps zero input to zero output.
    """

    def __init__(self, ch, scales=(2, 4, 8), bias=True):
        super().__init__()
        self.scales = scales
        self.branches = nn.ModuleList(_conv(ch, ch, bias=bias) for _ in scales)
        self.out = _conv(ch, ch, bias=bias)

    def forward(self, x):
        h, w = x.shape[-2:]
        y = x
        for s, conv in zip(self.scales, self.branches):
            pooled = F.adaptive_avg_pool2d(x, (max(1, h // s), max(1, w // s)))
            y = y + F.interpolate(conv(pooled), size=(h, w), mode="bilinear", align_corners=False)
        return F.relu(self.out(y))


class Decoder(nn.Module):
    """Top-down fusion producing one supervision logit map per level.

    With ``motion=True`` each level also receives a motion pyramid through
    bias-free laterals, so a zero motion pyramid contributes exactly zero.
    """

    def __init__(self, widths, width, motion=False, edges=False):
        super().__init__()
        self.lat = nn.ModuleList(nn.Conv2d(c, width, 1) for c in widths)
        self.sa = nn.ModuleList(SideOutAggregation(width) for _ in widths)
        self.fuse = nn.ModuleList(_conv(width, width) for _ in widths[:-1])
        self.heads = nn.ModuleList(nn.Conv2d(width, 1, 1) for _ in widths)
        self.motion = motion
        if motion:
            self.lat_m = nn.ModuleList(nn.Conv2d(c, width, 1, bias=False) for c in widths)
            self.sa_m = SideOutAggregation(width, bias=False)
        self.edge_heads = nn.ModuleList(nn.Conv2d(width, 1, 1) for _ in widths) if edges else None

    def forward(self, static, motion=None):
        """Return (map logits, edge logits or None), each a list ordered finest level first."""
        if len(static) != N_LEVELS:
            raise ValueError("static pyramid must have five levels")
        if self.motion:
            if motion is None or len(motion) != N_LEVELS:
                raise ValueError("motion pyramid must have five levels")
            for s, m in zip(static, motion):
                if s.shape != m.shape:
                    raise ValueError(f"pyramid mismatch {tuple(s.shape)} vs {tuple(m.shape)}")
        top = N_LEVELS - 1
        p = self.sa[top](self.lat[top](static[top]))
        if self.motion:
            p = p + self.sa_m(self.lat_m[top](motion[top]))
        feats = [p]
        for lvl in range(top - 1, -1, -1):
            x = self.lat[lvl](static[lvl])
            if self.motion:
                x = x + self.lat_m[lvl](motion[lvl])
            x = x + F.interpolate(p, size=x.shape[-2:], mode="bilinear", align_corners=False)
            p = self.sa[lvl](F.relu(self.fuse[lvl](x)))
            feats.append(p)
        feats = feats[::-1]
        logits = [head(f) for head, f in zip(self.heads, feats)]
        edges = None
        if self.edge_heads is not None:
            edges = [head(f) for head, f in zip(self.edge_heads, feats)]
        return logits, edges


def _upsample(logits, size):
    return [F.interpolate(x, size=size, mode="bilinear", align_corners=False) for x in logits]


def _check_input(x):
    if x.shape[-2] % 32 or x.shape[-1] % 32:
        raise ValueError(f"input {tuple(x.shape[-2:])} not divisible by 32")


class CLM(nn.Module):
    """Coarse locating module: five location maps in [0, 1] at input resolution, finest first."""

    kind = "clm"

    def __init__(self, config: NetworkConfig | None = None, edges=False):
        super().__init__()
        self.config = config or NetworkConfig()
        torch.manual_seed(self.config.seed)
        self.encoder = Encoder(self.config.widths, self.config.depth)
        self.decoder = Decoder(self.config.widths, self.config.decoder_width, edges=edges)

    def forward_logits(self, x):
        _check_input(x)
        logits, edges = self.decoder(self.encoder(x))
        size = x.shape[-2:]
        return _upsample(logits, size), (_upsample(edges, size) if edges is not None else None)

    def forward(self, x):
        logits, _ = self.forward_logits(x)
        return [torch.sigmoid(z) for z in logits]


class FSM(CLM):
    """Fine segmenting module: CLM topology plus per-level edge heads."""

    kind = "fsm"

    def __init__(self, config: NetworkConfig | None = None):
        super().__init__(config, edges=True)


def flow_weighting(pyramids, compress):
    """Gate each flow pyramid by a scalar from its top level and sum them.

    ``pyramids`` is a list over levels of tensors ``(B, K, C, h, w)``. The
    weight of flow ``k`` is the spatial mean of ``compress`` applied to its
    top-level map. Contributions are summed in ascending weight order, so the
    result does not depend on the order of the flows, bit for bit.
    Returns ``(weights (B, K), combined pyramid)``.
    """
    top = pyramids[-1]
    b, k = top.shape[:2]
    weights = compress(top.flatten(0, 1)).mean(dim=(1, 2, 3)).view(b, k)
    sorted_w, order = torch.sort(weights, dim=1, stable=True)
    combined = []
    for level in pyramids:
        idx = order.view(b, k, 1, 1, 1).expand_as(level)
        ranked = torch.gather(level, 1, idx) * sorted_w.view(b, k, 1, 1, 1)
        acc = ranked[:, 0]
        for j in range(1, k):
            acc = acc + ranked[:, j]
        combined.append(acc)
    return weights, combined


class TwoStreamNet(nn.Module):
    """Static RGB branch plus a five-flow dynamic branch fused in a top-down decoder."""

    kind = "two_stream"

    def __init__(self, config: NetworkConfig | None = None):
        super().__init__()
        self.config = config or NetworkConfig()
        torch.manual_seed(self.config.seed)
        widths = self.config.widths
        self.static_encoder = Encoder(widths, self.config.depth)
        self.flow_encoder = Encoder(widths, self.config.depth)
        self.compress = nn.Conv2d(widths[-1], 1, 1)
        self.decoder = Decoder(widths, self.config.decoder_width, motion=True)

    @classmethod
    def from_clm(cls, clm: CLM):
        """Both encoders and the static decoder path start from a trained CLM."""
        net = cls(clm.config)
        net.static_encoder.load_state_dict(clm.encoder.state_dict())
        net.flow_encoder.load_state_dict(clm.encoder.state_dict())
        missing, unexpected = net.decoder.load_state_dict(clm.decoder.state_dict(), strict=False)
        assert not unexpected and all(k.startswith(("lat_m", "sa_m")) for k in missing)
        return net

    def flow_branch(self, bundle):
        """``bundle`` is ``(B, 5, 3, H, W)``; returns per-level ``(B, 5, C, h, w)`` pyramids."""
        if bundle.dim() != 5 or bundle.shape[1] != N_FLOWS:
            raise ValueError(f"flow bundle must be (B, {N_FLOWS}, 3, H, W), got {tuple(bundle.shape)}")
        b, k = bundle.shape[:2]
        feats = self.flow_encoder(bundle.flatten(0, 1))
        return [f.view(b, k, *f.shape[1:]) for f in feats]

    def motion_pyramid(self, bundle):
        return flow_weighting(self.flow_branch(bundle), self.compress)

    def fuse_features(self, static, motion, size):
        logits, _ = self.decoder(static, motion)
        return [torch.sigmoid(z) for z in _upsample(logits, size)]

    def forward(self, frame, bundle):
        _check_input(frame)
        static = self.static_encoder(frame)
        _, motion = self.motion_pyramid(bundle)
        return self.fuse_features(static, motion, frame.shape[-2:])


# ----------------------------------------------------------------- numpy glue

def to_tensor(img) -> torch.Tensor:
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        return torch.from_numpy(img)[None, None]
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None]


def peak_normalize(m, floor=1e-6) -> np.ndarray:
    m = np.clip(np.asarray(m, dtype=np.float64), 0.0, None)
    return m / max(float(m.max()), floor)


class Locator:
    """Callable wrapper: RGB array of any size -> finest location map at the same size.

    Maps are rescaled so their brightest pixel is 1. The locating loss is
    invariant to the output scale, so raw amplitudes carry no meaning and two
    maps are only comparable after this normalisation.
    """

    def __init__(self, net: CLM):
        self.net = net.eval()

    def __call__(self, rgb) -> np.ndarray:
        return self.batch([rgb])[0]

    @torch.no_grad()
    def batch(self, images, chunk=32):
        size = self.net.config.size
        out = []
        for start in range(0, len(images), chunk):
            part = images[start:start + chunk]
            x = torch.cat([to_tensor(imaging.resize(im, size)) for im in part])
            maps = self.net(x)[0][:, 0].double().numpy()
            out.extend(peak_normalize(imaging.resize(m, np.shape(im)[:2])) for m, im in zip(maps, part))
        return out


# ---------------------------------------------------------------- checkpoints

_KINDS = {"clm": CLM, "fsm": FSM, "two_stream": TwoStreamNet}


def save_checkpoint(path, net, extra=None) -> None:
    """Write to a temporary file then rename, so an interrupt never leaves a partial file."""
    path = Path(path)
    payload = {
        "format": CKPT_FORMAT,
        "version": CKPT_VERSION,
        "kind": net.kind,
        "config": asdict(net.config),
        "state": {k: v.detach().clone() for k, v in net.state_dict().items()},
        "extra": extra or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path, kind=None):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CKPT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint")
    if payload.get("version") != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    if kind is not None and payload["kind"] != kind:
        raise ValueError(f"{path}: expected a {kind} checkpoint, found {payload['kind']}")
    cfg = NetworkConfig(**payload["config"])
    net = _KINDS[payload["kind"]](cfg)
    net.load_state_dict(payload["state"], strict=True)
    return net.eval()


# ------------------------------------------------------------------ inference

FIXED_FILL = 0.5


def sample_flow_neighbors(clip, i, rng, train=True, k=N_FLOWS, max_offset=5, size=None):
    """Pick ``k`` distinct offsets from ``±1..±max_offset`` and render their flows.

    Offsets that leave the clip or lack a flow, and every slot when ``clip`` is
    None (still images), get a constant image instead: a random gray level per
    image while training, mid-gray at inference. Near the first and last
    frames some slots are therefore always constant.
    """
    candidates = [o for o in range(-max_offset, max_offset + 1) if o]
    offsets = sorted(int(o) for o in rng.choice(candidates, size=k, replace=False))
    images, valid = [], []
    if clip is not None and size is None:
        size = clip.frame(i).shape[:2]
    if size is None:
        raise ValueError("size is required without a clip")
    for o in offsets:
        render = None
        if clip is not None and (i + o) in clip:
            render = clip.rendered_flow(i, i + o)
        valid.append(render is not None)
        if render is None:
            level = float(rng.uniform()) if train else FIXED_FILL
            render = np.full((*size, 3), level)
        images.append(render)
    return FlowBundle(images, valid, offsets)


def bundle_tensor(bundle, size) -> torch.Tensor:
    arr = np.stack([imaging.resize(im, size) for im in bundle.images]).astype(np.float32)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))[None]


@torch.no_grad()
def progressive_inference(two_stream, fsm, frame, bundle, lam=0.25) -> np.ndarray:
    """Locate with the two-stream net, magnify, segment with the FSM, restore."""
    two_stream.eval()
    fsm.eval()
    frame = np.asarray(frame, dtype=np.float64)
    orig = frame.shape[:2]
    size = two_stream.config.size
    x = imaging.resize(frame, size)
    loc = two_stream(to_tensor(x), bundle_tensor(bundle, size))[0][0, 0].double().numpy()
    sampled, grid = attention_sample(x, loc, lam=lam)
    seg = fsm(to_tensor(sampled))[0][0, 0].double().numpy()
    out = attention_restore(seg, grid)
    return np.clip(imaging.resize(out, orig), 0.0, 1.0)
