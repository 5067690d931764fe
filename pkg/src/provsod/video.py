"""On-disk video clips: ``<clip>/frames/%05d.png``, ``<clip>/flow/%05d_%05d.flo``, optional ``<clip>/gt``."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imaging

log = logging.getLogger(__name__)

_FRAME = re.compile(r"^(\d+)\.png$")


@dataclass
class FlowBundle:
    images: list
    valid: list
    offsets: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.images) != len(self.valid):
            raise ValueError("images and validity flags differ in length")
        if self.offsets and len(self.offsets) != len(self.images):
            raise ValueError("images and offsets differ in length")

    def stack(self) -> np.ndarray:
        """``(K, 3, H, W)`` float32 array."""
        return np.stack([np.asarray(im, dtype=np.float32).transpose(2, 0, 1) for im in self.images])


@dataclass
class VideoClip:
    root: Path
    indices: list
    name: str = ""
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def open(cls, root) -> "VideoClip":
        root = Path(root)
        frames = root / "frames"
        if not frames.is_dir():
            raise FileNotFoundError(f"{frames} does not exist")
        idx = sorted(int(m.group(1)) for p in frames.iterdir() if (m := _FRAME.match(p.name)))
        if not idx:
            raise ValueError(f"{frames} holds no frames")
        if idx != list(range(idx[0], idx[0] + len(idx))):
            raise ValueError(f"{root}: frame indices are not contiguous")
        return cls(root, idx, root.name)

    def __len__(self):
        return len(self.indices)

    def __contains__(self, i):
        return self.indices[0] <= i <= self.indices[-1]

    def frame_path(self, i) -> Path:
        return self.root / "frames" / f"{i:05d}.png"

    def flow_path(self, i, j) -> Path:
        return self.root / "flow" / f"{i:05d}_{j:05d}.flo"

    def frame(self, i) -> np.ndarray:
        key = ("frame", i)
        if key not in self._cache:
            self._cache[key] = imaging.read_rgb(self.frame_path(i))
        return self._cache[key]

    def gt(self, i):
        path = self.root / "gt" / f"{i:05d}.png"
        if not path.exists():
            return None
        return imaging.read_gray(path) > 0.5

    def has_gt(self) -> bool:
        return (self.root / "gt").is_dir()

    def _direct_flow(self, i, j):
        key = ("flow", i, j)
        if key not in self._cache:
            path = self.flow_path(i, j)
            self._cache[key] = imaging.read_flo(path).astype(np.float64) if path.exists() else None
        return self._cache[key]

    def flow(self, i, j):
        """Flow from frame ``i`` to frame ``j``.

        Uses the stored file when present, otherwise chains adjacent flows
        ``i -> i±1 -> ... -> j``. Returns None (with a warning) if a link is missing.
        """
        if i == j or i not in self or j not in self:
            return None
        key = ("chain", i, j)
        if key in self._cache:
            return self._cache[key]
        out = self._direct_flow(i, j)
        if out is None:
            step = 1 if j > i else -1
            prev = self.flow(i, j - step) if abs(j - i) > 1 else None
            last = self._direct_flow(j - step, j)
            if abs(j - i) > 1 and prev is not None and last is not None:
                out = imaging.compose_flows(prev, last)
            else:
                log.warning("%s: no flow %d -> %d, pair skipped", self.name, i, j)
        self._cache[key] = out
        return out

    def rendered_flow(self, i, j):
        key = ("render", i, j)
        if key not in self._cache:
            f = self.flow(i, j)
            self._cache[key] = None if f is None else imaging.render_flow(f)
        return self._cache[key]


def open_clips(root) -> list[VideoClip]:
    root = Path(root)
    return [VideoClip.open(p) for p in sorted(root.iterdir()) if (p / "frames").is_dir()]
