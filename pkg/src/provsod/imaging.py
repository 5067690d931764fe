"""Image and flow primitives: morphology, blur, components, warping, flow rendering, file IO.

Gray maps are 2-D float arrays in [0, 1], RGB images are ``(H, W, 3)`` float
arrays in [0, 1] and flow fields are ``(H, W, 2)`` arrays holding ``(u, v)``
displacements in pixels (``u`` along columns, ``v`` along rows).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

FLO_MAGIC = 202021.25


@dataclass(frozen=True)
class BoundingBox:
    """Half-open box ``[top, bottom) x [left, right)`` in pixel coordinates."""

    top: int
    left: int
    bottom: int
    right: int

    @property
    def height(self) -> int:
        return self.bottom - self.top

    @property
    def width(self) -> int:
        return self.right - self.left

    def contains(self, other: "BoundingBox") -> bool:
        return (self.top <= other.top and self.left <= other.left
                and self.bottom >= other.bottom and self.right >= other.right)

    def slices(self):
        return slice(self.top, self.bottom), slice(self.left, self.right)


def _square(radius):
    return np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)


def dilate(mask, radius: int) -> np.ndarray:
    """Binary dilation with a ``(2r+1)`` square, i.e. Chebyshev-distance neighbourhood."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    mask = np.asarray(mask).astype(bool)
    if radius == 0 or not mask.any():
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=_square(radius))


def erode(mask, radius: int) -> np.ndarray:
    """Binary erosion with a square element; pixels outside the frame count as 0."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    mask = np.asarray(mask).astype(bool)
    if radius == 0:
        return mask.copy()
    return ndimage.binary_erosion(mask, structure=_square(radius), border_value=0)


def closing(mask, radius: int) -> np.ndarray:
    """Dilate then erode on a canvas padded by ``radius``, so shapes touching the border survive."""
    mask = np.asarray(mask).astype(bool)
    if radius == 0:
        return mask.copy()
    padded = np.pad(mask, radius)
    closed = erode(dilate(padded, radius), radius)
    return closed[radius:-radius, radius:-radius]


def gaussian_blur(m, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel cut at 3 sigma and renormalised, reflect padding."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    m = np.asarray(m, dtype=np.float64)
    out = ndimage.gaussian_filter(m, sigma=sigma, mode="reflect", truncate=3.0)
    # rounding can leave values a few ulp outside the input range
    return np.clip(out, m.min(), m.max())


def threshold(m, t: float) -> np.ndarray:
    return np.asarray(m) > t


def bounding_box(mask) -> BoundingBox | None:
    rows = np.flatnonzero(np.any(mask, axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(np.any(mask, axis=0))
    return BoundingBox(int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1)


def connected_components(mask) -> list[np.ndarray]:
    """8-connected foreground components, ordered by the (top, left) of their boxes."""
    mask = np.asarray(mask).astype(bool)
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return []
    found = ndimage.find_objects(labels)
    order = sorted(range(n), key=lambda k: (found[k][0].start, found[k][1].start))
    return [labels == (k + 1) for k in order]


def expand_box(box: BoundingBox, frame_h: int, frame_w: int) -> BoundingBox:
    """Double height and width about the box centre, then clamp to the frame."""
    h, w = box.height, box.width
    top = max(0, box.top - h // 2)
    bottom = min(frame_h, box.bottom + (h + 1) // 2)
    left = max(0, box.left - w // 2)
    right = min(frame_w, box.right + (w + 1) // 2)
    return BoundingBox(top, left, bottom, right)


def bilinear_sample(src, rows, cols, fill=0.0):
    """Sample ``src`` (H, W[, C]) at float coordinates; neighbours outside the frame read ``fill``."""
    src = np.asarray(src, dtype=np.float64)
    h, w = src.shape[:2]
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = rows - r0
    fc = cols - c0
    if src.ndim == 3:
        fr = fr[..., None]
        fc = fc[..., None]

    def tap(r, c):
        ok = (r >= 0) & (r < h) & (c >= 0) & (c < w)
        vals = src[np.clip(r, 0, h - 1), np.clip(c, 0, w - 1)]
        if src.ndim == 3:
            ok = ok[..., None]
        return np.where(ok, vals, fill)

    a, b = tap(r0, c0), tap(r0, c0 + 1)
    c, d = tap(r0 + 1, c0), tap(r0 + 1, c0 + 1)
    # lerp form a + t*(b-a) keeps integer coordinates and constant inputs exact
    top = a + fc * (b - a)
    bot = c + fc * (d - c)
    return top + fr * (bot - top)


def backward_warp(src, flow) -> np.ndarray:
    """``out(r, c) = src(r + v, c + u)`` with bilinear interpolation and zero fill."""
    src = np.asarray(src, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    if flow.shape[:2] != src.shape[:2] or flow.shape[-1] != 2:
        raise ValueError(f"flow {flow.shape} does not match source {src.shape}")
    h, w = src.shape[:2]
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    return bilinear_sample(src, rr + flow[..., 1], cc + flow[..., 0], fill=0.0)


def compose_flows(first, second) -> np.ndarray:
    """Chain ``a -> b`` with ``b -> c`` into ``a -> c``.

    Displacements of ``second`` are read at the points ``first`` lands on;
    points landing outside the frame keep only the first displacement.
    """
    first = np.asarray(first, dtype=np.float64)
    second = np.asarray(second, dtype=np.float64)
    h, w = first.shape[:2]
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    r, c = rr + first[..., 1], cc + first[..., 0]
    inside = (r >= 0) & (r <= h - 1) & (c >= 0) & (c <= w - 1)
    extra = bilinear_sample(second, r, c, fill=0.0)
    return first + np.where(inside[..., None], extra, 0.0)


def make_colorwheel() -> np.ndarray:
    """The 55-entry Middlebury colour wheel, RGB in 0..255."""
    RY, YG, GC, CB, BM, MR = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((RY + YG + GC + CB + BM + MR, 3))
    col = 0
    wheel[0:RY, 0] = 255
    wheel[0:RY, 1] = np.floor(255 * np.arange(RY) / RY)
    col += RY
    wheel[col:col + YG, 0] = 255 - np.floor(255 * np.arange(YG) / YG)
    wheel[col:col + YG, 1] = 255
    col += YG
    wheel[col:col + GC, 1] = 255
    wheel[col:col + GC, 2] = np.floor(255 * np.arange(GC) / GC)
    col += GC
    wheel[col:col + CB, 1] = 255 - np.floor(255 * np.arange(CB) / CB)
    wheel[col:col + CB, 2] = 255
    col += CB
    wheel[col:col + BM, 2] = 255
    wheel[col:col + BM, 0] = np.floor(255 * np.arange(BM) / BM)
    col += BM
    wheel[col:col + MR, 2] = 255 - np.floor(255 * np.arange(MR) / MR)
    wheel[col:col + MR, 0] = 255
    return wheel


_WHEEL = make_colorwheel()


def render_flow(flow) -> np.ndarray:
    """Colour-code a flow field; hue is direction, saturation is magnitude over the field max.

    Zero flow renders white, so a static scene gives a blank image.
    """
    flow = np.asarray(flow, dtype=np.float64)
    if not np.all(np.isfinite(flow)):
        raise ValueError("flow contains non-finite values")
    u, v = flow[..., 0], flow[..., 1]
    rad = np.sqrt(u * u + v * v)
    rad_max = rad.max()
    if rad_max > 0:
        u, v, rad = u / rad_max, v / rad_max, rad / rad_max
    ncols = _WHEEL.shape[0]
    a = np.arctan2(-v, -u) / np.pi
    fk = (a + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(np.int64)
    k1 = (k0 + 1) % ncols
    f = (fk - k0)[..., None]
    col0 = _WHEEL[k0] / 255.0
    col1 = _WHEEL[k1] / 255.0
    col = (1 - f) * col0 + f * col1
    rad = np.minimum(rad, 1.0)[..., None]
    return np.clip(1 - rad * (1 - col), 0.0, 1.0)


# ---------------------------------------------------------------- file formats

def read_flo(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = np.fromfile(fh, "<f4", count=1)
        if magic.size != 1 or magic[0] != np.float32(FLO_MAGIC):
            raise ValueError(f"{path}: bad .flo magic number")
        w, h = (int(x) for x in np.fromfile(fh, "<i4", count=2))
        data = np.fromfile(fh, "<f4", count=2 * w * h)
    if data.size != 2 * w * h:
        raise ValueError(f"{path}: truncated .flo payload")
    return data.reshape(h, w, 2).astype(np.float32)


def write_flo(path, flow) -> None:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"expected (H, W, 2) flow, got {flow.shape}")
    h, w = flow.shape[:2]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.array([FLO_MAGIC], "<f4").tofile(fh)
        np.array([w, h], "<i4").tofile(fh)
        np.ascontiguousarray(flow, dtype="<f4").tofile(fh)
    tmp.replace(path)


def to_uint8(m) -> np.ndarray:
    return np.round(np.clip(np.asarray(m, dtype=np.float64), 0, 1) * 255).astype(np.uint8)


def read_gray(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def write_gray(path, m) -> None:
    Image.fromarray(to_uint8(m), mode="L").save(path)


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_rgb(path, img) -> None:
    Image.fromarray(to_uint8(img), mode="RGB").save(path)


def resize(img, size, order=1) -> np.ndarray:
    """Resize a map or image to ``(h, w)`` with pixel-centre aligned interpolation."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    oh, ow = size
    if (h, w) == (oh, ow):
        return img.copy()
    rows = (np.arange(oh) + 0.5) * h / oh - 0.5
    cols = (np.arange(ow) + 0.5) * w / ow - 0.5
    rows = np.clip(rows, 0, h - 1)
    cols = np.clip(cols, 0, w - 1)
    if order == 0:
        return img[np.round(rows).astype(int)][:, np.round(cols).astype(int)]
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return bilinear_sample(img, rr, cc, fill=0.0)
