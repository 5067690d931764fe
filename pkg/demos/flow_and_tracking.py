"""
Optical flow files, warping and tracking a location
===================================================

Flow fields are stored in the Middlebury ``.flo`` format. A backward flow from
frame n to frame 0 pulls a location map from frame 0 into frame n; the tracked
boxes are then re-located on frame n itself.
"""

import tempfile
from pathlib import Path

import numpy as np

from provsod import imaging, labels, metrics

tmp = Path(tempfile.mkdtemp())

# a field survives a round trip through the file bit for bit
flow = np.random.default_rng(0).normal(scale=4, size=(30, 40, 2)).astype(np.float32)
imaging.write_flo(tmp / "f.flo", flow)
print("round trip exact:", imaging.read_flo(tmp / "f.flo").tobytes() == flow.tobytes())

# the colour-wheel rendering maps direction to hue and speed to saturation
render = imaging.render_flow(flow)
print("rendered", render.shape, render.dtype, "zero flow is white:", imaging.render_flow(np.zeros((2, 2, 2)))[0, 0])


def frame(top, left):
    img = np.full((48, 48, 3), 0.1)
    img[top:top + 12, left:left + 12] = (0.9, 0.8, 0.2)
    return img


def locator(img):
    # a stand-in for the trained network: distance from the dominant colour
    dist = np.linalg.norm(img - np.median(img.reshape(-1, 3), axis=0), axis=-1)
    return np.clip(dist / 0.5, 0, 1)


# the square moves 5 columns right and 4 rows down between frame 0 and frame n
m0 = locator(frame(16, 18))
back = np.zeros((48, 48, 2))
back[..., 0], back[..., 1] = -5.0, -4.0  # frame n -> frame 0

warped = imaging.backward_warp(m0, back)
print("warped centroid moved by", np.argwhere(warped > 0.5).mean(0) - np.argwhere(m0 > 0.5).mean(0))

tracked = labels.track_to_adjacent(m0, back, frame(20, 23), locator)
truth = locator(frame(20, 23))
print("tracked vs frame n location, IoU", round(metrics.soft_iou(tracked, truth), 3))

# a flow that throws everything off the frame leaves nothing to track
print("off-frame:", labels.track_to_adjacent(m0, np.full((48, 48, 2), 200.0), frame(20, 23), locator))
