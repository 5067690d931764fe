"""
Attention-guided resampling
===========================

Before the final segmentation the frame is resampled so that the located
object gets more pixels. The grid follows the cumulative attention along each
axis, mixed with a uniform share so the background never disappears.
"""

import numpy as np

from provsod import imaging
from provsod.sampler import attention_restore, attention_sample, build_grid, sample_mask

rng = np.random.default_rng(0)
img = imaging.gaussian_blur(rng.uniform(size=(64, 64)), 2.0)

attn = np.zeros((64, 64))
attn[24:40, 24:40] = 1.0

# with lambda = 0.25 a quarter of the samples stay uniform
grid = build_grid(attn, lam=0.25)
print("sample columns near the middle:", np.round(grid.cols[26:38], 1))
print("share of samples inside the box:", sample_mask(attn > 0, grid).mean(), "vs area", (attn > 0).mean())

# sample, then map back to the original geometry
sampled, grid = attention_sample(img, attn)
restored = attention_restore(sampled, grid)
inside = attn > 0
print("restore error inside the box ", np.abs(restored - img)[inside].mean())
print("restore error outside the box", np.abs(restored - img)[~inside].mean())

# uniform attention is an ordinary resize
plain, _ = attention_sample(img, np.ones_like(img), out_shape=(32, 32))
print("uniform == resize:", np.allclose(plain, imaging.resize(img, (32, 32))))
