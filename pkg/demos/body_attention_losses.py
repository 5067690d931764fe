"""
Body-attention targets and the locating loss
============================================

The locating network is not asked to reproduce a mask. It is asked to put its
attention on the body of the object: a dilated and blurred version of the mask,
scored with saliency-prediction losses that ignore scale and offset.
"""

import numpy as np
import torch

from provsod import labels, losses

gt = np.zeros((64, 64), bool)
gt[20:44, 18:40] = True

# dilate by 8% of the short side, blur, rescale so the peak is 1
q = labels.body_attention_target(gt)
print("target range", q.min(), q.max())
print("row through the centre:", np.round(q[32, 10:48:3], 2))

# the peak set is where the target is saturated; it always contains the mask
peak = losses.peak_set(q)
print("peak pixels", int(peak.sum()), "mask pixels", int(gt.sum()), "mask inside", bool(peak[gt].all()))

# the three terms on a few candidate maps
qt = torch.tensor(q)
candidates = {
    "target itself": qt,
    "mask only": torch.tensor(gt, dtype=torch.float64),
    "uniform noise": torch.rand(64, 64, dtype=torch.float64, generator=torch.Generator().manual_seed(0)),
    "inverted": 1 - qt,
}
for name, p in candidates.items():
    terms = (losses.nss_prime(p, torch.tensor(peak)), losses.cc_prime(p, qt), losses.kld(p, qt))
    print(f"{name:14s} NSS' {terms[0].item():7.3f}  CC' {terms[1].item():6.3f}  KL {terms[2].item():6.3f}")

# scale and offset do not matter
p = candidates["uniform noise"]
print("CC' of p and 3p + 1:", losses.cc_prime(p, qt).item(), losses.cc_prime(3 * p + 1, qt).item())

# with a binary target every term reaches zero together
b = torch.tensor(gt, dtype=torch.float64)
print("loss at a binary target", losses.body_attention_loss(b, b).item())
print("summed over five levels", losses.total_locating_loss([b] * 5, b).item())
