"""
Pseudo-labels from static and dynamic evidence
==============================================

A frame is trusted when the location found on the RGB frame agrees with the
location found on its rendered optical flow. Trusted frames seed labels that
are carried to neighbouring frames along the flow.
"""

import tempfile
from collections import Counter
from pathlib import Path

import numpy as np

from provsod import labels, metrics
from provsod.synthetic import SynthSpec, generate_synthetic_corpus
from provsod.video import open_clips

root = generate_synthetic_corpus(SynthSpec(n_images=1, n_clips=4, n_static_clips=1, n_test_clips=0),
                                 Path(tempfile.mkdtemp()), seed=3)
clips = open_clips(root / "videos")
print("clips:", [c.name for c in clips], "frames each:", len(clips[0]))


# The trained locator would go here. This stand-in knows the synthetic truth for
# RGB frames and reads flow renderings, where still pixels are white, by colour.
truth = {c.frame(n).tobytes(): c.gt(n) for c in clips for n in c.indices}


def locator(img):
    mask = truth.get(np.asarray(img).tobytes())
    if mask is None:
        mask = np.linalg.norm(1 - np.asarray(img), axis=-1) > 0.25
    return labels.body_attention_target(mask) if mask.any() else np.zeros(mask.shape)


# the discriminator on one moving frame
clip = clips[1]
i, j = labels.dynamic_pair(clip, 4)
static, dynamic = locator(clip.frame(i)), locator(clip.rendered_flow(i, j))
print("static/dynamic IoU", round(metrics.soft_iou(static, dynamic), 3))

# the whole training set; the first clip does not move, so its flow is blank
dataset = labels.build_location_dataset(clips, locator, t_thresh=0.7, window=6)
for c in clips:
    got = dataset.get(c.name, {})
    kinds = Counter(l.provenance for l in got.values())
    recall = [metrics.d_recall(l.location, c.gt(n)) for n, l in got.items()]
    print(c.name, dict(kinds), "min D-Recall", round(min(recall), 3) if recall else None)

# With an oracle every moving frame passes, so nothing needed tracking here. With a
# trained locator some frames fail the check and take the label of the nearest
# trusted frame, carried along the flow; the label records its source and distance.
