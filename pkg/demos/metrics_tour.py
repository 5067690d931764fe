"""
Scoring saliency maps
=====================

Every number in an evaluation report comes from a handful of per-frame
functions. This walks through them on a map we can check by hand.
"""

import numpy as np

from provsod import metrics

# a 6x8 ground truth with a 3x4 object in the corner
gt = np.zeros((6, 8), bool)
gt[:3, :4] = True

# a prediction that covers the object plus one stray column at half strength
pred = np.zeros((6, 8))
pred[:3, :4] = 1.0
pred[:3, 4] = 0.5

print("soft IoU    ", metrics.soft_iou(pred, gt))  # 12 / (12 + 1.5)
print("D-Recall    ", metrics.d_recall(pred, gt))  # the whole object is covered
print("D-Precision ", metrics.d_precision(pred, gt))  # 12 of 13.5 units of mass land on it
print("MAE         ", metrics.mae(pred, gt))  # 1.5 / 48

# precision and recall at 256 thresholds; the stray column drops out above 0.5
precision, recall = metrics.f_measure_curve(pred, gt)
print("P at k=0, 127, 128:", precision[[0, 127, 128]])
print("F_max       ", metrics.f_max(precision, recall))

# the structure measure rewards maps whose regions look like the truth
print("S-measure   ", metrics.s_measure(pred, gt))
print("S of a blank map", metrics.s_measure(np.zeros((6, 8)), gt))

# a dataset report averages over frames and skips frames with empty truth
rng = np.random.default_rng(0)
pairs = [(f"f{k}", np.clip(gt + rng.normal(scale=0.1, size=gt.shape), 0, 1), gt) for k in range(5)]
pairs.append(("empty", pred, np.zeros_like(gt)))
report = metrics.evaluate_pairs(pairs)
print(metrics.format_table({"toy": report}))
print("frames scored", report.n_frames, "skipped", report.n_skipped)
