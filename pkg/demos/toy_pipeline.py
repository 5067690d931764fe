"""
All four stages on a small synthetic corpus
===========================================

The same calls the command line makes, at a size that finishes in about a
minute. Expect weak scores; configs/toy.cfg is the setting that trains properly.
"""

import tempfile
from pathlib import Path

from provsod import pipeline
from provsod.synthetic import SynthSpec

work = Path(tempfile.mkdtemp())

toy = Path(__file__).resolve().parents[1] / "configs" / "toy.cfg"
cfg = pipeline.load_config(toy, out=str(work / "corpus"), seed=0)
spec = SynthSpec(n_images=40, n_clips=5, n_static_clips=1, n_test_clips=2, n_frames=12)
pipeline.synthesize(cfg, spec)

cfg = pipeline.parse_config(pipeline.dump_config(cfg), out=str(work / "run"), data_root=str(work / "corpus"),
                            image_epochs=3, epochs=1, max_steps=20)

# stage 1: the locator and the segmenter learn from still images
clm, fsm, traces = pipeline.train_stage_images(cfg)
print("locator loss", round(traces["clm"][0], 2), "->", round(traces["clm"][-1], 2))

# stage 2: pseudo-labels for the unlabelled clips
label_root, stats = pipeline.run_label_generation(cfg, clm)
print("frames labelled", stats["frames_covered"], stats["provenance"])

# stage 3: the two-stream locator starts from the image locator
two_stream, trace = pipeline.train_stage_two_stream(cfg, clm)
print("two-stream loss", round(trace[0], 2), "->", round(trace[-1], 2))

# stage 4: progressive inference on held-out clips
report = pipeline.evaluate(cfg, two_stream, fsm)
print((work / "run" / "report.txt").read_text())
print("outputs:", sorted(p.name for p in (work / "run").iterdir()))
