import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from provsod import pipeline
from provsod.synthetic import SynthSpec, generate_synthetic_corpus

TOY_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "toy.cfg"

_verdicts = []


def record(criterion, ok, detail=""):
    """Log one acceptance verdict; all of them are repeated in the terminal summary."""
    line = f"{'PASS' if ok else 'FAIL'}  {criterion}" + (f"  ({detail})" if detail else "")
    _verdicts.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if _verdicts:
        terminalreporter.section("acceptance criteria")
        for line in _verdicts:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return generate_synthetic_corpus(SynthSpec(), root, seed=0)


@pytest.fixture(scope="session")
def toy_run(corpus, tmp_path_factory):
    """Every stage of the toy pipeline, run once per session with timings."""
    out = tmp_path_factory.mktemp("toy_run")
    cfg = pipeline.load_config(TOY_CONFIG, out=str(out), data_root=str(corpus))
    times = {}
    t0 = time.perf_counter()
    clm, fsm, image_traces = pipeline.train_stage_images(cfg)
    times["images"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    label_root, label_stats = pipeline.run_label_generation(cfg, clm)
    times["labels"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    two_stream, video_trace = pipeline.train_stage_two_stream(cfg, clm)
    times["video"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    report = pipeline.evaluate(cfg, two_stream, fsm)
    times["eval"] = time.perf_counter() - t0
    return SimpleNamespace(cfg=cfg, out=out, corpus=corpus, clm=clm, fsm=fsm, two_stream=two_stream,
                           image_traces=image_traces, video_trace=video_trace, label_root=label_root,
                           label_stats=label_stats, report=report, times=times)
