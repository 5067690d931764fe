"""Command line entry point: one verb per pipeline stage.

Every verb reads the same flat config file, applies ``--seed``/``--out``
overrides and writes ``manifest_<verb>.json`` into the output directory.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline

VERBS = ("synth", "train-images", "gen-labels", "train-video", "eval", "infer")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="provsod", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        p = sub.add_parser(verb)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (default from config)")
        p.add_argument("--stage-input", help="directory holding the previous stage's outputs (default: --out)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key; repeatable")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _overrides(args) -> dict:
    out = {"seed": args.seed, "out": args.out}
    for item in args.set:
        key, sep, val = item.partition("=")
        if not sep:
            raise SystemExit(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = val.strip()
    return out


def run(args) -> int:
    cfg = pipeline.load_config(args.config, **_overrides(args))
    stage_input = args.stage_input
    if args.verb == "synth":
        root = pipeline.synthesize(cfg)
        print(f"corpus written to {root}")
    elif args.verb == "train-images":
        _, _, traces = pipeline.train_stage_images(cfg)
        print(f"CLM loss {traces['clm'][0]:.3f} -> {traces['clm'][-1]:.3f}; "
              f"FSM loss {traces['fsm'][0]:.3f} -> {traces['fsm'][-1]:.3f}")
    elif args.verb == "gen-labels":
        _, stats = pipeline.run_label_generation(cfg, stage_input=stage_input)
        print(f"{stats['frames_covered']} frames labelled, mean IoU {stats['mean_iou']:.3f}, "
              f"provenance {stats['provenance']}")
    elif args.verb == "train-video":
        _, trace = pipeline.train_stage_two_stream(cfg, stage_input=stage_input)
        print(f"two-stream loss {trace[0]:.3f} -> {trace[-1]:.3f} over {len(trace)} steps")
    elif args.verb == "eval":
        pipeline.evaluate(cfg, stage_input=stage_input)
        print((Path(cfg.out) / "report.txt").read_text(), end="")
    elif args.verb == "infer":
        files = pipeline.infer(cfg, stage_input=stage_input)
        print(f"{len(files)} saliency maps written")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (FileNotFoundError, ValueError) as exc:
        print(f"provsod {args.verb}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
