"""Command-line entry points: gen-data, train, track, eval, gradcheck,
ablate. Every subcommand reads one flat-JSON config and writes its artifacts
under --out."""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from .config import ConfigError, FullConfig


def _load_config(args) -> FullConfig:
    if args.config:
        cfg = FullConfig.load(args.config)
    else:
        cfg = FullConfig()
    if args.seed is not None:
        cfg.train.seed = args.seed
    return cfg


def cmd_gen_data(args) -> int:
    from .scenes import export_sequence, generate_sequence

    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = np.random.SeedSequence([cfg.train.seed, 0x5EED]).generate_state(cfg.n_sequences)
    for i, s in enumerate(base):
        seq = generate_sequence(cfg.scene, int(s))
        export_sequence(seq, out / f"seq_{i:03d}")
    print(f"wrote {cfg.n_sequences} sequences to {out}")
    return 0


def cmd_train(args) -> int:
    from .training import train

    cfg = _load_config(args)
    out = Path(args.out)
    result = train(cfg, out_dir=out, quiet=False)
    print(f"finished {result.steps} steps; checkpoint at {out / 'checkpoint.bin'}")
    if result.metrics:
        last = result.metrics[-1]
        print(f"final held-out mean_iou {last['mean_iou']:.4f} "
              f"success_auc {last['success_auc']:.4f}")
    return 0


def cmd_track(args) -> int:
    from .checkpoint import load_checkpoint
    from .net import TrackerModel
    from .runtime import track_sequence, write_results
    from .scenes import generate_sequence
    from .training import heldout_sequences

    cfg = _load_config(args)
    model = TrackerModel(cfg.net, seed=cfg.train.seed)
    if cfg.checkpoint_path:
        load_checkpoint(model, cfg.checkpoint_path)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results_path = out / "results.jsonl"
    if results_path.exists():
        results_path.unlink()
    for seq in heldout_sequences(cfg):
        boxes, scores = track_sequence(model, seq, cfg.runtime)
        write_results(results_path, seq.seq_id, boxes, scores, append=True)
    print(f"results at {results_path}")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .net import TrackerModel
    from .runtime import evaluate_model
    from .training import heldout_sequences

    cfg = _load_config(args)
    model = TrackerModel(cfg.net, seed=cfg.train.seed)
    if cfg.checkpoint_path:
        load_checkpoint(model, cfg.checkpoint_path)
    metrics = evaluate_model(model, heldout_sequences(cfg), cfg.runtime)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    print(json.dumps(metrics))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    report = run_all(seed=args.seed if args.seed is not None else 0)
    failed = [r for r in report if not r["passed"]]
    for r in report:
        status = "ok" if r["passed"] else "FAIL"
        print(f"{status:4s} {r['name']}: max rel err {r['max_rel_err']:.3e} "
              f"(threshold {r['threshold']:.0e})")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.json").write_text(json.dumps(report, indent=2) + "\n")
    return 1 if failed else 0


def cmd_ablate(args) -> int:
    from .experiments import run_ablation, run_misalignment_study

    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.study == "misalignment":
        report = run_misalignment_study(cfg, out_dir=out)
    else:
        report = run_ablation(cfg, args.study, out_dir=out)
    print(report.as_table())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cycletrack",
        description="Self-supervised cycle-trained Siamese tracker on synthetic video")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, need_out=True):
        p.add_argument("--config", type=str, default=None, help="flat JSON config")
        if need_out:
            p.add_argument("--out", type=str, required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override training seed")

    p = sub.add_parser("gen-data", help="generate synthetic sequences (PPM + boxes.txt)")
    common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="run two-stage training")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("track", help="track held-out sequences with a checkpoint")
    common(p)
    p.set_defaults(fn=cmd_track)

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out sequences")
    common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("ablate", help="run an ablation or the misalignment study")
    common(p)
    p.add_argument("--study", type=str, required=True,
                   choices=["detach", "residual", "lt_st", "threshold", "reloss",
                            "misalignment"])
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
