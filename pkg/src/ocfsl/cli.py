"""``ocfsl`` command line: generate, train, eval, report, context-ablation.

Exit codes: 0 success, 2 configuration error, 3 runtime error, 4 invariant
violation (malformed data, memory overflow, shape mismatch).
"""
from __future__ import annotations

import argparse
import glob
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .autodiff import CheckpointError, ShapeError
from .config import ConfigError, load_config
from .evaluation import EvaluationError, read_report
from .learners import ABLATIONS, LEARNERS, MemoryOverflow
from .sequences import SCHEMA_VERSION, SequenceError, read_sequences
from .training import TrainingError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_INVARIANT = 0, 2, 3, 4


def _common(p):
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dot-path override, e.g. train.steps=50 (repeatable)")
    p.add_argument("--learner", choices=LEARNERS)
    p.add_argument("--ablate", default="",
                   help=f"comma-separated ablations from {sorted(ABLATIONS)}")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--supervised", dest="semi", action="store_false", default=None)
    mode.add_argument("--semi", dest="semi", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="ocfsl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    g = sub.add_parser("generate", help="write sequences + stats sidecar")
    _common(g)
    g.add_argument("--n", type=int, help="number of sequences (default eval.n_sequences)")
    g.add_argument("--split", default="eval", choices=("train", "val", "eval"))
    t = sub.add_parser("train", help="train a learner")
    _common(t)
    t.add_argument("--resume", action="store_true")
    e = sub.add_parser("eval", help="score a checkpoint or reference learner")
    _common(e)
    e.add_argument("--checkpoint", help="checkpoint file (default <out>/best.ckpt)")
    e.add_argument("--reference", choices=("oracle", "constant"),
                   help="score a reference learner instead of a checkpoint")
    e.add_argument("--sequences", help="sequence JSONL (default: generated from config)")
    r = sub.add_parser("report", help="summarize report.csv files across runs")
    r.add_argument("runs", nargs="+", help="run directories or report.csv paths")
    r.add_argument("--out", help="write the summary CSV here")
    a = sub.add_parser("context-ablation", help="2x2 cue/order study for CPM and O-PN")
    _common(a)
    return parser


def resolve_config(args):
    overrides = list(args.set)
    cfg = load_config(args.config, overrides)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out:
        changes["out"] = args.out
    if args.ablate:
        names = tuple(s.strip() for s in args.ablate.split(",") if s.strip())
        for n in names:
            if n not in ABLATIONS:
                raise ConfigError(f"unknown ablation {n!r}; choose from {sorted(ABLATIONS)}")
        changes["ablate"] = names
    if args.learner:
        changes["learner"] = replace(cfg.learner, kind=args.learner)
    if args.semi is not None:
        changes["sampler"] = replace(cfg.sampler, semi_supervised=args.semi)
    return replace(cfg, **changes) if changes else cfg


def cmd_generate(args, out=print):
    from .experiment import generate_files

    cfg = resolve_config(args)
    n = args.n or cfg.eval.n_sequences
    _, stats = generate_files(cfg, cfg.out, n, args.split, args.workers)
    out(f"wrote {n} sequences to {cfg.out}; mean run length "
        f"{stats['mean_run_length']:.3f} +- {stats['mean_run_length_se']:.3f}")
    return EXIT_OK


def cmd_train(args, out=print):
    from .experiment import train_experiment

    cfg = resolve_config(args)
    _, result = train_experiment(cfg, cfg.out, resume=args.resume)
    out(f"trained {cfg.resolved_learner().kind} for {result.final_step} steps; "
        f"best val AP {result.best_ap:.4f} at step {result.best_step}")
    return EXIT_OK


def cmd_eval(args, out=print):
    from .experiment import (eval_sequences, evaluate_learner, load_learner, reference_learner,
                             write_json, write_report)

    cfg = resolve_config(args)
    if args.reference:
        learner, kind = reference_learner(args.reference), args.reference
    else:
        path = args.checkpoint or os.path.join(cfg.out, "best.ckpt")
        if not os.path.exists(path):
            raise ConfigError(f"checkpoint {path} not found")
        learner, meta = load_learner(path, expect_kind=args.learner)
        kind = learner.config.kind
    if args.sequences:
        seqs = read_sequences(args.sequences)
    else:
        seqs = eval_sequences(cfg, workers=args.workers)
    meta = {"schema_version": SCHEMA_VERSION, "config_hash": cfg.config_hash(),
            "seed": cfg.seed, "learner": kind}
    report = evaluate_learner(learner, seqs, cfg.eval.batch_size, args.workers, meta)
    write_report(report, cfg.out)
    write_json(os.path.join(cfg.out, "eval_config.json"), {**meta, "config": cfg.to_dict()})
    out(f"{kind}: AP {report.ap:.4f} over {report.n_sequences} sequences "
        f"({report.n_records} records)")
    return EXIT_OK


def cmd_report(args, out=print):
    paths = []
    for r in args.runs:
        paths.extend(sorted(glob.glob(os.path.join(r, "report.csv"))) if os.path.isdir(r)
                     else [r])
    if not paths:
        raise ConfigError("no report.csv files found")
    rows = []
    for p in paths:
        meta, values = read_report(p)
        if meta.get("schema_version") != str(SCHEMA_VERSION):
            raise ConfigError(f"{p}: schema version {meta.get('schema_version')} "
                              f"!= {SCHEMA_VERSION}")
        rows.append((meta.get("learner", "?"), values))
    groups = {}
    for learner, values in rows:
        groups.setdefault(learner, []).append(values)
    lines = ["learner,runs,ap_mean,ap_se,acc_1shot_mean,acc_3shot_mean"]
    for learner in sorted(groups):
        vals = groups[learner]
        ap = np.array([v[("ap", "")][0] for v in vals])
        se = ap.std(ddof=1) / np.sqrt(len(ap)) if len(ap) > 1 else 0.0

        def shot(n):
            xs = [v.get(("n_shot", str(n)), (None,))[0] for v in vals]
            xs = [x for x in xs if x is not None]
            return f"{np.mean(xs):.6f}" if xs else ""
        lines.append(f"{learner},{len(ap)},{ap.mean():.6f},{se:.6f},{shot(1)},{shot(3)}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    out(text.rstrip("\n"))
    return EXIT_OK


def cmd_context_ablation(args, out=print):
    from .experiment import context_ablation, write_ablation

    cfg = resolve_config(args)
    os.makedirs(cfg.out, exist_ok=True)

    def progress(learner, cond, seed, ap):
        out(f"{learner:5s} {cond:13s} seed {seed}: AP {ap:.4f}")

    cells = context_ablation(cfg, args.workers, progress)
    path = os.path.join(cfg.out, "ablation.csv")
    write_ablation(cells, path, cfg)
    for c in cells:
        out(f"{c.learner:5s} {c.condition:13s} {c.mean:.4f} +- {c.se:.4f}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "report": cmd_report, "context-ablation": cmd_context_ablation}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SequenceError, MemoryOverflow, ShapeError, CheckpointError) as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (TrainingError, EvaluationError, OSError, FloatingPointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
