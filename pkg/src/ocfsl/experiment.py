"""End-to-end runners shared by the command line and the acceptance suite."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import checkpoint
from .config import ConfigError, ExperimentConfig
from .evaluation import MetricsReport, RecordTable, rollout_table
from .learners import ConstantNoveltyLearner, Learner, LearnerConfig, OracleLearner, build_learner
from .sequences import SCHEMA_VERSION, generate_sequences, sequence_stats
from .training import TrainResult, train


def _stamp(config: ExperimentConfig):
    return {"schema_version": SCHEMA_VERSION, "config_hash": config.config_hash(),
            "seed": config.seed}


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def eval_sequences(config: ExperimentConfig, n=None, workers=1):
    return generate_sequences(config.sampler, config.stream("eval"),
                              n or config.eval.n_sequences, workers=workers)


def make_learner(config: ExperimentConfig) -> Learner:
    lc = config.resolved_learner()
    return build_learner(lc, config.sampler.feature_dim, config.stream("init"))


def train_experiment(config: ExperimentConfig, out_dir=None, resume=False):
    """Train the configured learner; returns ``(learner loaded with best state, result)``."""
    learner = make_learner(config)
    tc = replace(config.train, seed=config.stream("train"))
    sampler = replace(config.sampler)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_json(os.path.join(out_dir, "config.json"), {**_stamp(config), **config.to_dict()})
    result: TrainResult = train(tc, learner, sampler, out_dir=out_dir, resume=resume)
    learner.load_state_dict(result.best_state)
    return learner, result


def _rollout_chunk(args):
    learner, seqs, ids, batch_size = args
    return rollout_table(learner, seqs, batch_size, ids)


def evaluate_learner(learner, sequences, batch_size=16, workers=1, meta=None) -> MetricsReport:
    """Score ``learner``; chunks run in worker processes and are reduced in order."""
    ids = list(range(len(sequences)))
    if workers and workers > 1 and len(sequences) > 1:
        from concurrent.futures import ProcessPoolExecutor
        n = min(workers, len(sequences))
        bounds = np.linspace(0, len(sequences), n + 1).astype(int)
        jobs = [(learner, sequences[a:b], ids[a:b], batch_size)
                for a, b in zip(bounds[:-1], bounds[1:])]
        with ProcessPoolExecutor(n) as pool:
            tables = list(pool.map(_rollout_chunk, jobs))
        tb = RecordTable.concat(tables)
    else:
        tb = rollout_table(learner, sequences, batch_size, ids)
    return MetricsReport.from_table(tb, meta)


def load_learner(path, expect_kind=None) -> tuple[Learner, dict]:
    tensors, meta = checkpoint.load(path)
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"{path}: schema version {meta.get('schema_version')} "
                          f"!= {SCHEMA_VERSION}")
    lc = LearnerConfig.from_dict(meta["learner"])
    if expect_kind and expect_kind != lc.kind:
        raise ConfigError(f"{path} holds a {lc.kind!r} learner, not {expect_kind!r}")
    in_dim = meta.get("in_dim")
    if in_dim is None:
        from .sequences import SamplerConfig
        in_dim = SamplerConfig.from_dict(meta["sampler"]).feature_dim
    learner = build_learner(lc, in_dim, 0)
    try:
        learner.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("adam.")})
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: checkpoint does not match learner ({exc})") from exc
    return learner, meta


def reference_learner(kind):
    if kind == "oracle":
        return OracleLearner()
    if kind == "constant":
        return ConstantNoveltyLearner()
    raise ConfigError(f"unknown reference learner {kind!r}")


def write_report(report: MetricsReport, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    report.write_csv(os.path.join(out_dir, "report.csv"))
    report.write_records(os.path.join(out_dir, "records.jsonl"))
    report.write_svg(os.path.join(out_dir, "curve.svg"))


def generate_files(config: ExperimentConfig, out_dir, n, split="eval", workers=1):
    from .sequences import write_sequences

    seqs = generate_sequences(config.sampler, config.stream(split), n, workers=workers)
    os.makedirs(out_dir, exist_ok=True)
    write_sequences(os.path.join(out_dir, "sequences.jsonl"), seqs)
    stats = sequence_stats(seqs)
    write_json(os.path.join(out_dir, "stats.json"), {**_stamp(config), "split": split, **stats})
    return seqs, stats


# ----------------------------------------------------------------------------
# context ablation


CONDITIONS = (("ordered", False, False), ("shuffled", True, False),
              ("ordered+cue", False, True), ("shuffled+cue", True, True))


@dataclass
class Cell:
    learner: str
    condition: str
    aps: list

    @property
    def mean(self):
        return float(np.mean(self.aps))

    @property
    def se(self):
        if len(self.aps) < 2:
            return 0.0
        return float(np.std(self.aps, ddof=1) / np.sqrt(len(self.aps)))


def condition_config(config: ExperimentConfig, learner, shuffle, cue, seed):
    sampler = replace(config.sampler, shuffle=shuffle, spatial_cue=cue)
    lc = replace(config.learner, kind=learner)
    return replace(config, sampler=sampler, learner=lc, seed=seed)


def run_cell(config: ExperimentConfig, learner, shuffle, cue, seed, workers=1):
    cfg = condition_config(config, learner, shuffle, cue, seed)
    model, _ = train_experiment(cfg)
    report = evaluate_learner(model, eval_sequences(cfg, workers=workers),
                              cfg.eval.batch_size, workers)
    return report


def context_ablation(config: ExperimentConfig, workers=1, progress=None, cache=None):
    """Train and score each learner under cue off/on and ordered/shuffled order."""
    cells = []
    for learner in config.ablation.learners:
        for name, shuffle, cue in CONDITIONS:
            aps = []
            for seed in config.ablation.seeds:
                key = (learner, shuffle, cue, seed)
                if cache is not None and key in cache:
                    ap = cache[key]
                else:
                    ap = run_cell(config, learner, shuffle, cue, seed, workers).ap
                    if cache is not None:
                        cache[key] = ap
                aps.append(ap)
                if progress:
                    progress(learner, name, seed, ap)
            cells.append(Cell(learner, name, aps))
    return cells


def write_ablation(cells, path, config: ExperimentConfig):
    with open(path, "w") as fh:
        for k, v in sorted(_stamp(config).items()):
            fh.write(f"# {k}={v}\n")
        fh.write("learner,condition,mean_ap,se,n,aps\n")
        for c in cells:
            aps = " ".join(f"{a:.10g}" for a in c.aps)
            fh.write(f"{c.learner},{c.condition},{c.mean:.10g},{c.se:.10g},{len(c.aps)},{aps}\n")


__all__ = ["CONDITIONS", "Cell", "condition_config", "context_ablation", "eval_sequences",
           "evaluate_learner", "generate_files", "load_learner", "make_learner",
           "reference_learner", "run_cell", "train_experiment", "write_ablation",
           "write_json", "write_report"]
