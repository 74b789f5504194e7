"""Sequence loss and the truncation-free BPTT training loop."""
from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from .autodiff import Adam, Tape, backward, checkpoint, clip_global_norm, ops
from .autodiff.tensor import get_default_dtype
from .evaluation import average_precision, rollout_table
from .learners import Batch, Learner
from .sequences import SCHEMA_VERSION, UNLABELED, SamplerConfig, derive_seed, generate_sequence, generate_sequences

EPS = 1e-7
LOG_COLUMNS = ("step", "loss", "bce", "ce", "val_ap", "lr", "ramp_p", "grad_norm",
               "beta_r", "gamma_r", "beta_w", "gamma_w")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    bce_weight: float = 1.0
    lr: float = 2e-3
    milestones: tuple = (3000, 4500)
    lr_decay: float = 0.1
    batch_size: int = 8
    steps: int = 6000
    clip: float = 5.0
    ramp_start: float = 0.0
    ramp_increment: float = 0.2
    ramp_interval: int = 2000
    ramp_cap: float = 1.0
    unmasked_loss: bool = False
    val_every: int = 500
    val_sequences: int = 64
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if self.bce_weight < 0:
            raise ValueError("bce_weight must be >= 0")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        if self.clip <= 0:
            raise ValueError("clip must be positive")
        if self.ramp_interval < 1:
            raise ValueError("ramp_interval must be >= 1")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


def ramp_probability(step, start=0.0, increment=0.2, interval=2000, cap=1.0) -> float:
    """Probability that an unlabeled step's write is applied during training."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return float(min(cap, start + increment * (step // interval)))


def learning_rate(step, config: TrainConfig) -> float:
    k = sum(step >= m for m in config.milestones)
    return config.lr * config.lr_decay ** k


@dataclass
class LossBreakdown:
    total: object  # scalar Tensor
    bce: float
    ce: float
    mask: np.ndarray

    @property
    def value(self):
        return float(self.total.data)


def sequence_loss(rollout, batch: Batch, bce_weight=1.0, masked=True) -> LossBreakdown:
    """Per-sequence ``(lambda * sum_t bce_t + sum_t ce_t) / T``, averaged over the batch.

    With ``masked`` both terms only count labeled steps; the class term is
    active only on truly known steps.
    """
    B, T = batch.shape
    dt = get_default_dtype()
    mask = (batch.y_tilde != UNLABELED) if masked else np.ones((B, T), dtype=bool)
    u = batch.u.astype(dt)
    u_hat = ops.clamp(ops.stack(rollout.u, axis=1), EPS, 1.0 - EPS)
    bce = ops.neg(ops.add(ops.mul(ops.log(u_hat), u),
                          ops.mul(ops.log(ops.affine(u_hat, -1.0, 1.0)), 1.0 - u)))
    bce_sum = ops.sum(ops.mul(bce, mask.astype(dt)), axis=1)
    active = mask & (~batch.u) & (rollout.target >= 0)
    if active.any():
        logp = ops.stack(rollout.logp, axis=1)
        bi, ti = np.nonzero(active)
        picked = ops.index(logp, (bi, ti, rollout.target[bi, ti]))
        ce_total = ops.neg(ops.sum(picked))
    else:
        ce_total = ops.scalar(0.0)
    bce_total = ops.sum(bce_sum)
    total = ops.div(ops.add(ops.mul(bce_total, float(bce_weight)), ce_total), float(B * T))
    return LossBreakdown(total, float(bce_total.data) / (B * T), float(ce_total.data) / (B * T),
                         mask)


# ----------------------------------------------------------------------------


@dataclass
class TrainResult:
    best_ap: float
    best_step: int
    final_step: int
    log: list
    best_state: dict


def _fmt(x):
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.10g}"


def validation_set(sampler: SamplerConfig, seed: int, n: int):
    return generate_sequences(sampler, derive_seed(seed, "val"), n)


def validation_ap(learner, sequences):
    return average_precision(rollout_table(learner, sequences))


def _meta(learner, sampler, config, step, best_ap, best_step):
    return {
        "schema_version": SCHEMA_VERSION, "step": step, "best_ap": best_ap,
        "best_step": best_step, "learner": asdict(learner.config),
        "sampler": asdict(sampler), "train": asdict(config),
        "sampler_hash": sampler.config_hash(), "in_dim": learner.in_dim,
    }


def train(config: TrainConfig, learner: Learner, sampler: SamplerConfig, out_dir=None,
          val_sampler: SamplerConfig | None = None, resume=False, on_log=None) -> TrainResult:
    """Train ``learner`` on fresh sequences, keeping the best-validation state.

    Writes ``train_log.csv``, ``last.ckpt`` and ``best.ckpt`` into
    ``out_dir`` when given; with ``resume`` the run continues from
    ``last.ckpt`` and appends to the log.
    """
    val_sampler = val_sampler or sampler
    opt = Adam(learner.params, lr=config.lr)
    val_seqs = validation_set(val_sampler, config.seed, config.val_sequences)
    start, best_ap, best_step = 0, -np.inf, -1
    best_state = learner.state_dict()
    log_path = os.path.join(out_dir, "train_log.csv") if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    if resume:
        if not out_dir or not os.path.exists(os.path.join(out_dir, "last.ckpt")):
            raise TrainingError("nothing to resume: last.ckpt not found")
        tensors, meta = checkpoint.load(os.path.join(out_dir, "last.ckpt"))
        if meta.get("schema_version") != SCHEMA_VERSION:
            raise TrainingError(f"checkpoint schema {meta.get('schema_version')} "
                                f"!= {SCHEMA_VERSION}")
        learner.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("adam.")})
        opt.load_state_dict({k: v for k, v in tensors.items() if k.startswith("adam.")})
        start, best_ap, best_step = meta["step"], meta["best_ap"], meta["best_step"]
        best_tensors, _ = checkpoint.load(os.path.join(out_dir, "best.ckpt"))
        best_state = dict(best_tensors)
    log = []
    if log_path and not resume:
        with open(log_path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(LOG_COLUMNS)

    def emit(row):
        log.append(row)
        if log_path:
            with open(log_path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow([_fmt(row[c]) for c in LOG_COLUMNS])
        if on_log:
            on_log(row)

    def validate(step):
        nonlocal best_ap, best_step, best_state
        ap = validation_ap(learner, val_seqs)
        if ap > best_ap:
            best_ap, best_step = ap, step
            best_state = learner.state_dict()
            if out_dir:
                checkpoint.save(os.path.join(out_dir, "best.ckpt"), best_state,
                                _meta(learner, sampler, config, step, best_ap, best_step))
        return ap

    if start == 0 and config.val_every > 0:
        ap = validate(0)
        emit({c: None for c in LOG_COLUMNS} | {"step": 0, "val_ap": ap, "lr": config.lr})

    B = config.batch_size
    train_seed = derive_seed(config.seed, "train")
    want_trace = hasattr(learner, "trace")
    for step in range(start, config.steps):
        seqs = [generate_sequence(sampler, train_seed, step * B + i) for i in range(B)]
        batch = Batch.from_sequences(seqs)
        p = ramp_probability(step, config.ramp_start, config.ramp_increment,
                             config.ramp_interval, config.ramp_cap)
        ramp_rng = np.random.default_rng(derive_seed(config.seed, "ramp", step))
        gate = ramp_rng.random(batch.shape) < p
        with Tape(learner.params) as tape:
            if want_trace:
                rollout = learner.rollout(batch, gate=gate, trace=True)
            else:
                rollout = learner.rollout(batch, gate=gate)
            loss = sequence_loss(rollout, batch, config.bce_weight,
                                 masked=not config.unmasked_loss)
        if not np.isfinite(loss.value):
            raise TrainingError(f"non-finite loss at step {step} on sequences "
                                f"{batch.provenance}")
        grads = backward(tape, loss.total)
        grads, norm = clip_global_norm(grads, config.clip)
        lr = learning_rate(step, config)
        opt.step(grads, lr=lr)
        done = step + 1
        row = {"step": done, "loss": loss.value, "bce": loss.bce, "ce": loss.ce,
               "val_ap": None, "lr": lr, "ramp_p": p, "grad_norm": norm}
        trace = getattr(learner, "trace", None)
        for k in ("beta_r", "gamma_r", "beta_w", "gamma_w"):
            row[k] = float(np.mean([s[k] for s in trace])) if trace else None
        if config.val_every > 0 and (done % config.val_every == 0 or done == config.steps):
            row["val_ap"] = validate(done)
        emit(row)
        if out_dir and (row["val_ap"] is not None or done == config.steps):
            state = learner.state_dict() | opt.state_dict()
            checkpoint.save(os.path.join(out_dir, "last.ckpt"), state,
                            _meta(learner, sampler, config, done, best_ap, best_step))
    if config.val_every <= 0:
        best_state = learner.state_dict()
        best_step = config.steps
    return TrainResult(best_ap, best_step, config.steps, log, best_state)


__all__ = ["EPS", "LOG_COLUMNS", "LossBreakdown", "TrainConfig", "TrainResult",
           "TrainingError", "learning_rate", "ramp_probability", "sequence_loss", "train",
           "validation_ap", "validation_set"]
