"""Online few-shot learners sharing one predict-then-update contract.

Every learner consumes a :class:`Batch` of equal-length sequences and walks
it step by step: it emits a prediction for step ``t`` from the inputs up to
``t`` and the labels strictly before ``t``, and only then consumes the
revealed label of step ``t``.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor, get_default_dtype, parameter
from .context import LSTM, ControlHead, Encoder, ScalarControl, contextualize, uniform_init
from .memory import MemoryOverflow, PrototypeMemory, SlotMap, novelty
from .sequences import UNLABELED

LEARNERS = ("cpm", "opn", "omn", "oimp", "lstm")
ABLATIONS = {
    "no_hrnn": ("context_vector", False),
    "no_control": ("rnn_control", False),
    "no_metric": ("metric", False),
    "gau": ("gau", True),
    "cosine": ("distance", "cosine"),
    "no_write_thresholds": ("separate_write", False),
    "no_unlabeled_write": ("unlabeled_write", False),
    "hrnn_only": ("hrnn_only", True),
}


@dataclass(frozen=True)
class LearnerConfig:
    kind: str = "cpm"
    embed_dim: int = 32
    encoder_hidden: tuple = (64,)
    identity_encoder: bool = False
    lstm_hidden: int = 64
    lstm_layers: int = 2
    k_max: int = 58
    max_clusters: int = 160
    distance: str = "euclidean"
    gau: bool = False
    context_vector: bool = True
    rnn_control: bool = True
    metric: bool = True
    separate_write: bool = True
    unlabeled_write: bool = True
    hrnn_only: bool = False
    head_init_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in LEARNERS:
            raise ValueError(f"unknown learner {self.kind!r}; choose from {LEARNERS}")
        if self.distance not in ("euclidean", "cosine"):
            raise ValueError(f"unknown distance {self.distance!r}")
        object.__setattr__(self, "encoder_hidden", tuple(self.encoder_hidden))

    def with_ablations(self, names):
        updates = {}
        for n in names:
            if n not in ABLATIONS:
                raise ValueError(f"unknown ablation {n!r}; choose from {sorted(ABLATIONS)}")
            key, value = ABLATIONS[n]
            updates[key] = value
        return replace(self, **updates)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown learner keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Batch:
    """Equal-length sequences stacked along a leading batch axis."""

    x: np.ndarray
    y: np.ndarray
    y_tilde: np.ndarray
    u: np.ndarray
    provenance: list

    @classmethod
    def from_sequences(cls, seqs):
        lengths = {len(s) for s in seqs}
        if len(lengths) != 1:
            raise ValueError(f"batch needs equal-length sequences, got lengths {sorted(lengths)}")
        return cls(
            x=np.stack([s.x for s in seqs]).astype(get_default_dtype()),
            y=np.stack([s.y for s in seqs]),
            y_tilde=np.stack([s.y_tilde for s in seqs]),
            u=np.stack([s.u for s in seqs]).astype(bool),
            provenance=[f"seed={s.seed} index={s.index} config={s.config_hash}" for s in seqs],
        )

    @property
    def shape(self):
        return self.y.shape

    def truncate(self, t):
        return Batch(self.x[:, :t], self.y[:, :t], self.y_tilde[:, :t], self.u[:, :t],
                     self.provenance)


class Rollout:
    """Per-step predictions of one pass over a batch.

    ``logp``/``u`` keep the differentiable outputs; ``known``, ``pred``,
    ``target`` and ``probs`` are plain arrays for scoring.
    """

    def __init__(self, B, T, K):
        self.logp = []
        self.u = []
        self.known = np.zeros((B, T))
        self.pred = np.full((B, T), -1, dtype=np.int64)
        self.target = np.full((B, T), -1, dtype=np.int64)
        self.probs = np.zeros((B, T, K))

    def record(self, t, logp, probs, u, slot_labels, y_t):
        self.logp.append(logp)
        self.u.append(u)
        self.known[:, t] = 1.0 - u.data
        occ = slot_labels >= 0
        p = probs.data
        self.probs[:, t] = p
        arg = np.where(occ, p, -np.inf).argmax(axis=1)
        has = occ.any(axis=1)
        rows = np.arange(len(y_t))
        self.pred[:, t] = np.where(has, slot_labels[rows, arg], -1)
        match = occ & (slot_labels == y_t[:, None])
        self.target[:, t] = np.where(match.any(axis=1), match.argmax(axis=1), -1)


class Learner:
    kind = "base"

    def __init__(self, config: LearnerConfig, in_dim: int, rng=None):
        self.config = config
        self.in_dim = in_dim
        self.params = {}

    def _collect(self, *parts):
        for p in parts:
            self.params.update(p.params)

    def state_dict(self):
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state, strict=True):
        for k, p in self.params.items():
            if k not in state:
                if strict:
                    raise KeyError(f"checkpoint lacks parameter {k!r}")
                continue
            arr = np.asarray(state[k], dtype=get_default_dtype())
            if arr.shape != p.shape:
                raise ValueError(f"parameter {k!r}: checkpoint shape {arr.shape} "
                                 f"vs model {p.shape}")
            p.data = arr.copy()
        if strict:
            extra = set(state) - set(self.params)
            extra = {k for k in extra if not k.startswith("adam.")}
            if extra:
                raise KeyError(f"checkpoint has unknown parameters {sorted(extra)}")

    def rollout(self, batch: Batch, gate=None) -> Rollout:
        raise NotImplementedError


class PrototypeLearner(Learner):
    """Contextual prototypical memory; with every context part disabled it is
    exactly the online ProtoNet."""

    kind = "cpm"

    def __init__(self, config, in_dim, rng=None):
        super().__init__(config, in_dim, rng)
        rng = rng if rng is not None else np.random.default_rng(0)
        c = config
        self.encoder = Encoder(in_dim, c.embed_dim, c.encoder_hidden, c.identity_encoder, rng)
        dim = self.encoder.out_dim
        self.memory = PrototypeMemory(dim, c.k_max, c.distance, c.gau, rng)
        self.uses_rnn = c.context_vector or c.metric or c.rnn_control or c.hrnn_only
        self._collect(self.encoder, self.memory)
        if self.uses_rnn:
            self.lstm = LSTM(dim, c.lstm_hidden, rng)
            self.head = ControlHead(c.lstm_hidden, dim, rng,
                                    context_vector=c.context_vector or c.hrnn_only,
                                    metric=c.metric, thresholds=c.rnn_control,
                                    init_scale=c.head_init_scale)
            self._collect(self.lstm, self.head)
        else:
            self.scalars = ScalarControl()
            self._collect(self.scalars)
        self.trace = None

    def rollout(self, batch, gate=None, trace=False):
        B, T = batch.shape
        c = self.config
        H = self.encoder(batch.x)
        self.memory.reset(B)
        out = Rollout(B, T, c.k_max)
        state = self.lstm.initial_state(B) if self.uses_rnn else None
        write_unlabeled = c.unlabeled_write
        self.trace = [] if trace else None
        for t in range(T):
            h_cnn = ops.index(H, (slice(None), t))
            if self.uses_rnn:
                o, state = self.lstm.step(h_cnn, state)
                h_rnn, ctrl = self.head(o)
                h = h_rnn if c.hrnn_only else contextualize(h_cnn, h_rnn)
            else:
                ctrl = self.scalars()
                h = h_cnn
            logp, probs, u, d_min, _ = self.memory.read(h, ctrl)
            out.record(t, logp, probs, u, self.memory.slot_labels, batch.y[:, t])
            if self.trace is not None:
                entry = {k: np.broadcast_to(getattr(ctrl, k).data, (B,)).copy()
                         for k in ("beta_r", "gamma_r", "beta_w", "gamma_w")}
                entry["h"] = h.data.copy()
                self.trace.append(entry)
            g = np.ones(B, dtype=bool) if gate is None else gate[:, t]
            if not write_unlabeled:
                g = np.zeros(B, dtype=bool)
            self.memory.write(h, batch.y_tilde[:, t], probs, d_min, ctrl, g,
                              batch.provenance, separate_write=c.separate_write)
        return out


class CPM(PrototypeLearner):
    kind = "cpm"


class OnlineProtoNet(PrototypeLearner):
    """Prototype memory on raw embeddings with scalar learned thresholds."""

    kind = "opn"

    def __init__(self, config, in_dim, rng=None):
        config = replace(config, kind="opn", context_vector=False, rnn_control=False,
                         metric=False, hrnn_only=False)
        super().__init__(config, in_dim, rng)


class OnlineMatchingNet(Learner):
    """Stores every labeled embedding; class score from the nearest exemplar."""

    kind = "omn"

    def __init__(self, config, in_dim, rng=None):
        super().__init__(config, in_dim, rng)
        rng = rng if rng is not None else np.random.default_rng(0)
        c = config
        self.encoder = Encoder(in_dim, c.embed_dim, c.encoder_hidden, c.identity_encoder, rng)
        self.scalars = ScalarControl()
        self._collect(self.encoder, self.scalars)
        self.store_sizes = None

    def rollout(self, batch, gate=None):
        B, T = batch.shape
        K = self.config.k_max
        H = self.encoder(batch.x)
        slots = SlotMap(B, K)
        stored = np.zeros((B, T), dtype=bool)
        ex_slot = np.full((B, T), -1, dtype=np.int64)
        out = Rollout(B, T, K)
        self.store_sizes = np.zeros((B, T), dtype=np.int64)
        for t in range(T):
            h = ops.index(H, (slice(None), t))
            ctrl = self.scalars()
            d = ops.slot_sqdist(h, H)
            occ = slots.occupied
            class_d = ops.segment_min(d, ex_slot, K, stored)
            logits = ops.neg(class_d)
            logp = ops.log_softmax(logits, occ)
            probs = ops.softmax(logits, occ)
            u = novelty(ops.masked_min(d, stored), ctrl.beta_r, ctrl.gamma_r)
            nonempty = stored.any(axis=1)
            if not nonempty.all():
                u = ops.where(nonempty, u, 1.0)
            out.record(t, logp, probs, u, slots.labels, batch.y[:, t])
            s, _ = slots.assign(batch.y_tilde[:, t], batch.provenance)
            lab = s >= 0
            stored[lab, t] = True
            ex_slot[lab, t] = s[lab]
            self.store_sizes[:, t] = stored.sum(axis=1)
        return out


class OnlineIMP(Learner):
    """Online infinite mixture prototypes: a class may own several clusters."""

    kind = "oimp"

    def __init__(self, config, in_dim, rng=None):
        super().__init__(config, in_dim, rng)
        rng = rng if rng is not None else np.random.default_rng(0)
        c = config
        self.encoder = Encoder(in_dim, c.embed_dim, c.encoder_hidden, c.identity_encoder, rng)
        self.scalars = ScalarControl()
        self._collect(self.encoder, self.scalars)
        self.clusters = None

    def rollout(self, batch, gate=None):
        B, T = batch.shape
        K, C = self.config.k_max, self.config.max_clusters
        dt = get_default_dtype()
        H = self.encoder(batch.x)
        E = H.shape[-1]
        slots = SlotMap(B, K)
        P = Tensor(np.zeros((B, C, E), dtype=dt))
        cl_label = np.full((B, C), -1, dtype=np.int64)
        cl_count = np.zeros((B, C))
        cl_used = np.zeros(B, dtype=np.int64)
        out = Rollout(B, T, K)
        for t in range(T):
            h = ops.index(H, (slice(None), t))
            ctrl = self.scalars()
            occ_cl = np.arange(C)[None, :] < cl_used[:, None]
            labeled_cl = occ_cl & (cl_label >= 0)
            d = ops.slot_sqdist(h, P)
            class_d = ops.segment_min(d, cl_label, K, labeled_cl)
            logits = ops.neg(class_d)
            occ = slots.occupied
            logp = ops.log_softmax(logits, occ)
            probs = ops.softmax(logits, occ)
            u = novelty(ops.masked_min(d, labeled_cl), ctrl.beta_r, ctrl.gamma_r)
            nonempty = labeled_cl.any(axis=1)
            if not nonempty.all():
                u = ops.where(nonempty, u, 1.0)
            out.record(t, logp, probs, u, slots.labels, batch.y[:, t])

            s, _ = slots.assign(batch.y_tilde[:, t], batch.provenance)
            beta = float(np.asarray(ctrl.beta_r.data))
            dd = d.data
            w = np.zeros((B, C), dtype=dt)
            for b in range(B):
                if s[b] >= 0:
                    cand = occ_cl[b] & ((cl_label[b] == s[b]) | (cl_label[b] == -1))
                    label = s[b]
                elif gate is None or gate[b, t]:
                    cand = occ_cl[b]
                    label = -1
                else:
                    continue
                j = -1
                if cand.any():
                    j_near = int(np.argmin(np.where(cand, dd[b], np.inf)))
                    if dd[b, j_near] < beta:
                        j = j_near
                if j < 0:
                    j = int(cl_used[b])
                    if j >= C:
                        raise MemoryOverflow(f"more than {C} clusters ({batch.provenance[b]})")
                    cl_used[b] += 1
                if label >= 0:
                    cl_label[b, j] = label
                w[b, j] = 1.0 / (cl_count[b, j] + 1.0)
                cl_count[b, j] += 1.0
            P = ops.proto_update(P, h, w)
        self.clusters = (cl_label, cl_count, cl_used)
        return out


class LSTMBaseline(Learner):
    """Stacked LSTM fed the embedding plus the previous step's label one-hot.

    The last output logit is the unknown-class logit.
    """

    kind = "lstm"

    def __init__(self, config, in_dim, rng=None):
        super().__init__(config, in_dim, rng)
        rng = rng if rng is not None else np.random.default_rng(0)
        c = config
        self.encoder = Encoder(in_dim, c.embed_dim, c.encoder_hidden, c.identity_encoder, rng)
        dim = self.encoder.out_dim
        self.layers = []
        width = dim + c.k_max
        for i in range(c.lstm_layers):
            layer = LSTM(width, c.lstm_hidden, rng, prefix=f"lstm{i}")
            self.layers.append(layer)
            width = c.lstm_hidden
        self.w_out = parameter(uniform_init(rng, width, (width, c.k_max + 1)), "out.w")
        self.b_out = parameter(np.zeros(c.k_max + 1), "out.b")
        self._collect(self.encoder, *self.layers)
        self.params.update({"out.w": self.w_out, "out.b": self.b_out})

    def rollout(self, batch, gate=None):
        B, T = batch.shape
        K = self.config.k_max
        dt = get_default_dtype()
        H = self.encoder(batch.x)
        slots = SlotMap(B, K)
        states = [layer.initial_state(B) for layer in self.layers]
        prev = np.zeros((B, K), dtype=dt)
        out = Rollout(B, T, K)
        for t in range(T):
            h = ops.concat([ops.index(H, (slice(None), t)), Tensor(prev)], axis=-1)
            for i, layer in enumerate(self.layers):
                h, states[i] = layer.step(h, states[i])
            z = ops.add(ops.matmul(h, self.w_out), self.b_out)
            occ = slots.occupied
            cls = ops.index(z, (slice(None), slice(0, K)))
            logp = ops.log_softmax(cls, occ)
            probs = ops.softmax(cls, occ)
            u = ops.sigmoid(ops.index(z, (slice(None), K)))
            out.record(t, logp, probs, u, slots.labels, batch.y[:, t])
            s, _ = slots.assign(batch.y_tilde[:, t], batch.provenance)
            prev = np.zeros((B, K), dtype=dt)
            lab = s >= 0
            prev[np.flatnonzero(lab), s[lab]] = 1.0
        return out


class OracleLearner(Learner):
    """Reads the ground truth; a scoring reference, not an online learner."""

    kind = "oracle"

    def __init__(self, config=None, in_dim=0, rng=None):
        self.config = config or LearnerConfig()
        self.in_dim = in_dim
        self.params = {}

    def rollout(self, batch, gate=None):
        B, T = batch.shape
        out = Rollout(B, T, 1)
        out.known = (~batch.u).astype(float)
        out.pred = np.where(batch.u, -1, batch.y)
        return out


class ConstantNoveltyLearner(OracleLearner):
    """Answers "new" for everything."""

    kind = "constant"

    def rollout(self, batch, gate=None):
        B, T = batch.shape
        return Rollout(B, T, 1)


_KINDS = {"cpm": CPM, "opn": OnlineProtoNet, "omn": OnlineMatchingNet, "oimp": OnlineIMP,
          "lstm": LSTMBaseline}


def build_learner(config: LearnerConfig, in_dim: int, seed: int = 0) -> Learner:
    rng = np.random.default_rng(seed)
    return _KINDS[config.kind](config, in_dim, rng)


def step_predictions(rollout: Rollout, t: int):
    """(known-ness, predicted class, class probabilities) emitted at step ``t``."""
    return rollout.known[:, t], rollout.pred[:, t], rollout.probs[:, t]


__all__ = [
    "ABLATIONS", "Batch", "CPM", "ConstantNoveltyLearner", "LEARNERS", "LSTMBaseline",
    "Learner", "LearnerConfig", "MemoryOverflow", "OnlineIMP", "OnlineMatchingNet",
    "OnlineProtoNet", "OracleLearner", "Rollout", "UNLABELED", "build_learner",
    "step_predictions",
]
