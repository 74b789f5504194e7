"""Episode streams for online contextualized few-shot learning.

A sequence is drawn in three stages: a Markov environment schedule, a
per-environment two-parameter Chinese restaurant process over classes, and a
semi-supervised label mask. Toy features are then attached; they are built
so that some classes are indistinguishable without knowing which
environment is active.
"""
from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

UNLABELED = -1
NEW = -1
SCHEMA_VERSION = 1


class SequenceError(ValueError):
    """Invalid sequence data (bad record, broken invariant)."""


@dataclass(frozen=True)
class SamplerConfig:
    seq_len: int = 150
    n_envs: int = 5
    p_switch: float = 0.2
    crp_alpha: float = 0.2
    crp_theta: float = 1.0
    max_appearances: int = 6
    max_classes: int = 50
    max_retries: int = 20
    label_ratio: float = 0.3
    semi_supervised: bool = False
    # toy features
    class_dim: int = 16
    cue_dim: int = 8
    spatial_cue: bool = False
    ambiguity: float = 0.5
    env_style: float = 0.6
    noise: float = 0.15
    cue_noise: float = 0.3
    feature_scale: float = 3.0
    shuffle: bool = False

    def __post_init__(self):
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1")
        if self.n_envs < 1:
            raise ValueError("n_envs must be >= 1")
        if not 0.0 <= self.p_switch < 1.0:
            raise ValueError("p_switch must lie in [0, 1)")
        if self.crp_alpha < 0 or self.crp_alpha >= 1:
            raise ValueError("crp_alpha must lie in [0, 1)")
        if self.crp_theta <= 0:
            raise ValueError("crp_theta must be positive")
        if self.max_appearances < 1:
            raise ValueError("max_appearances must be >= 1")
        if not 0.0 < self.label_ratio <= 1.0:
            raise ValueError("label_ratio must lie in (0, 1]")
        if not 0.0 <= self.ambiguity <= 1.0:
            raise ValueError("ambiguity must lie in [0, 1]")
        if not 0.0 <= self.env_style < 1.0:
            raise ValueError("env_style must lie in [0, 1)")
        if self.noise < 0 or self.cue_noise < 0:
            raise ValueError("noise scales must be nonnegative")
        if self.feature_scale <= 0:
            raise ValueError("feature_scale must be positive")

    @property
    def feature_dim(self) -> int:
        return self.class_dim + (self.cue_dim if self.spatial_cue else 0)

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown sampler keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class TimeStep:
    x: np.ndarray
    y: int
    y_tilde: int
    env: int
    u: bool


@dataclass
class Sequence:
    x: np.ndarray          # (T, D) features
    y: np.ndarray          # (T,) true class
    y_tilde: np.ndarray    # (T,) revealed label or UNLABELED
    env: np.ndarray        # (T,) hidden environment
    u: np.ndarray          # (T,) bool novelty flag
    rosters: dict = field(default_factory=dict)
    config_hash: str = ""
    seed: int = 0
    index: int = 0

    def __len__(self):
        return len(self.y)

    @property
    def steps(self):
        return [TimeStep(self.x[t], int(self.y[t]), int(self.y_tilde[t]),
                         int(self.env[t]), bool(self.u[t])) for t in range(len(self))]

    @property
    def labeled(self):
        return self.y_tilde != UNLABELED

    def validate(self, max_appearances=None):
        T = len(self.y)
        if self.x.ndim != 2 or self.x.shape[0] != T:
            raise SequenceError(f"feature array shape {self.x.shape} does not match length {T}")
        for arr in (self.y_tilde, self.env, self.u):
            if len(arr) != T:
                raise SequenceError("per-step arrays have mismatched lengths")
        bad = (self.y_tilde != UNLABELED) & (self.y_tilde != self.y)
        if bad.any():
            t = int(np.flatnonzero(bad)[0])
            raise SequenceError(f"step {t}: revealed label {int(self.y_tilde[t])} "
                                f"differs from class {int(self.y[t])}")
        expect = novelty_flags(self.y, self.y_tilde)
        if not np.array_equal(expect, self.u.astype(bool)):
            t = int(np.flatnonzero(expect != self.u.astype(bool))[0])
            raise SequenceError(f"step {t}: novelty flag inconsistent with label history")
        classes, counts = np.unique(self.y, return_counts=True)
        labeled = set(self.y[self.labeled].tolist())
        missing = [int(c) for c in classes if int(c) not in labeled]
        if missing:
            raise SequenceError(f"classes without any labeled occurrence: {missing}")
        if max_appearances is not None and counts.max(initial=0) > max_appearances:
            raise SequenceError("appearance cap exceeded")
        if self.rosters:
            for t in range(T):
                roster = self.rosters.get(int(self.env[t]))
                if roster is not None and int(self.y[t]) not in roster:
                    raise SequenceError(f"step {t}: class {int(self.y[t])} not in roster "
                                        f"of environment {int(self.env[t])}")

    def to_record(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "config_hash": self.config_hash,
            "seed": int(self.seed),
            "index": int(self.index),
            "rosters": {str(k): [int(c) for c in v] for k, v in sorted(self.rosters.items())},
            "steps": [
                {"x": [float(v) for v in self.x[t]], "y": int(self.y[t]),
                 "y_tilde": int(self.y_tilde[t]), "env": int(self.env[t]),
                 "u": bool(self.u[t])}
                for t in range(len(self))
            ],
        }


def novelty_flags(y, y_tilde) -> np.ndarray:
    """True where no earlier step revealed the label of this step's class."""
    known = set()
    out = np.zeros(len(y), dtype=bool)
    for t, (c, lab) in enumerate(zip(np.asarray(y).tolist(), np.asarray(y_tilde).tolist())):
        out[t] = c not in known
        if lab != UNLABELED:
            known.add(c)
    return out


def derive_seed(master: int, *names) -> int:
    """Mix a master seed with names/indices into an independent 63-bit seed."""
    keys = [int(master) & 0xFFFFFFFF, (int(master) >> 32) & 0xFFFFFFFF]
    for n in names:
        keys.append(zlib.crc32(n.encode()) if isinstance(n, str) else int(n) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(keys).generate_state(2, np.uint32).view(np.uint64)[0]
               >> np.uint64(1))


# ----------------------------------------------------------------------------
# samplers


def sample_environment_schedule(config: SamplerConfig, rng) -> np.ndarray:
    T, n = config.seq_len, config.n_envs
    env = np.empty(T, dtype=np.int64)
    cur = int(rng.integers(n))
    env[0] = cur
    for t in range(1, T):
        if n > 1 and rng.random() < config.p_switch:
            nxt = int(rng.integers(n - 1))
            cur = nxt if nxt < cur else nxt + 1
        env[t] = cur
    return env


def crp_new_probability(k: int, m: int, alpha: float, theta: float) -> float:
    return (k * alpha + theta) / (m + theta)


def crp_draw(counts, alpha, theta, rng) -> int:
    """One two-parameter CRP draw: index of an existing table or ``NEW``."""
    k = len(counts)
    m = int(sum(counts))
    u = rng.random() * (m + theta)
    acc = k * alpha + theta
    if u < acc:
        return NEW
    for i, c in enumerate(counts):
        acc += c - alpha
        if u < acc:
            return i
    return k - 1


def crp_sample_class(counts, config: SamplerConfig, rng, capped=None, allow_new=True) -> int:
    """Draw a class for an environment given its per-class counts.

    Draws landing on a capped class (or on ``NEW`` when ``allow_new`` is
    false) are redrawn up to ``max_retries`` times; after that the draw is
    forced to ``NEW`` if allowed, otherwise to the least used uncapped class.
    """
    counts = list(counts)
    capped = [False] * len(counts) if capped is None else list(capped)
    for _ in range(config.max_retries + 1):
        i = crp_draw(counts, config.crp_alpha, config.crp_theta, rng)
        if i == NEW:
            if allow_new:
                return NEW
        elif not capped[i]:
            return i
    if allow_new:
        return NEW
    free = [i for i, c in enumerate(capped) if not c]
    if not free:
        return NEW
    return min(free, key=lambda i: (counts[i], i))


def sample_classes(env: np.ndarray, config: SamplerConfig, rng):
    """Class id per step plus per-environment rosters (disjoint by construction)."""
    rosters: dict[int, list] = {e: [] for e in range(config.n_envs)}
    counts: dict[int, list] = {e: [] for e in range(config.n_envs)}
    y = np.empty(len(env), dtype=np.int64)
    n_classes = 0
    for t, e in enumerate(env.tolist()):
        capped = [c >= config.max_appearances for c in counts[e]]
        allow_new = n_classes < config.max_classes
        i = crp_sample_class(counts[e], config, rng, capped, allow_new)
        if i == NEW:
            rosters[e].append(n_classes)
            counts[e].append(1)
            y[t] = n_classes
            n_classes += 1
        else:
            counts[e][i] += 1
            y[t] = rosters[e][i]
    return y, rosters


def label_probability(m_k: int, label_ratio: float) -> float:
    return (1.0 - label_ratio) * np.exp(-0.5 * (m_k - 1)) + label_ratio


def mask_labels(y: np.ndarray, config: SamplerConfig, rng) -> np.ndarray:
    """Revealed labels: all of them when supervised, else class-adaptive Bernoulli."""
    y = np.asarray(y)
    if not config.semi_supervised:
        return y.copy()
    y_tilde = np.full(len(y), UNLABELED, dtype=np.int64)
    for c in np.unique(y).tolist():
        where = np.flatnonzero(y == c)
        p = label_probability(len(where), config.label_ratio)
        keep = rng.random(len(where)) < p
        if not keep.any():
            keep[int(rng.integers(len(where)))] = True
        y_tilde[where[keep]] = c
    return y_tilde


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def class_vectors(rosters, config: SamplerConfig, rng):
    """Per-class signal vectors plus the twin pairing.

    Non-twin classes lean toward a shared direction of their environment
    (like characters of one alphabet). A fraction ``ambiguity`` of classes is
    paired across different environments; the two members of a pair share
    one vector exactly.
    """
    D = config.class_dim
    n_classes = sum(len(v) for v in rosters.values())
    env_of = np.empty(n_classes, dtype=np.int64)
    for e, cs in rosters.items():
        env_of[cs] = e
    style = _unit(rng.normal(size=(config.n_envs, D)))
    specific = _unit(rng.normal(size=(n_classes, D)))
    rho = config.env_style
    vecs = _unit(rho * style[env_of] + np.sqrt(1.0 - rho * rho) * specific)

    twin = np.full(n_classes, -1, dtype=np.int64)
    n_pairs = int(config.ambiguity * n_classes) // 2
    order = rng.permutation(n_classes).tolist()
    pool = list(order)
    pairs = 0
    while pairs < n_pairs and pool:
        a = pool.pop(0)
        partner = next((b for b in pool if env_of[b] != env_of[a]), None)
        if partner is None:
            continue
        pool.remove(partner)
        twin[a], twin[partner] = partner, a
        shared = _unit(rng.normal(size=D))
        vecs[a] = vecs[partner] = shared
        pairs += 1
    return vecs, twin


def env_anchors(config: SamplerConfig, rng):
    return _unit(rng.normal(size=(config.n_envs, config.cue_dim)))


def generate_toy_features(y, env, config: SamplerConfig, rng, rosters=None):
    """Features per step: class vector plus isotropic noise, optionally with a cue.

    Returns ``(x, vecs, anchors)``; ``vecs`` and ``anchors`` are the noiseless
    class and environment vectors.
    """
    if rosters is None:
        rosters = {e: sorted(set(np.asarray(y)[np.asarray(env) == e].tolist()))
                   for e in range(config.n_envs)}
    vecs, _ = class_vectors(rosters, config, rng)
    anchors = env_anchors(config, rng)
    T = len(y)
    D = config.class_dim
    x = vecs[y] + config.noise / np.sqrt(D) * rng.normal(size=(T, D))
    if config.spatial_cue:
        cue = anchors[env] + config.cue_noise / np.sqrt(config.cue_dim) * \
            rng.normal(size=(T, config.cue_dim))
        x = np.concatenate([x, cue], axis=1)
    return config.feature_scale * x, vecs, anchors


def shuffle_sequence(seq: Sequence, rng) -> Sequence:
    """Uniformly permute the steps and recompute novelty flags."""
    perm = rng.permutation(len(seq))
    y, y_tilde = seq.y[perm], seq.y_tilde[perm]
    return replace(seq, x=seq.x[perm], y=y, y_tilde=y_tilde, env=seq.env[perm],
                   u=novelty_flags(y, y_tilde))


def generate_sequence(config: SamplerConfig, seed: int, index: int = 0) -> Sequence:
    """Generate one sequence; a pure function of ``(config, seed, index)``."""
    rng = np.random.default_rng(derive_seed(seed, "sequence", index))
    env = sample_environment_schedule(config, rng)
    y, rosters = sample_classes(env, config, rng)
    y_tilde = mask_labels(y, config, rng)
    x, _, _ = generate_toy_features(y, env, config, rng, rosters)
    seq = Sequence(x=x, y=y, y_tilde=y_tilde, env=env, u=novelty_flags(y, y_tilde),
                   rosters=rosters, config_hash=config.config_hash(), seed=seed, index=index)
    if config.shuffle:
        seq = shuffle_sequence(seq, rng)
    return seq


def generate_sequences(config: SamplerConfig, seed: int, n: int, start: int = 0, workers=1):
    idx = range(start, start + n)
    if workers and workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(generate_sequence, [config] * n, [seed] * n, idx))
    return [generate_sequence(config, seed, i) for i in idx]


# ----------------------------------------------------------------------------
# files


def write_sequences(path, sequences) -> None:
    with open(path, "w") as fh:
        for seq in sequences:
            fh.write(json.dumps(seq.to_record(), sort_keys=True))
            fh.write("\n")


def _parse_record(rec, lineno):
    def fail(msg):
        raise SequenceError(f"line {lineno}: {msg}")

    if not isinstance(rec, dict):
        fail("record is not a JSON object")
    version = rec.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        fail(f"unsupported schema_version {version}")
    steps = rec.get("steps")
    if not isinstance(steps, list):
        fail("missing 'steps' list")
    xs, ys, yts, envs, us = [], [], [], [], []
    for t, st in enumerate(steps):
        if not isinstance(st, dict) or "x" not in st:
            fail(f"step {t}: malformed step record")
        y = st.get("y")
        yt = st.get("y_tilde", UNLABELED)
        if y is None:
            if yt is not None and yt != UNLABELED:
                fail(f"step {t}: label without class")
            fail(f"step {t}: missing class")
        try:
            xs.append([float(v) for v in st["x"]])
            ys.append(int(y))
            yts.append(UNLABELED if yt is None else int(yt))
            envs.append(int(st.get("env", 0)))
            us.append(st.get("u"))
        except (TypeError, ValueError):
            fail(f"step {t}: malformed values")
    if len({len(v) for v in xs}) > 1:
        fail("feature vectors have inconsistent lengths")
    rosters = {int(k): [int(c) for c in v] for k, v in (rec.get("rosters") or {}).items()}
    y_arr = np.asarray(ys, dtype=np.int64)
    yt_arr = np.asarray(yts, dtype=np.int64)
    u = novelty_flags(y_arr, yt_arr)
    if any(v is not None and bool(v) != bool(w) for v, w in zip(us, u)):
        t = next(i for i, (v, w) in enumerate(zip(us, u)) if v is not None and bool(v) != bool(w))
        fail(f"step {t}: novelty flag inconsistent with label history")
    seq = Sequence(
        x=np.asarray(xs, dtype=np.float64).reshape(len(xs), -1),
        y=y_arr, y_tilde=yt_arr, env=np.asarray(envs, dtype=np.int64), u=u,
        rosters=rosters, config_hash=str(rec.get("config_hash", "")),
        seed=int(rec.get("seed", 0)), index=int(rec.get("index", 0)),
    )
    try:
        seq.validate()
    except SequenceError as exc:
        fail(str(exc))
    return seq


def ingest_feature_file(path):
    """Read JSON-lines sequences, validating every record."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SequenceError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            out.append(_parse_record(rec, lineno))
    return out


read_sequences = ingest_feature_file


# ----------------------------------------------------------------------------
# statistics


def run_lengths(env) -> list:
    """Complete and final (censored) run lengths of one schedule."""
    env = np.asarray(env)
    cuts = np.flatnonzero(np.diff(env) != 0) + 1
    bounds = np.concatenate([[0], cuts, [len(env)]])
    return np.diff(bounds).tolist()


def run_length_estimate(schedules):
    """Mean environment run length, corrected for the censored last run.

    Each step after the first is one switch trial, so the rate estimate is
    switches / trials and the mean run length is its reciprocal. Returns
    ``(mean, standard_error)``.
    """
    trials = sum(len(e) - 1 for e in schedules)
    switches = sum(int((np.diff(np.asarray(e)) != 0).sum()) for e in schedules)
    if switches == 0:
        return float("inf"), float("nan")
    p = switches / trials
    se_p = np.sqrt(p * (1 - p) / trials)
    return 1.0 / p, float(se_p / (p * p))


def sequence_stats(sequences) -> dict:
    T = max((len(s) for s in sequences), default=0)
    growth = np.zeros(T)
    for s in sequences:
        seen, curve = set(), np.zeros(len(s))
        for t in range(len(s)):
            if s.y_tilde[t] != UNLABELED:
                seen.add(int(s.y[t]))
            curve[t] = len(seen)
        growth[:len(s)] += curve
    growth /= max(len(sequences), 1)
    runs = [r for s in sequences for r in run_lengths(s.env)[:-1]]
    hist = np.bincount(runs).tolist() if runs else []
    mean, se = run_length_estimate([s.env for s in sequences])
    n_classes = [len(np.unique(s.y)) for s in sequences]
    labeled = sum(int(s.labeled.sum()) for s in sequences)
    total = sum(len(s) for s in sequences)
    return {
        "n_sequences": len(sequences),
        "class_growth": [round(float(v), 6) for v in growth],
        "run_length_hist": hist,
        "mean_run_length": mean,
        "mean_run_length_se": se,
        "mean_classes": float(np.mean(n_classes)) if n_classes else 0.0,
        "labeled_fraction": labeled / total if total else 0.0,
        "unlabeled_steps": total - labeled,
    }
