"""Online scoring: average precision over the known/unknown ranking, N-shot
accuracy, forgetting tables and per-step accuracy curves."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .sequences import UNLABELED

FORGETTING_BINS = ((1, 2), (3, 5), (6, 10), (11, 20), (21, 50), (51, 100))
MAX_SHOTS = 6


class EvaluationError(RuntimeError):
    pass


@dataclass
class PredictionRecord:
    seq_id: int
    t: int
    known: float
    pred: int
    true: int
    u: bool
    labeled: bool
    shots: int
    since: float  # steps since the class's last revealed label; inf if never

    def to_json(self):
        d = asdict(self)
        d["since"] = None if math.isinf(self.since) else int(self.since)
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        d["since"] = math.inf if d.get("since") is None else float(d["since"])
        return cls(**d)


class RecordTable:
    """Column-oriented view of many records; every metric reads this."""

    COLUMNS = ("seq_id", "t", "known", "pred", "true", "u", "labeled", "shots", "since")

    def __init__(self, **cols):
        n = None
        for name in self.COLUMNS:
            arr = np.asarray(cols[name])
            if n is None:
                n = len(arr)
            elif len(arr) != n:
                raise ValueError(f"column {name} has length {len(arr)}, expected {n}")
            setattr(self, name, arr)
        self.u = self.u.astype(bool)
        self.labeled = self.labeled.astype(bool)
        self.known = self.known.astype(float)
        self.since = self.since.astype(float)

    def __len__(self):
        return len(self.t)

    @classmethod
    def from_records(cls, records):
        records = list(records)
        return cls(**{c: [getattr(r, c) for r in records] for c in cls.COLUMNS})

    @classmethod
    def concat(cls, tables):
        return cls(**{c: np.concatenate([getattr(tb, c) for tb in tables]) for c in cls.COLUMNS})

    def records(self):
        return [PredictionRecord(int(self.seq_id[i]), int(self.t[i]), float(self.known[i]),
                                 int(self.pred[i]), int(self.true[i]), bool(self.u[i]),
                                 bool(self.labeled[i]), int(self.shots[i]), float(self.since[i]))
                for i in range(len(self))]

    @property
    def correct(self):
        return self.pred == self.true


def _as_table(records):
    return records if isinstance(records, RecordTable) else RecordTable.from_records(records)


def label_history(y, y_tilde):
    """Per step: labeled sightings of the true class so far, and steps since
    its last revealed label (``inf`` when never labeled)."""
    shots = np.zeros(len(y), dtype=np.int64)
    since = np.full(len(y), np.inf)
    count, last = {}, {}
    for t, c in enumerate(np.asarray(y).tolist()):
        shots[t] = count.get(c, 0)
        if c in last:
            since[t] = t - last[c]
        if y_tilde[t] != UNLABELED:
            count[c] = count.get(c, 0) + 1
            last[c] = t
    return shots, since


def table_from_predictions(known, pred, y, y_tilde, u, seq_ids):
    """Build records from ``(B, T)`` prediction arrays of a batch rollout."""
    known, pred, y, y_tilde, u = map(np.asarray, (known, pred, y, y_tilde, u))
    B, T = y.shape
    shots = np.zeros((B, T), dtype=np.int64)
    since = np.zeros((B, T))
    for b in range(B):
        shots[b], since[b] = label_history(y[b], y_tilde[b])
    return RecordTable(
        seq_id=np.repeat(np.asarray(seq_ids), T), t=np.tile(np.arange(T), B),
        known=known.ravel(), pred=pred.ravel(), true=y.ravel(), u=u.ravel(),
        labeled=(y_tilde != UNLABELED).ravel(), shots=shots.ravel(), since=since.ravel())


# ----------------------------------------------------------------------------
# metrics


def ranking(records):
    """Indices sorted by known-ness (descending), ties by (sequence id, step)."""
    tb = _as_table(records)
    return np.lexsort((tb.t, tb.seq_id, -tb.known))


def average_precision(records, trapezoid=False) -> float:
    """Area under precision@N versus recall@N for the known/unknown ranking.

    A rank-N item is a hit when it is truly known and its class is predicted
    correctly; recall divides by the number of truly known items.
    """
    tb = _as_table(records)
    n_known = int((~tb.u).sum())
    if n_known == 0:
        raise EvaluationError("average precision is undefined without known instances")
    order = ranking(tb)
    hits = ((~tb.u) & tb.correct)[order]
    cum = np.cumsum(hits)
    precision = cum / np.arange(1, len(hits) + 1)
    recall = cum / n_known
    d_recall = np.diff(recall, prepend=0.0)
    if not trapezoid:
        return float(np.sum(precision * d_recall))
    prev = np.concatenate([[precision[0] if len(precision) else 1.0], precision[:-1]])
    return float(np.sum(0.5 * (precision + prev) * d_recall))


@dataclass
class Estimate:
    mean: float
    se: float
    n: int
    single: bool = False  # standard error set to 0 because only one group was seen


def _across_sequences(seq_ids, correct):
    """Mean per sequence, then mean and standard error across sequences."""
    ids, inv = np.unique(seq_ids, return_inverse=True)
    per_seq = np.bincount(inv, weights=correct.astype(float)) / np.bincount(inv)
    if len(ids) == 1:
        return Estimate(float(per_seq[0]), 0.0, 1, single=True)
    return Estimate(float(per_seq.mean()), float(per_seq.std(ddof=1) / np.sqrt(len(ids))),
                    len(ids))


def n_shot_accuracy(records, n):
    """Accuracy on steps whose class has been labeled exactly ``n`` times before.

    Returns an :class:`Estimate`, or ``None`` when no step qualifies.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    tb = _as_table(records)
    sel = tb.shots == n
    if not sel.any():
        return None
    return _across_sequences(tb.seq_id[sel], tb.correct[sel])


def _pooled(correct):
    n = len(correct)
    p = float(correct.mean())
    return Estimate(p, float(np.sqrt(p * (1 - p) / n)), n)


def forgetting_table(records, shots=(1, 3), bins=FORGETTING_BINS):
    """Pooled accuracy per (shot count, steps-since-last-label bin).

    Missing cells are ``None``. Standard errors are binomial over the pooled steps.
    """
    tb = _as_table(records)
    table = {}
    for s in shots:
        for lo, hi in bins:
            sel = (tb.shots == s) & (tb.since >= lo) & (tb.since <= hi)
            table[(s, (lo, hi))] = _pooled(tb.correct[sel]) if sel.any() else None
    return table


def timestep_curve(records, length=None):
    """Accuracy per step index over truly known steps: ``(accuracy, count)``."""
    tb = _as_table(records)
    length = int(tb.t.max()) + 1 if length is None else length
    sel = ~tb.u
    counts = np.bincount(tb.t[sel], minlength=length)[:length]
    hits = np.bincount(tb.t[sel], weights=tb.correct[sel].astype(float), minlength=length)[:length]
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.where(counts > 0, hits / np.maximum(counts, 1), np.nan)
    return acc, counts


# ----------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    ap: float
    n_shot: dict
    forgetting: dict
    curve: np.ndarray
    curve_counts: np.ndarray
    n_records: int
    n_sequences: int
    meta: dict = field(default_factory=dict)
    table: RecordTable | None = None

    @classmethod
    def from_table(cls, tb, meta=None, max_shots=MAX_SHOTS):
        curve, counts = timestep_curve(tb)
        return cls(
            ap=average_precision(tb),
            n_shot={n: n_shot_accuracy(tb, n) for n in range(1, max_shots + 1)},
            forgetting=forgetting_table(tb),
            curve=curve, curve_counts=counts, n_records=len(tb),
            n_sequences=len(np.unique(tb.seq_id)), meta=dict(meta or {}), table=tb)

    def rows(self):
        rows = [("ap", "", _fmt(self.ap), "", str(self.n_records))]
        for n, est in self.n_shot.items():
            rows.append(_est_row("n_shot", str(n), est))
        for (s, (lo, hi)), est in self.forgetting.items():
            rows.append(_est_row(f"forgetting_{s}shot", f"{lo}-{hi}", est))
        for t, (a, c) in enumerate(zip(self.curve, self.curve_counts)):
            rows.append(("curve", str(t), "" if np.isnan(a) else _fmt(a), "", str(int(c))))
        return rows

    def write_csv(self, path):
        with open(path, "w") as fh:
            for k in sorted(self.meta):
                fh.write(f"# {k}={self.meta[k]}\n")
            fh.write("metric,key,value,se,n\n")
            for row in self.rows():
                fh.write(",".join(row) + "\n")

    def write_records(self, path):
        write_records(path, self.table.records())

    def write_svg(self, path, **kw):
        write_curve_svg(path, {"accuracy": self.curve}, **kw)


def _fmt(x):
    return f"{x:.10g}"


def _est_row(metric, key, est):
    if est is None:
        return (metric, key, "", "", "0")
    return (metric, key, _fmt(est.mean), _fmt(est.se), str(est.n))


def read_report(path):
    """Parse a report CSV into ``(meta, {(metric, key): (value, se, n)})``."""
    meta, values = {}, {}
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("# "):
                k, _, v = line[2:].partition("=")
                meta[k] = v
            elif line and not line.startswith("metric,"):
                metric, key, value, se, n = line.split(",")
                values[(metric, key)] = (float(value) if value else None,
                                         float(se) if se else None, int(n))
    return meta, values


def write_records(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def read_records(path):
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(PredictionRecord.from_json(json.loads(line)))
            except (json.JSONDecodeError, TypeError, KeyError) as exc:
                raise EvaluationError(f"{path}:{lineno}: bad record ({exc})") from exc
    return out


def write_curve_svg(path, series, width=640, height=320, title="accuracy per step"):
    """Minimal SVG line plot; ``series`` maps a label to a y array in [0, 1]."""
    pad = 40
    colors = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")
    n = max((len(v) for v in series.values()), default=1)
    sx = (width - 2 * pad) / max(n - 1, 1)
    sy = height - 2 * pad
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="{pad}" y="20" font-size="12">{title}</text>',
             f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{sy}" '
             'fill="none" stroke="#888"/>']
    for i, (label, ys) in enumerate(series.items()):
        pts = [f"{pad + t * sx:.2f},{pad + (1 - y) * sy:.2f}"
               for t, y in enumerate(np.asarray(ys, dtype=float)) if not np.isnan(y)]
        color = colors[i % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{color}" points="{" ".join(pts)}"/>')
        parts.append(f'<text x="{width - pad - 100}" y="{pad + 15 * (i + 1)}" font-size="11" '
                     f'fill="{color}">{label}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


# ----------------------------------------------------------------------------
# driving a learner


def rollout_table(learner, sequences, batch_size=16, seq_ids=None):
    """Roll ``learner`` over ``sequences`` (memory reset per sequence) with no
    gradient recording and collect a :class:`RecordTable`."""
    from .learners import Batch

    seq_ids = list(range(len(sequences))) if seq_ids is None else list(seq_ids)
    order = sorted(range(len(sequences)), key=lambda i: (len(sequences[i]), i))
    tables = []
    i = 0
    while i < len(order):
        L = len(sequences[order[i]])
        chunk = []
        while i < len(order) and len(sequences[order[i]]) == L and len(chunk) < batch_size:
            chunk.append(order[i])
            i += 1
        batch = Batch.from_sequences([sequences[j] for j in chunk])
        try:
            r = learner.rollout(batch)
        except Exception as exc:
            ids = [seq_ids[j] for j in chunk]
            raise EvaluationError(f"rollout failed on sequences {ids}: {exc}") from exc
        tables.append(table_from_predictions(r.known, r.pred, batch.y, batch.y_tilde, batch.u,
                                             [seq_ids[j] for j in chunk]))
    tb = RecordTable.concat(tables)
    keep = np.lexsort((tb.t, tb.seq_id))
    return RecordTable(**{c: getattr(tb, c)[keep] for c in RecordTable.COLUMNS})


def evaluate(learner, sequences, batch_size=16, meta=None) -> MetricsReport:
    return MetricsReport.from_table(rollout_table(learner, sequences, batch_size), meta)


__all__ = [
    "EvaluationError", "Estimate", "FORGETTING_BINS", "MetricsReport", "PredictionRecord",
    "RecordTable", "average_precision", "evaluate", "forgetting_table", "label_history",
    "n_shot_accuracy", "ranking", "read_records", "read_report", "rollout_table",
    "table_from_predictions", "timestep_curve", "write_curve_svg", "write_records",
]
