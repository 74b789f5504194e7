"""Slot-based prototype memory with novelty read-out and semi-supervised writes.

Every method works on a batch of independent sequences: prototypes are a
``(B, K, D)`` tensor, counts ``(B, K)``, and the label-to-slot assignment is
tracked per batch row.
"""
from __future__ import annotations

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor, get_default_dtype, parameter
from .sequences import UNLABELED

COSINE_SCALE_INIT = 10.0


class MemoryOverflow(RuntimeError):
    pass


class SlotMap:
    """Allocates slots to class labels in order of first labeled sighting."""

    def __init__(self, batch, k_max):
        self.k_max = k_max
        self.labels = np.full((batch, k_max), -1, dtype=np.int64)
        self.used = np.zeros(batch, dtype=np.int64)
        self._lookup = [dict() for _ in range(batch)]

    @property
    def occupied(self):
        return self.labels >= 0

    def lookup(self, labels):
        """Slot of each row's label, or -1 when unassigned / unlabeled."""
        return np.array([self._lookup[b].get(int(c), -1) for b, c in enumerate(labels)],
                        dtype=np.int64)

    def assign(self, labels, provenance=None):
        """Slot per row for revealed labels, allocating new ones; -1 for unlabeled.

        Returns ``(slots, fresh)`` where ``fresh`` marks newly allocated slots.
        """
        slots = np.full(len(labels), -1, dtype=np.int64)
        fresh = np.zeros(len(labels), dtype=bool)
        for b, c in enumerate(labels):
            c = int(c)
            if c == UNLABELED:
                continue
            s = self._lookup[b].get(c)
            if s is None:
                s = int(self.used[b])
                if s >= self.k_max:
                    where = f" ({provenance[b]})" if provenance is not None else ""
                    raise MemoryOverflow(
                        f"more than {self.k_max} labeled classes in sequence{where}")
                self._lookup[b][c] = s
                self.labels[b, s] = c
                self.used[b] += 1
                fresh[b] = True
            slots[b] = s
        return slots, fresh


class PrototypeMemory:
    """Prototype slots read by softmax over negative dissimilarity.

    ``mode`` is ``"euclidean"`` (metric-scaled squared distance) or
    ``"cosine"`` (negative scaled cosine of the metric-scaled query).
    ``gau`` switches the running mean for a learned gated average.
    """

    def __init__(self, dim, k_max=58, mode="euclidean", gau=False, rng=None, prefix="memory"):
        if mode not in ("euclidean", "cosine"):
            raise ValueError(f"unknown dissimilarity mode {mode!r}")
        self.dim = dim
        self.k_max = k_max
        self.mode = mode
        self.gau = gau
        self.params = {}
        if mode == "cosine":
            self.cos_scale = parameter(COSINE_SCALE_INIT, f"{prefix}.cos_scale")
            self.params[self.cos_scale.name] = self.cos_scale
        if gau:
            rng = rng if rng is not None else np.random.default_rng(0)
            bound = 1.0 / np.sqrt(2 * dim)
            self.gau_wh = parameter(rng.uniform(-bound, bound, (dim, 1)), f"{prefix}.gau_wh")
            self.gau_wp = parameter(rng.uniform(-bound, bound, (dim, 1)), f"{prefix}.gau_wp")
            self.gau_b = parameter(0.0, f"{prefix}.gau_b")
            for p in (self.gau_wh, self.gau_wp, self.gau_b):
                self.params[p.name] = p
        self.batch = 0
        self.reset(1)

    def reset(self, batch=None):
        """Empty every slot; trainable parameters are untouched."""
        if batch is not None:
            self.batch = batch
        dt = get_default_dtype()
        self.protos = Tensor(np.zeros((self.batch, self.k_max, self.dim), dtype=dt))
        self.counts = Tensor(np.zeros((self.batch, self.k_max), dtype=dt))
        self.slots = SlotMap(self.batch, self.k_max)
        self.flagged_zero_norm = 0
        return self

    @property
    def occupied(self):
        return self.slots.occupied

    @property
    def slot_labels(self):
        return self.slots.labels

    def n_slots(self):
        return self.slots.used.copy()

    def dissimilarity(self, h, m=None):
        """(B, K) dissimilarity of each query row to every slot (larger = farther)."""
        if self.mode == "euclidean":
            return ops.slot_sqdist(h, self.protos, m)
        q = h if m is None else ops.mul(h, m)
        qn = np.linalg.norm(ops._const(q).data, axis=-1)
        self.flagged_zero_norm += int((qn == 0).sum())
        return ops.neg(ops.mul(ops.slot_cosine(q, self.protos), self.cos_scale))

    def read(self, h, control):
        """Class distribution over occupied slots and read novelty.

        Returns ``(log_probs, probs, u_read, d_min, d)``. Empty memory rows get
        ``u_read = 1`` and an all-zero distribution.
        """
        mask = self.occupied
        d = self.dissimilarity(h, control.m)
        logits = ops.neg(d)
        logp = ops.log_softmax(logits, mask)
        probs = ops.softmax(logits, mask)
        d_min = ops.masked_min(d, mask)
        u = novelty(d_min, control.beta_r, control.gamma_r)
        nonempty = mask.any(axis=1)
        if not nonempty.all():
            u = ops.where(nonempty, u, 1.0)
        return logp, probs, u, d_min, d

    def write(self, h, labels, probs, d_min, control, unlabeled_gate=None, provenance=None,
              separate_write=True):
        """Update prototypes with this step's embedding.

        ``labels`` holds the revealed label per row (``UNLABELED`` = -1).
        Labeled rows add weight 1 to their class slot (allocated on first
        sighting); unlabeled rows spread weight ``probs_k * (1 - u_write)``
        over existing slots, scaled by ``unlabeled_gate`` (0/1 per row).
        """
        labels = np.asarray(labels)
        occupied_before = self.occupied.copy()
        slots, fresh = self.slots.assign(labels, provenance)
        B, K = self.batch, self.k_max
        dt = get_default_dtype()
        onehot = np.zeros((B, K), dtype=dt)
        lab = slots >= 0
        onehot[np.flatnonzero(lab), slots[lab]] = 1.0
        unl = (~lab) & occupied_before.any(axis=1)
        if unlabeled_gate is not None:
            unl &= np.asarray(unlabeled_gate, dtype=bool)
        if unl.any():
            if separate_write:
                u_w = novelty(d_min, control.beta_w, control.gamma_w)
            else:
                u_w = novelty(d_min, control.beta_r, control.gamma_r)
            soft = ops.mul(probs, ops.mul(ops.affine(u_w, -1.0, 1.0), unl.astype(dt))[:, None])
            delta = ops.add(soft, onehot)
        else:
            delta = Tensor(onehot)
        counts_new = ops.add(self.counts, delta)
        if self.gau:
            gate = ops.sigmoid(ops.add(
                ops.add(ops.matmul(h, self.gau_wh), ops.reshape(
                    ops.matmul(self.protos, self.gau_wp), (B, K))), self.gau_b))
            first = np.zeros((B, K), dtype=bool)
            first[np.flatnonzero(fresh), slots[fresh]] = True
            gate = ops.where(first, 1.0, gate)
            w = ops.mul(delta, gate)
        else:
            empty = (counts_new.data == 0).astype(dt)
            w = ops.div(delta, ops.add(counts_new, empty))
        self.protos = ops.proto_update(self.protos, h, w)
        self.counts = counts_new
        return delta


def novelty(d_min, beta, gamma):
    """Sigmoid of the threshold-shifted, temperature-scaled nearest distance."""
    return ops.sigmoid(ops.div(ops.sub(d_min, beta), gamma))


def dissimilarity(h, p, m=None, mode="euclidean", scale=COSINE_SCALE_INIT):
    """Single-pair dissimilarity on plain vectors (for inspection and tests)."""
    h = np.asarray(h, dtype=float)
    p = np.asarray(p, dtype=float)
    m = np.ones_like(h) if m is None else np.asarray(m, dtype=float)
    if mode == "euclidean":
        return float(np.sum(m * (h - p) ** 2))
    q = h * m
    nq, npn = np.linalg.norm(q), np.linalg.norm(p)
    if nq == 0 or npn == 0:
        return float(scale)
    return float(-scale * np.dot(q, p) / (nq * npn))
