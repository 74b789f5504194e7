import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ocfsl.autodiff import Tensor, Tape, backward, ops, parameter
from ocfsl.context import Control
from ocfsl.memory import MemoryOverflow, PrototypeMemory, dissimilarity, novelty
from ocfsl.sequences import UNLABELED

from oracles import class_means, numeric_grad, rel_err


def control(beta_r=10.0, gamma_r=1.0, beta_w=10.0, gamma_w=1.0, m=None):
    t = lambda v: Tensor(np.asarray(v, dtype=float))  # noqa: E731
    return Control(m=None if m is None else t(m), beta_r=t(beta_r), gamma_r=t(gamma_r),
                   beta_w=t(beta_w), gamma_w=t(gamma_w))


def step(mem, h, labels, ctl=None, gate=None):
    ctl = ctl or control()
    h = Tensor(np.atleast_2d(np.asarray(h, dtype=float)))
    logp, probs, u, d_min, d = mem.read(h, ctl)
    mem.write(h, np.atleast_1d(labels), probs, d_min, ctl, unlabeled_gate=gate)
    return probs, u


# --- dissimilarity ----------------------------------------------------------

def test_dissimilarity_examples():
    h = np.array([0.3, -1.2, 2.0])
    assert dissimilarity(h, h, m=[4.0, 0.5, 1.0]) == 0.0
    assert dissimilarity([1, 0], [0, 1], m=[1, 1]) == 2.0
    assert dissimilarity(h, h, mode="cosine", scale=10.0) == pytest.approx(-10.0)


def test_cosine_zero_norm_is_maximally_dissimilar():
    assert dissimilarity([0, 0], [1, 0], mode="cosine", scale=10.0) == 10.0


def test_cosine_memory_flags_zero_norm_queries():
    mem = PrototypeMemory(2, k_max=4, mode="cosine").reset(1)
    step(mem, [1.0, 0.0], [0])
    d = mem.dissimilarity(Tensor(np.zeros((1, 2))))
    assert mem.flagged_zero_norm == 1
    assert d.data[0, 0] == pytest.approx(10.0)


def test_metric_scales_each_dimension():
    mem = PrototypeMemory(2, k_max=3).reset(1)
    step(mem, [0.0, 0.0], [0])
    d = mem.dissimilarity(Tensor([[1.0, 2.0]]), Tensor([[3.0, 0.5]]))
    assert d.data[0, 0] == pytest.approx(3.0 * 1 + 0.5 * 4)


def test_unknown_mode_rejected():
    with pytest.raises(ValueError):
        PrototypeMemory(2, mode="manhattan")


# --- read ----------------------------------------------------------------------

def test_empty_memory_reads_as_novel():
    mem = PrototypeMemory(3, k_max=5).reset(2)
    _, probs, u, _, _ = mem.read(Tensor(np.ones((2, 3))), control())
    assert np.array_equal(u.data, [1.0, 1.0])
    assert np.all(probs.data == 0)


def test_single_slot_gets_all_probability():
    mem = PrototypeMemory(2, k_max=5).reset(1)
    step(mem, [1.0, 1.0], [7])
    probs, _ = step(mem, [4.0, -2.0], [UNLABELED])
    assert probs.data[0, 0] == pytest.approx(1.0)
    assert probs.data[0, 1:].sum() == 0


def test_novelty_at_threshold_is_half():
    assert novelty(Tensor(3.0), Tensor(3.0), Tensor(0.7)).data == pytest.approx(0.5)


def test_two_slot_softmax_values():
    mem = PrototypeMemory(1, k_max=3).reset(1)
    step(mem, [0.0], [0])
    step(mem, [np.sqrt(2.0)], [1])
    _, probs, _, d_min, d = mem.read(Tensor([[0.0]]), control())
    np.testing.assert_allclose(d.data[0, :2], [0.0, 2.0], atol=1e-12)
    np.testing.assert_allclose(probs.data[0, :2], [0.8808, 0.1192], atol=1e-4)
    assert d_min.data[0] == pytest.approx(0.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 6))
def test_read_distribution_sums_to_one_and_novelty_in_unit_interval(seed, n):
    r = np.random.default_rng(seed)
    mem = PrototypeMemory(4, k_max=8).reset(1)
    for c in range(n):
        step(mem, r.normal(size=4), [c])
    _, probs, u, _, _ = mem.read(Tensor(r.normal(size=(1, 4))),
                                 control(beta_r=r.normal(), gamma_r=20.0))
    assert probs.data.sum() == pytest.approx(1.0)
    assert probs.data[0, n:].sum() == 0
    assert 0.0 < float(u.data[0]) < 1.0


# --- write ---------------------------------------------------------------------

def test_first_labeled_write_stores_embedding():
    mem = PrototypeMemory(3, k_max=5).reset(1)
    step(mem, [1.0, 2.0, 3.0], [3])
    slot = mem.slots.lookup([3])[0]
    np.testing.assert_array_equal(mem.protos.data[0, slot], [1, 2, 3])
    assert mem.counts.data[0, slot] == 1


def test_two_labeled_writes_average():
    mem = PrototypeMemory(2, k_max=5).reset(1)
    step(mem, [1.0, 0.0], [0])
    step(mem, [3.0, 4.0], [0])
    np.testing.assert_allclose(mem.protos.data[0, 0], [2.0, 2.0])
    assert mem.counts.data[0, 0] == 2


def test_unlabeled_write_with_full_novelty_leaves_memory_unchanged():
    mem = PrototypeMemory(2, k_max=5).reset(1)
    step(mem, [1.0, 0.0], [0])
    before = (mem.protos.data.copy(), mem.counts.data.copy())
    # beta_w far below any distance -> u_w == 1 in floating point
    step(mem, [5.0, 5.0], [UNLABELED], control(beta_w=-1e4, gamma_w=1.0))
    np.testing.assert_array_equal(mem.protos.data, before[0])
    np.testing.assert_array_equal(mem.counts.data, before[1])


def test_unlabeled_write_is_weighted_mean():
    mem = PrototypeMemory(1, k_max=3).reset(1)
    step(mem, [0.0], [0])
    ctl = control(beta_w=1.0, gamma_w=1.0)
    step(mem, [1.0], [UNLABELED], ctl)
    uw = 1 / (1 + np.exp(-(1.0 - 1.0)))
    w = 1.0 * (1 - uw)
    assert mem.counts.data[0, 0] == pytest.approx(1 + w)
    assert mem.protos.data[0, 0, 0] == pytest.approx(w / (1 + w))


def test_unlabeled_steps_never_allocate_slots():
    mem = PrototypeMemory(2, k_max=5).reset(1)
    step(mem, [1.0, 0.0], [UNLABELED])
    assert mem.n_slots()[0] == 0
    step(mem, [1.0, 0.0], [0])
    step(mem, [1.0, 0.0], [UNLABELED])
    assert mem.n_slots()[0] == 1


def test_unlabeled_gate_blocks_write():
    mem = PrototypeMemory(1, k_max=3).reset(1)
    step(mem, [0.0], [0])
    step(mem, [1.0], [UNLABELED], control(beta_w=5.0), gate=[False])
    assert mem.protos.data[0, 0, 0] == 0.0


def test_overflow_is_a_hard_error_with_provenance():
    mem = PrototypeMemory(1, k_max=2).reset(1)
    step(mem, [0.0], [0])
    step(mem, [1.0], [1])
    h = Tensor([[2.0]])
    _, probs, _, d_min, _ = mem.read(h, control())
    with pytest.raises(MemoryOverflow, match="seed 4"):
        mem.write(h, [2], probs, d_min, control(), provenance=["seed 4, index 0"])


def _labeled_stream(seed, n_per_class=5, n_classes=2, dim=3):
    r = np.random.default_rng(seed)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    r.shuffle(labels)
    return r.normal(size=(len(labels), dim)), labels


@pytest.mark.parametrize("seed", range(10))
def test_supervised_prototypes_equal_class_means(seed):
    h, labels = _labeled_stream(seed)
    mem = PrototypeMemory(3, k_max=4).reset(1)
    for t in range(len(labels)):
        step(mem, h[t], [labels[t]])
    means = class_means(h, labels.tolist())
    for c, mean in means.items():
        slot = mem.slots.lookup([c])[0]
        assert np.abs(mem.protos.data[0, slot] - mean).max() < 1e-9


def test_batch_rows_are_independent():
    h, labels = _labeled_stream(3)
    mem = PrototypeMemory(3, k_max=4).reset(2)
    for t in range(len(labels)):
        step(mem, np.stack([h[t], -h[t]]), [labels[t], labels[t]])
    np.testing.assert_allclose(mem.protos.data[0], -mem.protos.data[1])


# --- reset -----------------------------------------------------------------------

def test_reset_empties_and_is_idempotent():
    mem = PrototypeMemory(2, k_max=4, gau=True).reset(1)
    gau_before = mem.gau_wh.data.copy()
    step(mem, [1.0, 2.0], [0])
    mem.reset()
    mem.reset()
    _, probs, u, _, _ = mem.read(Tensor([[1.0, 2.0]]), control())
    assert u.data[0] == 1.0 and probs.data.sum() == 0
    assert np.array_equal(mem.gau_wh.data, gau_before)


def test_write_after_reset_matches_fresh_write():
    a = PrototypeMemory(2, k_max=4).reset(1)
    step(a, [5.0, 5.0], [1])
    a.reset()
    step(a, [1.0, -1.0], [0])
    b = PrototypeMemory(2, k_max=4).reset(1)
    step(b, [1.0, -1.0], [0])
    assert np.array_equal(a.protos.data, b.protos.data)
    assert np.array_equal(a.counts.data, b.counts.data)


# --- gated averaging ---------------------------------------------------------------

def _saturate(mem, bias):
    mem.gau_wh.data[:] = 0.0
    mem.gau_wp.data[:] = 0.0
    mem.gau_b.data[...] = bias


def test_gate_fully_open_is_last_write_wins():
    mem = PrototypeMemory(2, k_max=4, gau=True).reset(1)
    _saturate(mem, 1e3)
    for h in ([1.0, 0.0], [0.0, 3.0], [2.0, 2.0]):
        step(mem, h, [0])
    np.testing.assert_allclose(mem.protos.data[0, 0], [2.0, 2.0])


def test_gate_closed_freezes_prototype_after_first_write():
    mem = PrototypeMemory(2, k_max=4, gau=True).reset(1)
    _saturate(mem, -1e3)
    for h in ([1.0, 0.0], [0.0, 3.0], [2.0, 2.0]):
        step(mem, h, [0])
    np.testing.assert_allclose(mem.protos.data[0, 0], [1.0, 0.0])
    assert mem.counts.data[0, 0] == 3


# --- gradients -----------------------------------------------------------------------

@pytest.mark.parametrize("mode,gau", [("euclidean", False), ("euclidean", True),
                                      ("cosine", False)])
def test_read_write_chain_gradients_match_finite_differences(mode, gau):
    r = np.random.default_rng(0)
    H = r.normal(size=(6, 2, 3))
    labels = [[0, 1], [1, UNLABELED], [UNLABELED, 0], [0, 1], [UNLABELED, UNLABELED], [1, 0]]
    m = parameter(np.abs(r.normal(size=(2, 3))) + 0.5, "m")
    beta = parameter(np.array(1.5), "beta")
    x = parameter(H, "x")
    mem = PrototypeMemory(3, k_max=3, mode=mode, gau=gau, rng=r)
    params = [m, beta, x, *mem.params.values()]

    def loss():
        mem.reset(2)
        ctl = Control(m=m, beta_r=beta, gamma_r=Tensor(0.8), beta_w=ops.affine(beta, 1.0, 0.5),
                      gamma_w=Tensor(1.2))
        total = Tensor(0.0)
        for t in range(6):
            h = ops.index(x, t)
            logp, probs, u, d_min, _ = mem.read(h, ctl)
            total = ops.add(total, ops.sum(ops.mul(logp, probs)))
            total = ops.add(total, ops.sum(u))
            mem.write(h, labels[t], probs, d_min, ctl)
        return total

    with Tape({p.name: p for p in params}) as tape:
        out = loss()
    grads = backward(tape, out)
    for p in params:
        num = numeric_grad(lambda: float(loss().data), p.data)
        assert rel_err(grads[p.name], num) < 1e-5, p.name
