import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ocfsl.sequences import (NEW, UNLABELED, SamplerConfig, Sequence, SequenceError,
                             crp_draw, crp_new_probability, crp_sample_class, derive_seed,
                             generate_sequence, generate_sequences, generate_toy_features,
                             ingest_feature_file, label_probability, mask_labels, novelty_flags,
                             run_length_estimate, run_lengths, sample_classes,
                             sample_environment_schedule, sequence_stats, shuffle_sequence,
                             write_sequences)


def rng(seed=0):
    return np.random.default_rng(seed)


# --- configuration ----------------------------------------------------------

@pytest.mark.parametrize("field,value", [
    ("p_switch", 1.0), ("p_switch", -0.1), ("crp_alpha", -0.5), ("crp_theta", 0.0),
    ("max_appearances", 0), ("label_ratio", 0.0), ("label_ratio", 1.5), ("seq_len", 0),
    ("n_envs", 0), ("feature_scale", 0.0), ("noise", -1.0),
])
def test_config_rejects_invalid_values(field, value):
    with pytest.raises(ValueError):
        SamplerConfig(**{field: value})


def test_config_from_dict_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown"):
        SamplerConfig.from_dict({"seq_len": 10, "bogus": 1})


def test_feature_dim_includes_cue_only_when_enabled():
    assert SamplerConfig().feature_dim == 16
    assert SamplerConfig(spatial_cue=True).feature_dim == 24


# --- environment schedule -----------------------------------------------------

def test_zero_switch_probability_gives_constant_schedule():
    env = sample_environment_schedule(SamplerConfig(p_switch=0.0, seq_len=200), rng())
    assert len(env) == 200 and len(set(env.tolist())) == 1


def test_single_environment_is_constant_regardless_of_switching():
    env = sample_environment_schedule(SamplerConfig(p_switch=0.9, n_envs=1, seq_len=200), rng())
    assert set(env.tolist()) == {0}


def test_switches_always_move_to_a_different_environment():
    cfg = SamplerConfig(p_switch=0.5, n_envs=3, seq_len=500)
    env = sample_environment_schedule(cfg, rng(3))
    changes = np.diff(env)
    assert (changes != 0).mean() == pytest.approx(0.5, abs=0.08)
    assert env.min() >= 0 and env.max() < 3


def test_mean_run_length_matches_geometric_mean():
    cfg = SamplerConfig(seq_len=150)
    r = rng(11)
    schedules = [sample_environment_schedule(cfg, r) for _ in range(2000)]
    mean, se = run_length_estimate(schedules)
    assert abs(mean - 1 / cfg.p_switch) < 3 * se


def test_run_lengths_split_schedule():
    assert run_lengths([0, 0, 1, 1, 1, 0]) == [2, 3, 1]
    assert run_lengths([2]) == [1]


def test_run_length_estimate_without_switches_is_infinite():
    mean, _ = run_length_estimate([np.zeros(5, int)])
    assert math.isinf(mean)


# --- CRP ---------------------------------------------------------------------

def test_crp_new_probability_values():
    assert crp_new_probability(0, 0, 0.2, 1.0) == 1.0
    assert crp_new_probability(3, 10, 0.2, 1.0) == pytest.approx(1.6 / 11)
    assert crp_new_probability(3, 10, 0.2, 1.0) == pytest.approx(0.14545, abs=1e-5)


def test_first_draw_is_always_new():
    r = rng()
    assert all(crp_draw([], 0.2, 1.0, r) == NEW for _ in range(100))


def test_crp_new_rate_matches_formula():
    counts = [5, 3, 2]   # k = 3, m = 10
    r = rng(5)
    n = 10000
    hits = sum(crp_draw(counts, 0.2, 1.0, r) == NEW for _ in range(n))
    p = crp_new_probability(3, 10, 0.2, 1.0)
    assert abs(hits / n - p) < 3 * math.sqrt(p * (1 - p) / n)


def test_crp_existing_class_seating_is_proportional_to_count_minus_alpha():
    counts = [6, 1]
    r = rng(2)
    draws = np.array([crp_draw(counts, 0.2, 1.0, r) for _ in range(20000)])
    existing = draws[draws != NEW]
    frac0 = (existing == 0).mean()
    expect = (6 - 0.2) / (6 - 0.2 + 1 - 0.2)
    assert abs(frac0 - expect) < 4 * math.sqrt(expect * (1 - expect) / len(existing))


def test_capped_classes_are_never_returned():
    cfg = SamplerConfig()
    r = rng(1)
    for _ in range(500):
        i = crp_sample_class([6, 2], cfg, r, capped=[True, False])
        assert i != 0


def test_capped_everywhere_without_new_falls_back_to_new():
    cfg = SamplerConfig(max_retries=2)
    assert crp_sample_class([6], cfg, rng(), capped=[True], allow_new=False) == NEW


def test_sample_classes_rosters_disjoint_and_cap_respected():
    cfg = SamplerConfig(seq_len=300, n_envs=3, max_appearances=4)
    r = rng(9)
    env = sample_environment_schedule(cfg, r)
    y, rosters = sample_classes(env, cfg, r)
    seen = [c for cs in rosters.values() for c in cs]
    assert len(seen) == len(set(seen))
    for e, cs in rosters.items():
        assert set(y[env == e].tolist()) <= set(cs)
    assert np.bincount(y).max() <= 4


def test_class_budget_is_honored_while_uncapped_classes_remain():
    cfg = SamplerConfig(seq_len=400, n_envs=1, max_classes=10, max_appearances=100)
    seq = generate_sequence(cfg, 3)
    assert len(np.unique(seq.y)) == 10


def test_class_budget_yields_when_an_environment_has_nothing_left():
    # An environment with no uncapped class must still emit something.
    cfg = SamplerConfig(seq_len=200, n_envs=5, max_classes=2, max_appearances=3)
    seq = generate_sequence(cfg, 3)
    seq.validate(max_appearances=3)
    assert len(np.unique(seq.y)) > 2


# --- label masking -------------------------------------------------------------

def test_label_probability_values():
    assert label_probability(1, 0.3) == pytest.approx(1.0)
    assert label_probability(3, 0.3) == pytest.approx(0.7 * math.exp(-1) + 0.3)
    assert label_probability(3, 0.3) == pytest.approx(0.55752, abs=1e-5)
    assert label_probability(200, 0.3) == pytest.approx(0.3)


def test_supervised_mode_reveals_every_label():
    seq = generate_sequence(SamplerConfig(semi_supervised=False), 0)
    assert (seq.y_tilde == seq.y).all()
    assert UNLABELED not in seq.y_tilde.tolist()


def test_mask_labels_keeps_at_least_one_label_per_class():
    cfg = SamplerConfig(semi_supervised=True, label_ratio=0.05)
    r = rng(4)
    y = np.repeat(np.arange(20), 6)
    for _ in range(200):
        yt = mask_labels(y, cfg, r)
        for c in range(20):
            assert (yt[y == c] == c).sum() >= 1
        assert ((yt == UNLABELED) | (yt == y)).all()


def test_large_class_label_rate_converges_to_ratio():
    cfg = SamplerConfig(semi_supervised=True, label_ratio=0.3)
    y = np.zeros(20000, dtype=int)
    yt = mask_labels(y, cfg, rng(8))
    rate = (yt != UNLABELED).mean()
    assert abs(rate - 0.3) < 3 * math.sqrt(0.3 * 0.7 / len(y))


# --- toy features ----------------------------------------------------------------

def _skeleton(cfg, seed):
    r = rng(seed)
    env = sample_environment_schedule(cfg, r)
    y, rosters = sample_classes(env, cfg, r)
    return env, y, rosters, r


def test_noiseless_cue_features_repeat_exactly():
    cfg = SamplerConfig(noise=0.0, cue_noise=0.0, spatial_cue=True)
    env, y, rosters, r = _skeleton(cfg, 1)
    x, _, _ = generate_toy_features(y, env, cfg, r, rosters)
    for c in np.unique(y):
        rows = x[y == c]
        assert np.array_equal(rows, np.broadcast_to(rows[0], rows.shape))
    assert x.shape[1] == cfg.feature_dim


def test_ambiguous_pairs_share_identical_noiseless_features():
    cfg = SamplerConfig(noise=0.0, ambiguity=1.0, seq_len=300)
    env, y, rosters, r = _skeleton(cfg, 2)
    from ocfsl.sequences import class_vectors
    vecs, twin = class_vectors(rosters, cfg, np.random.default_rng(0))
    env_of = {c: e for e, cs in rosters.items() for c in cs}
    pairs = [(a, b) for a, b in enumerate(twin.tolist()) if b > a]
    assert pairs
    for a, b in pairs:
        assert env_of[a] != env_of[b]
        assert np.array_equal(vecs[a], vecs[b])


def test_nearest_class_vector_with_known_environment_is_perfect_on_noiseless_data():
    cfg = SamplerConfig(noise=0.0)
    for seed in range(20):
        env, y, rosters, r = _skeleton(cfg, seed)
        x, vecs, _ = generate_toy_features(y, env, cfg, r, rosters)
        protos = cfg.feature_scale * vecs
        for t in range(len(y)):
            roster = rosters[int(env[t])]
            d = ((protos[roster] - x[t]) ** 2).sum(axis=1)
            assert roster[int(np.argmin(d))] == y[t]


def test_context_is_needed_without_environment():
    # Without knowing the environment, twins collide: the global nearest
    # vector is ambiguous for at least one step.
    cfg = SamplerConfig(noise=0.0, ambiguity=1.0)
    ties = 0
    for seed in range(10):
        env, y, rosters, r = _skeleton(cfg, seed)
        x, vecs, _ = generate_toy_features(y, env, cfg, r, rosters)
        protos = cfg.feature_scale * vecs
        for t in range(len(y)):
            d = ((protos - x[t]) ** 2).sum(axis=1)
            ties += int((d <= d.min() + 1e-12).sum() > 1)
    assert ties > 0


# --- whole sequences ---------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), semi=st.booleans(), shuffle=st.booleans())
def test_generated_sequences_satisfy_invariants(seed, semi, shuffle):
    cfg = SamplerConfig(seq_len=60, semi_supervised=semi, shuffle=shuffle)
    seq = generate_sequence(cfg, seed)
    seq.validate(max_appearances=cfg.max_appearances)
    assert np.array_equal(seq.u, novelty_flags(seq.y, seq.y_tilde))


def test_generation_is_deterministic_and_index_dependent():
    cfg = SamplerConfig(seq_len=50, semi_supervised=True)
    a, b = generate_sequence(cfg, 7, 3), generate_sequence(cfg, 7, 3)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y_tilde, b.y_tilde)
    c = generate_sequence(cfg, 7, 4)
    assert not np.array_equal(a.x, c.x)


def test_parallel_generation_matches_serial():
    cfg = SamplerConfig(seq_len=30)
    serial = generate_sequences(cfg, 1, 4)
    parallel = generate_sequences(cfg, 1, 4, workers=2)
    for s, p in zip(serial, parallel):
        assert np.array_equal(s.x, p.x) and np.array_equal(s.y, p.y)


def test_derive_seed_is_stable_and_name_sensitive():
    assert derive_seed(1, "a") == derive_seed(1, "a")
    assert derive_seed(1, "a") != derive_seed(1, "b")
    assert derive_seed(1, "a") != derive_seed(2, "a")
    assert 0 <= derive_seed(2**40, "x", 5) < 2**63


def test_novelty_flags_ignore_unlabeled_sightings():
    y = np.array([0, 0, 0, 1, 1])
    yt = np.array([UNLABELED, 0, 0, 1, UNLABELED])
    assert novelty_flags(y, yt).tolist() == [True, True, False, True, False]


# --- shuffling ----------------------------------------------------------------------

def test_shuffle_of_length_one_is_identity():
    cfg = SamplerConfig(seq_len=1)
    seq = generate_sequence(cfg, 0)
    out = shuffle_sequence(seq, rng())
    assert np.array_equal(out.x, seq.x) and out.u.tolist() == [True]


def _linear_scan_flags(y, yt):
    out = []
    for t in range(len(y)):
        out.append(not any(y[s] == y[t] and yt[s] != UNLABELED for s in range(t)))
    return out


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_shuffle_preserves_pairs_and_recomputes_flags(seed):
    cfg = SamplerConfig(seq_len=40, semi_supervised=True)
    seq = generate_sequence(cfg, seed)
    out = shuffle_sequence(seq, rng(seed))
    before = sorted((tuple(x), int(c), int(l)) for x, c, l in zip(seq.x, seq.y, seq.y_tilde))
    after = sorted((tuple(x), int(c), int(l)) for x, c, l in zip(out.x, out.y, out.y_tilde))
    assert before == after
    assert out.u.tolist() == _linear_scan_flags(out.y.tolist(), out.y_tilde.tolist())


# --- files ---------------------------------------------------------------------------

def test_empty_file_gives_empty_dataset(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    assert ingest_feature_file(p) == []


def test_round_trip_is_identity(tmp_path):
    cfg = SamplerConfig(seq_len=40, semi_supervised=True, spatial_cue=True)
    seqs = generate_sequences(cfg, 5, 3)
    p = tmp_path / "s.jsonl"
    write_sequences(p, seqs)
    back = ingest_feature_file(p)
    for a, b in zip(seqs, back):
        for f in ("x", "y", "y_tilde", "env", "u"):
            assert np.array_equal(getattr(a, f), getattr(b, f))
        assert a.rosters == b.rosters and a.config_hash == b.config_hash
        assert (a.seed, a.index) == (b.seed, b.index)
    p2 = tmp_path / "again.jsonl"
    write_sequences(p2, back)
    assert p.read_bytes() == p2.read_bytes()


def _record(**step_changes):
    steps = [{"x": [0.0, 1.0], "y": 0, "y_tilde": 0, "env": 0, "u": True},
             {"x": [1.0, 0.0], "y": 1, "y_tilde": 1, "env": 0, "u": True}]
    steps[1].update(step_changes)
    return {"schema_version": 1, "steps": steps}


@pytest.mark.parametrize("record,message", [
    (_record(y_tilde=0), "differs from class"),
    (_record(y=None), "label without class"),
    (_record(x="oops"), "malformed"),
    (_record(u=False), "novelty flag"),
    (_record(x=[1.0]), "inconsistent lengths"),
    ({**_record(), "rosters": {"0": [0]}}, "not in roster"),
    ({**_record(), "schema_version": 99}, "schema_version"),
    ([1, 2], "not a JSON object"),
])
def test_invalid_records_are_rejected_with_line_numbers(tmp_path, record, message):
    p = tmp_path / "bad.jsonl"
    good = json.dumps(_record())
    p.write_text(good + "\n\n" + json.dumps(record) + "\n")
    with pytest.raises(SequenceError, match=rf"line 3: .*{message}"):
        ingest_feature_file(p)


def test_malformed_json_is_rejected(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text("{not json\n")
    with pytest.raises(SequenceError, match="line 1"):
        ingest_feature_file(p)


def test_class_without_any_label_is_rejected():
    seq = Sequence(x=np.zeros((2, 2)), y=np.array([0, 0]),
                   y_tilde=np.array([UNLABELED, UNLABELED]), env=np.zeros(2, int),
                   u=np.array([True, True]))
    with pytest.raises(SequenceError, match="without any labeled"):
        seq.validate()


def test_stats_sidecar_fields():
    cfg = SamplerConfig(seq_len=50, semi_supervised=True)
    stats = sequence_stats(generate_sequences(cfg, 0, 20))
    assert stats["n_sequences"] == 20
    assert len(stats["class_growth"]) == 50
    assert all(a <= b for a, b in zip(stats["class_growth"], stats["class_growth"][1:]))
    assert 0 < stats["labeled_fraction"] < 1
    assert stats["mean_run_length"] > 1
