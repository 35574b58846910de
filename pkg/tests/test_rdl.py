import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gcdlab import rdl
from gcdlab.evaluation import match_and_score
from gcdlab.rdl import DownstreamConfig, ReliabilityTable


def table_from(classes, stab, ids=None):
    classes = np.asarray(classes)
    ids = np.arange(classes.size) if ids is None else np.asarray(ids)
    return ReliabilityTable(ids, classes, np.asarray(stab, dtype=float))


# ---- stability ----

def test_stability_identical_checkpoints():
    q = np.array([0.2, 0.8])
    assert rdl.stability(q, [q, q], num_checkpoints=3) == pytest.approx(2e8, rel=1e-12)


def test_stability_two_point_example():
    d = 0.01
    kl = (1 - d) * math.log((1 - d) / 0.5) + d * math.log(d / 0.5)
    s = rdl.stability(np.array([1 - d, d]), [np.array([0.5, 0.5])], num_checkpoints=2)
    assert s == pytest.approx(1 / kl, abs=1e-9)


def test_stability_rowwise_and_count_check():
    rng = np.random.default_rng(0)
    Q = rng.dirichlet(np.ones(4), size=(3, 6))
    s = rdl.stability(Q[2], [Q[0], Q[1]], num_checkpoints=3)
    assert s.shape == (6,)
    for i in range(6):
        assert s[i] == pytest.approx(rdl.stability(Q[2, i], [Q[0, i], Q[1, i]]), rel=1e-12)
    with pytest.raises(ValueError):
        rdl.stability(Q[2], [Q[0]], num_checkpoints=3)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 5))
def test_stability_permutation_invariant(seed, k):
    rng = np.random.default_rng(seed)
    final, mids = rng.dirichlet(np.ones(3)), list(rng.dirichlet(np.ones(3), size=k))
    shuffled = [mids[i] for i in rng.permutation(k)]
    assert rdl.stability(final, shuffled) == pytest.approx(rdl.stability(final, mids), rel=1e-12)


# ---- buckets ----

def test_four_instances_four_buckets():
    t = rdl.rank_buckets(table_from([0] * 4, [3.0, 1.0, 4.0, 2.0]), 4)
    assert sorted(t.bucket.tolist()) == [0, 1, 2, 3]
    assert t.bucket.tolist() == [2, 0, 3, 1]
    assert np.allclose(sorted(t.rank_fraction), [0, 0.25, 0.5, 0.75])


def test_classes_rank_independently():
    rng = np.random.default_rng(1)
    a, b = rng.random(10), rng.random(7) + 10
    joint = rdl.rank_buckets(table_from([0] * 10 + [1] * 7, np.concatenate([a, b])), 5)
    alone_a = rdl.rank_buckets(table_from([0] * 10, a), 5)
    alone_b = rdl.rank_buckets(table_from([1] * 7, b), 5)
    assert np.array_equal(joint.bucket, np.concatenate([alone_a.bucket, alone_b.bucket]))


def test_bucket_extremes_and_singleton():
    t = rdl.rank_buckets(table_from([0] * 9 + [1], list(range(10))), 4)
    assert t.bucket[0] == 0 and t.bucket[8] == 3
    assert t.bucket[9] == 3


def test_ties_break_by_id():
    t = rdl.rank_buckets(table_from([0] * 3, [1.0, 1.0, 1.0], ids=[7, 3, 5]), 3)
    assert t.bucket.tolist() == [2, 0, 1]


@settings(max_examples=80, deadline=None)
@given(sizes=st.lists(st.integers(1, 60), min_size=1, max_size=6), T=st.integers(1, 12),
       seed=st.integers(0, 10_000))
def test_classwise_retention(sizes, T, seed):
    rng = np.random.default_rng(seed)
    classes = np.repeat(np.arange(len(sizes)), sizes)
    stab = rng.choice([0.5, 1.0, 2.0], size=classes.size) if seed % 2 else rng.random(classes.size)
    t = rdl.rank_buckets(table_from(classes, stab), T)
    for c, n in enumerate(sizes):
        b = t.bucket[classes == c]
        assert (b == T - 1).sum() >= math.ceil(n / T)
        assert b.max() == T - 1
        if n >= 2:
            assert b.min() == 0


def adversarial_table():
    head = np.linspace(10, 20, 100)
    tail = np.array([1.0, 2.0, 3.0, 4.0])
    return table_from([0] * 100 + [1] * 4, np.concatenate([head, tail]))


def test_global_cut_drops_the_tail_but_buckets_do_not():
    t = adversarial_table()
    keep = rdl.global_r_keep(t.stability, 25)
    assert keep[100:].sum() == 0
    assert (~keep).sum() == 26
    rdl.rank_buckets(t, 4)
    assert sorted(t.bucket[100:].tolist()) == [0, 1, 2, 3]
    head_spread = np.bincount(t.bucket[:100], minlength=4)
    assert np.all(head_spread > 0)


def test_reliability_csv_round_trip(tmp_path):
    t = rdl.rank_buckets(table_from([0, 0, 1, 1, 1], [0.1, 0.3, 5.0, 2.0, 1e8]), 3)
    t.to_csv(tmp_path / "r.csv")
    back = ReliabilityTable.from_csv(tmp_path / "r.csv", 3)
    assert np.array_equal(back.ids, t.ids) and np.array_equal(back.bucket, t.bucket)
    assert np.array_equal(back.stability, t.stability)
    assert np.array_equal(back.pseudo_class, t.pseudo_class)


# ---- kappa ----

def test_kappa_examples():
    assert rdl.kappa(2, 5, 10) == 1.0
    assert rdl.kappa(5, 5, 10) == 1.0
    assert rdl.kappa(6, 0, 10) == pytest.approx(0.8, abs=1e-12)
    assert rdl.kappa(10, 0, 10) == 0.0


@given(T=st.integers(1, 40), tb=st.integers(0, 39))
def test_kappa_bounds_and_monotone(T, tb):
    tb = min(tb, T - 1)
    k = [rdl.kappa(t, tb, T) for t in range(T + 1)]
    assert all(0.0 <= v <= 1.0 for v in k)
    assert all(a >= b for a, b in zip(k, k[1:]))
    for t in range(T + 1):
        assert all(rdl.kappa(t, a, T) <= rdl.kappa(t, a + 1, T) for a in range(T - 1))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), T=st.integers(1, 15))
def test_effective_weight_non_increasing(seed, T):
    rng = np.random.default_rng(seed)
    t = rdl.rank_buckets(table_from(rng.integers(0, 4, 50), rng.random(50)), T)
    mass = [np.sum(rdl.kappa(e, t.bucket, T)) for e in range(T + 1)]
    assert all(a >= b - 1e-12 for a, b in zip(mass, mass[1:]))


# ---- arms ----

def test_parse_reliability_arm():
    assert rdl.parse_reliability_arm("rdl") == ("rdl", None)
    assert rdl.parse_reliability_arm("none") == ("none", None)
    assert rdl.parse_reliability_arm("global_r:25") == ("global_r", 25.0)
    for bad in ("global_r:100", "global_r:-1", "classwise"):
        with pytest.raises(ValueError):
            rdl.parse_reliability_arm(bad)


def test_unlabeled_weights_per_arm():
    t = rdl.rank_buckets(table_from([0] * 8, np.arange(8.0)), 4)
    assert np.array_equal(rdl.unlabeled_weights("rdl", 0, t, 4), np.ones(8))
    assert rdl.unlabeled_weights("global_r:50", 3, t, 4).tolist() == [0] * 4 + [1] * 4
    assert np.array_equal(rdl.unlabeled_weights("none", 3, t, 4), np.ones(8))


def test_corruption_hits_least_stable_per_class():
    rng = np.random.default_rng(0)
    pseudo = np.repeat([0, 1, 2], [10, 20, 5])
    stab = rng.random(35)
    out, hit = rdl.corrupt_pseudo_labels(pseudo, stab, 3, 0.2, rng)
    assert hit.sum() == 2 + 4 + 1
    assert np.all(out[hit] != pseudo[hit]) and np.array_equal(out[~hit], pseudo[~hit])
    for c in range(3):
        idx = np.flatnonzero(pseudo == c)
        worst = idx[np.argsort(stab[idx])[: hit[idx].sum()]]
        assert hit[worst].all()


# ---- downstream ----

def toy_problem(seed=0, C=4, known=2, n=200):
    rng = np.random.default_rng(seed)
    protos = rng.standard_normal((C, 6)) * 2
    y = rng.integers(0, C, n)
    X = protos[y] + 0.3 * rng.standard_normal((n, 6))
    lab = (y < known) & (rng.random(n) < 0.5)
    return X[lab], y[lab], X[~lab], y[~lab], C


def test_unit_weights_match_unweighted_path():
    X_l, y_l, X_u, y_u, C = toy_problem()
    cfg = DownstreamConfig(epochs=5, batch_size=32)
    a, hist = rdl.train_downstream(X_l, y_l, X_u, y_u, C, cfg, np.random.default_rng(3),
                                   weight_fn=lambda e: np.ones(len(y_u)))
    b, losses = rdl.train_downstream_unweighted(X_l, y_l, X_u, y_u, C, cfg, np.random.default_rng(3))
    assert [h["loss"] for h in hist] == losses
    assert np.array_equal(a.W, b.W) and np.array_equal(a.b, b.b)


def test_zero_weights_leave_novel_classes_unlearned():
    X_l, y_l, X_u, y_u, C = toy_problem(1)
    cfg = DownstreamConfig(epochs=10)
    runs = {}
    for w in (0.0, 1.0):
        clf, hist = rdl.train_downstream(X_l, y_l, X_u, y_u, C, cfg, np.random.default_rng(0),
                                         weight_fn=lambda e: np.full(len(y_u), w))
        runs[w] = (clf.predict(X_u), hist)
    pred0, hist0 = runs[0.0]
    # novel outputs only ever receive negative gradient
    assert np.mean(pred0 >= 2) < 0.02
    assert hist0[-1]["total_unlabeled_weight"] == 0
    acc = {w: match_and_score(p, y_u, [0, 1], C, C).acc_all for w, (p, _) in runs.items()}
    assert acc[1.0] > acc[0.0] + 0.2


def test_weight_mass_reported_per_class():
    X_l, y_l, X_u, y_u, C = toy_problem(2)
    t = rdl.rank_buckets(table_from(y_u, np.random.default_rng(0).random(len(y_u))), 6)
    _, hist = rdl.train_downstream(X_l, y_l, X_u, y_u, C, DownstreamConfig(epochs=6),
                                   np.random.default_rng(0), lambda e: rdl.kappa(e, t.bucket, 6))
    masses = [h["total_unlabeled_weight"] for h in hist]
    assert masses[0] == len(y_u)
    assert all(a >= b for a, b in zip(masses, masses[1:]))
    assert sum(hist[-1]["unlabeled_weight_mass"]) == pytest.approx(masses[-1])


def test_nonfinite_downstream_loss():
    X_l, y_l, X_u, y_u, C = toy_problem(3)
    with pytest.raises(rdl.NonFiniteDownstreamLoss) as err:
        rdl.train_downstream(X_l, y_l, X_u, y_u, C, DownstreamConfig(epochs=2), np.random.default_rng(0),
                             lambda e: np.full(len(y_u), np.nan))
    assert err.value.step == 0


def test_classifier_json_round_trip():
    X_l, y_l, X_u, y_u, C = toy_problem(4)
    clf, _ = rdl.train_downstream(X_l, y_l, X_u, y_u, C, DownstreamConfig(epochs=2), np.random.default_rng(0))
    back = rdl.DownstreamClassifier.from_json(clf.to_json())
    assert np.array_equal(back.W, clf.W) and np.array_equal(back.b, clf.b)
