import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gcdlab.encoder import (EmbeddingQueue, EncoderParams, MomentumEncoder, backward, forward,
                            input_jacobian, load_checkpoint, momentum_update, queue_push,
                            queue_views, save_checkpoint)
from gcdlab.gradcheck import numerical_grad, rel_error


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


@pytest.fixture
def params():
    return EncoderParams.init(np.random.default_rng(0), 6, 10, 4)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_forward_unit_norm(seed):
    rng = np.random.default_rng(seed)
    p = EncoderParams.init(rng, 5, 7, 3)
    Z = forward(p, rng.standard_normal((9, 5)) * 3)
    assert np.allclose(np.linalg.norm(Z, axis=1), 1.0)


def test_forward_deterministic_and_batch_consistent(params):
    X = np.random.default_rng(1).standard_normal((4, 6))
    Z = forward(params, X)
    assert np.array_equal(Z, forward(params, X))
    assert np.allclose(forward(params, X[2]), Z[2])


def test_forward_rejects_nonfinite(params):
    with pytest.raises(ValueError):
        forward(params, np.full((1, 6), np.nan))


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(2)
    for _ in range(10):
        p = EncoderParams.init(rng, 5, 8, 4)
        X = rng.standard_normal((3, 5))
        R = rng.standard_normal((3, 4))
        _, cache = forward(p, X, return_cache=True)
        grads, dX = backward(p, cache, R)
        for name, value in p.tensors.items():
            def probe(v, name=name):
                q = p.copy()
                q.tensors[name] = v
                return float(np.sum(R * forward(q, X)))
            assert rel_error(grads[name], numerical_grad(probe, value)) < 1e-6, name
        num_dX = numerical_grad(lambda x: float(np.sum(R * forward(p, x))), X)
        assert rel_error(dX, num_dX) < 1e-6


def test_input_jacobian(params):
    x = np.random.default_rng(3).standard_normal(6)
    J = input_jacobian(params, x)
    for k in range(J.shape[0]):
        num = numerical_grad(lambda v: float(forward(params, v)[k]), x)
        assert rel_error(J[k], num) < 1e-6


def test_momentum_examples(params):
    online = params
    target = MomentumEncoder(EncoderParams.init(np.random.default_rng(9), 6, 10, 4), 0.0)
    new = momentum_update(online, target)
    assert all(np.array_equal(new.params[k], online[k]) for k in online.tensors)
    frozen = MomentumEncoder(target.params.copy(), 1.0)
    new = momentum_update(online, frozen)
    assert all(np.array_equal(new.params[k], frozen.params[k]) for k in online.tensors)
    # scalar probe
    o = EncoderParams({"w": np.array([0.7])})
    t = MomentumEncoder(EncoderParams({"w": np.array([0.5])}), 0.9)
    assert momentum_update(o, t).params["w"][0] == pytest.approx(0.52, abs=1e-12)


def test_momentum_contraction(params):
    target = MomentumEncoder(EncoderParams.init(np.random.default_rng(5), 6, 10, 4), 0.8)
    gaps = []
    for _ in range(20):
        gaps.append(np.linalg.norm(target.params.flat() - params.flat()))
        target = momentum_update(params, target)
    assert all(a >= b for a, b in zip(gaps, gaps[1:]))


def test_momentum_shape_mismatch(params):
    other = MomentumEncoder(EncoderParams.init(np.random.default_rng(0), 6, 11, 4))
    with pytest.raises(ValueError):
        momentum_update(params, other)


def test_queue_fifo():
    q = EmbeddingQueue(2, 2)
    for i, v in enumerate([[1, 0], [0, 1], [1, 1]]):
        queue_push(q, i, unit(v))
    assert list(q.ids) == [1, 2]
    assert np.allclose(q.vectors[1], unit([1, 1]))


def test_queue_views_self_exclusion_and_positives():
    q = EmbeddingQueue(8, 2)
    for i, lab in zip([10, 11, 12], [1, 1, 2]):
        queue_push(q, i, unit([1, i]), lab)
    hat, pos = queue_views(q, 11, 1)
    assert len(hat) == len(q) - 1
    assert len(pos) == 1
    hat, pos = queue_views(q, 99, 1)
    assert len(hat) == 3 and len(pos) == 2
    _, pos = queue_views(q, 99, None)
    assert len(pos) == 0


def test_queue_excludes_by_id_not_value():
    q = EmbeddingQueue(4, 2)
    z = unit([1, 2])
    queue_push(q, 1, z)
    queue_push(q, 2, z)
    hat, _ = queue_views(q, 1)
    # the duplicate vector under another id must stay
    assert len(hat) == 1 and np.allclose(hat[0], z)


@settings(max_examples=50, deadline=None)
@given(labels=st.lists(st.integers(-1, 3), min_size=1, max_size=12), query=st.integers(0, 11),
       qlabel=st.integers(0, 3))
def test_queue_label_purity(labels, query, qlabel):
    rng = np.random.default_rng(len(labels))
    q = EmbeddingQueue(16, 3)
    V = rng.standard_normal((len(labels), 3))
    q.push(np.arange(len(labels)), V / np.linalg.norm(V, axis=1, keepdims=True), labels)
    hat, pos = q.views(query, qlabel)
    expected = [i for i, lab in enumerate(labels) if lab == qlabel and i != query]
    assert len(pos) == len(expected)
    own = q.vectors[q.ids == query]
    for row in pos:
        assert any(np.array_equal(row, h) for h in hat)
        assert not any(np.array_equal(row, o) for o in own)


def test_queue_rejects_non_unit():
    with pytest.raises(ValueError):
        EmbeddingQueue(2, 2).push([0], [[2.0, 0.0]])


def test_checkpoint_round_trip(tmp_path, params):
    save_checkpoint(tmp_path / "c.json", params.tensors, {"epoch": 3})
    tensors, meta = load_checkpoint(tmp_path / "c.json")
    assert meta == {"epoch": 3}
    assert all(np.array_equal(tensors[k], params[k]) for k in params.tensors)
