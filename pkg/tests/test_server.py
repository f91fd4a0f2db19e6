import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedlab.errors import ConfigError, LayoutError
from fedlab.fedcore import LocalRoundResult
from fedlab.models import ModelArch, init_model
from fedlab.numerics import ParamVector
from fedlab.server import (
    AggregationWeights,
    WeightDeltaLog,
    aggregate_centroid_similarity,
    aggregate_size_weighted,
    default_scheme,
    dispatch_update,
    record_weight_delta,
    sample_clients,
)


def pv(*vals):
    return ParamVector([("w", np.array(vals, dtype=np.float64))])


# -- sampling -----------------------------------------------------------------------

def test_full_participation():
    assert sample_clients(7, 1.0, np.random.default_rng(0)) == list(range(7))


def test_ten_percent_of_twenty_is_two():
    ids = sample_clients(20, 0.1, np.random.default_rng(0))
    assert len(ids) == 2 and ids == sorted(set(ids))


def test_sampling_ceil_and_float_guard():
    assert len(sample_clients(10, 0.7, np.random.default_rng(0))) == 7
    assert len(sample_clients(10, 0.71, np.random.default_rng(0))) == 8


def test_sampling_range_and_errors():
    for seed in range(10):
        k = len(sample_clients(20, (0.2, 0.4), np.random.default_rng(seed)))
        assert 4 <= k <= 8
    with pytest.raises(ConfigError):
        sample_clients(5, 0.0, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        sample_clients(5, (0.5, 0.2), np.random.default_rng(0))


def test_sampling_deterministic():
    a = sample_clients(50, 0.3, np.random.default_rng(4))
    assert a == sample_clients(50, 0.3, np.random.default_rng(4))


# -- size weighted ------------------------------------------------------------------

def test_size_weighted_hand_example():
    out = aggregate_size_weighted([pv(0.0), pv(4.0)], [1, 3])
    assert out["w"][0] == 3.0


def test_size_weighted_identical_and_single():
    m = pv(0.1, -2.3, 7.7)
    assert aggregate_size_weighted([m, m.copy(), m.copy()], [1, 5, 2]).bitwise_equal(m)
    assert aggregate_size_weighted([m], [9]).bitwise_equal(m)


def test_size_weighted_order_by_client_id():
    a, b, c = pv(1.0, 0.3), pv(-2.0, 0.1), pv(0.7, 9.0)
    x = aggregate_size_weighted([a, b, c], [3, 1, 2], ids=[5, 2, 9])
    y = aggregate_size_weighted([b, c, a], [1, 2, 3], ids=[2, 9, 5])
    assert x.bitwise_equal(y)


def test_size_weighted_errors():
    with pytest.raises(LayoutError):
        aggregate_size_weighted([], [])
    with pytest.raises(LayoutError):
        aggregate_size_weighted([pv(1.0), pv(1.0, 2.0)], [1, 1])
    with pytest.raises(ConfigError):
        aggregate_size_weighted([pv(1.0), pv(2.0)], [0, 0])


# -- centroid similarity -------------------------------------------------------------

def test_centroid_identical_models_uniform():
    m = pv(1.0, 2.0, 3.0)
    glob, w = aggregate_centroid_similarity([m, m, m, m], [1, 2, 3, 4])
    np.testing.assert_allclose(w.iota, [0.25] * 4, rtol=0, atol=1e-12)
    assert glob.bitwise_equal(m)
    assert not w.fallback


def test_centroid_orthogonal_equal_norm():
    _, w = aggregate_centroid_similarity([pv(1.0, 0.0), pv(0.0, 1.0)], [1, 1])
    np.testing.assert_allclose(w.iota, [0.5, 0.5], atol=1e-12)
    np.testing.assert_allclose(w.raw_similarity, [np.sqrt(0.5)] * 2, atol=1e-12)


def test_centroid_clamps_negative_similarity():
    # Third model points away from the average: it gets only the floor weight.
    _, w = aggregate_centroid_similarity([pv(1.0, 0.0), pv(1.0, 0.1), pv(-0.2, 0.0)], [5, 5, 1])
    assert w.raw_similarity[2] < 0
    assert w.iota[2] == pytest.approx(1e-6 / (w.raw_similarity[0] + w.raw_similarity[1] + 1e-6))
    assert sum(w.iota) == pytest.approx(1.0, abs=1e-12)


def test_centroid_fallback_when_average_vanishes():
    models = [pv(1.0, 2.0), pv(-1.0, -2.0)]
    glob, w = aggregate_centroid_similarity(models, [1, 1], ids=[3, 7])
    assert w.fallback and w.iota == w.alpha == [0.5, 0.5]
    assert w.raw_similarity == [0.0, 0.0]
    assert not glob["w"].any()


def test_centroid_zero_model_scores_floor():
    _, w = aggregate_centroid_similarity([pv(1.0, 0.0), pv(0.0, 0.0)], [1, 1])
    assert not w.fallback and w.raw_similarity[1] == 0.0
    assert w.iota[1] == pytest.approx(1e-6 / (1 + 1e-6))


vec = st.lists(st.floats(-10, 10, allow_nan=False, allow_subnormal=False), min_size=4, max_size=4)


@settings(max_examples=60, deadline=None)
@given(st.lists(vec, min_size=2, max_size=5), st.floats(0.1, 100))
def test_centroid_scale_invariance(rows, scale):
    models = [pv(*r) for r in rows]
    if any(np.linalg.norm(r) < 1e-3 for r in rows):
        return
    sizes = list(range(1, len(models) + 1))
    try:
        _, w1 = aggregate_centroid_similarity(models, sizes)
    except ValueError:
        return  # degenerate average
    _, w2 = aggregate_centroid_similarity([m.map(lambda a: a * scale) for m in models], sizes)
    np.testing.assert_allclose(w1.iota, w2.iota, rtol=0, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.lists(vec, min_size=2, max_size=5), st.randoms(use_true_random=False))
def test_centroid_permutation_equivariance(rows, rnd):
    if any(np.linalg.norm(r) < 1e-3 for r in rows):
        return
    models = [pv(*r) for r in rows]
    ids = list(range(len(models)))
    sizes = [i + 1 for i in ids]
    perm = ids[:]
    rnd.shuffle(perm)
    try:
        g1, w1 = aggregate_centroid_similarity(models, sizes, ids)
    except ValueError:
        return
    g2, w2 = aggregate_centroid_similarity([models[k] for k in perm], [sizes[k] for k in perm], perm)
    assert g1.bitwise_equal(g2)
    by_id = dict(zip(w2.client_ids, w2.iota))
    np.testing.assert_allclose([by_id[i] for i in ids], w1.iota, rtol=0, atol=1e-15)


# -- weight deltas ---------------------------------------------------------------------

def _w(ids, iota, r):
    return AggregationWeights(ids, list(iota), list(iota), round=r)


def test_weight_delta_first_round_empty():
    log = record_weight_delta(WeightDeltaLog(), None, _w([0, 1], [0.5, 0.5], 1))
    assert log.rows == [] and log.gaps == []


def test_weight_delta_values_and_gaps():
    log = WeightDeltaLog()
    record_weight_delta(log, _w([0, 1], [0.5, 0.5], 1), _w([0, 1], [0.5, 0.5], 2))
    record_weight_delta(log, _w([0, 1], [0.5, 0.5], 2), _w([0, 1], [0.4, 0.6], 3))
    record_weight_delta(log, _w([0, 1], [0.4, 0.6], 3), _w([1, 2], [0.5, 0.5], 4))
    assert log.deltas_for(2) == [0.0, 0.0]
    assert log.deltas_for(3) == pytest.approx([-0.1, 0.1])
    assert log.gaps == [4] and log.deltas_for(4) == []
    assert log.max_abs(2, 2) == 0.0 and log.max_abs(1, 4) == pytest.approx(0.1)


# -- dispatch -------------------------------------------------------------------------

ARCH = ModelArch(3, 2, (4,), 3)


def _result(cid, model, upload=None, n=10):
    return LocalRoundResult(cid, model, model.params() if upload is None else upload, n, [])


def test_default_schemes():
    assert default_scheme("fedecouple") == "centroid_similarity"
    assert all(default_scheme(k) == "size_weighted" for k in ("fedavg", "fedprox", "ftfedavg", "fedrep", "local"))


def test_dispatch_fedrep_keeps_global_head():
    glob = init_model(ARCH, 0)
    a, b = init_model(ARCH, 1), init_model(ARCH, 2)
    res = [_result(0, a, a.extractor), _result(1, b, b.extractor)]
    new, w = dispatch_update("size_weighted", "fedrep", res, glob)
    assert new.classifier.bitwise_equal(glob.classifier)
    assert new.extractor.bitwise_equal(aggregate_size_weighted([a.extractor, b.extractor], [10, 10]))
    assert w.iota == w.alpha == [0.5, 0.5]


def test_dispatch_scheme_override():
    glob = init_model(ARCH, 0)
    res = [_result(i, init_model(ARCH, i + 1), n=i + 1) for i in range(3)]
    sw, wsw = dispatch_update("size_weighted", "fedecouple", res, glob)
    cs, wcs = dispatch_update("centroid_similarity", "fedecouple", res, glob)
    assert wsw.iota == pytest.approx([1 / 6, 2 / 6, 3 / 6])
    assert wcs.iota != wsw.iota and not sw.bitwise_equal(cs)
    with pytest.raises(ConfigError):
        dispatch_update("median", "fedavg", res, glob)
