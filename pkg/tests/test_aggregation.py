import numpy as np
import pytest
from hypothesis import example, given, settings, strategies as st

from fedtrust.aggregation import (AGGREGATOR_KINDS, AggregatorSpec, QuantizedUpdate, aggregate, combine_updates,
                                  coordinate_median, dequantize, fltrust_weights, geometric_median, krum_select,
                                  quantize)
from fedtrust.errors import ConfigurationError, ShapeError
from fedtrust.model import GradientUpdate, build_model
from fedtrust.rng import stream


def _model(seed=0):
    return build_model("mlp_bn", 4, [6], 3, seed)


def _updates(vectors, sizes=None):
    sizes = sizes or [10] * len(vectors)
    return [GradientUpdate(k, 1, np.asarray(v, np.float32), True, n) for k, (v, n) in enumerate(zip(vectors, sizes))]


@pytest.mark.parametrize("kind", AGGREGATOR_KINDS)
def test_unanimous_input_is_a_fixed_point(kind):
    spec = AggregatorSpec(kind, krum_f=1)
    g = _model()
    mask = g.layout.shared_mask(spec.bn_local)
    u = (0.1 * stream(0, "u").standard_normal(int(mask.sum()))).astype(np.float32)
    out = aggregate(spec, g, _updates([u] * 5, [3, 9, 4, 10, 7]), reference=u)
    expect = g.values.copy()
    expect[mask] = (expect[mask].astype(np.float64) + u).astype(np.float32)
    assert np.allclose(out.values, expect, atol=1e-6)


def test_fedbnp_one_hot_weight_picks_client():
    g = _model()
    d = g.layout.shared_size(True)
    rng = stream(1, "ups")
    ups = [rng.standard_normal(d).astype(np.float32) for _ in range(4)]
    out = aggregate(AggregatorSpec("fedbnp"), g, _updates(ups), weights=[0, 0, 1, 0])
    mask = g.layout.shared_mask(True)
    assert np.array_equal(out.values[mask], (g.values[mask].astype(np.float64) + ups[2]).astype(np.float32))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 8))
def test_fedbnp_is_linear_in_weights(seed, n):
    g = _model()
    d = g.layout.shared_size(True)
    rng = stream(seed, "lin")
    G = rng.standard_normal((n, d))
    w = rng.dirichlet(np.ones(n))
    out = aggregate(AggregatorSpec("fedbnp"), g, _updates(list(G)), weights=w)
    mask = g.layout.shared_mask(True)
    direct = g.values[mask].astype(np.float64) + G.astype(np.float32).astype(np.float64).T @ w
    assert np.abs(out.values[mask] - direct).max() < 1e-6


@pytest.mark.parametrize("kind", ["fedbn", "fedbnp"])
def test_bn_affine_slices_are_untouched(kind):
    g = _model()
    d = g.layout.shared_size(True)
    ups = [stream(s, "bn").standard_normal(d).astype(np.float32) for s in range(3)]
    out = aggregate(AggregatorSpec(kind), g, _updates(ups))
    bn = g.layout.bn_mask()
    assert bn.any()
    assert out.values[bn].tobytes() == g.values[bn].tobytes()
    assert not np.array_equal(out.values[~bn], g.values[~bn])


def test_fedavg_weights_by_data_size():
    G = np.array([[1.0, 0.0], [0.0, 1.0]])
    delta = combine_updates(AggregatorSpec("fedavg"), _updates(list(G), [30, 10]))
    assert np.allclose(delta, [0.75, 0.25])
    prox = combine_updates(AggregatorSpec("fedprox"), _updates(list(G), [30, 10]))
    assert np.array_equal(delta, prox)


def test_coordinate_median_examples():
    assert np.array_equal(coordinate_median(np.array([[1.0, 0], [0, 1], [100, 100]])), [1, 1])
    assert np.array_equal(coordinate_median(np.array([[1.0], [2], [4], [10]])), [3])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(3, 9))
def test_krum_returns_one_of_the_inputs(seed, n):
    G = stream(seed, "krum").standard_normal((n, 5))
    f = (n - 3) // 2
    out = combine_updates(AggregatorSpec("krum", krum_f=f), _updates(list(G)))
    assert any(np.array_equal(out, row) for row in G.astype(np.float32).astype(np.float64))


def test_krum_ignores_outliers_and_breaks_ties_low():
    G = np.array([[0.0, 0], [0.1, 0], [0, 0.1], [50, 50], [-40, 60]])
    assert krum_select(G, 1) in (0, 1, 2)
    assert krum_select(np.zeros((5, 2)), 1) == 0
    with pytest.raises(ConfigurationError):
        krum_select(np.zeros((4, 2)), 1)


def _grid_oracle(P, lo=-3.0, hi=3.0):
    # coarse-to-fine grid search on sum of distances
    cx, cy, half = (lo + hi) / 2, (lo + hi) / 2, (hi - lo) / 2
    for _ in range(30):
        xs = np.linspace(cx - half, cx + half, 41)
        X, Y = np.meshgrid(xs, np.linspace(cy - half, cy + half, 41))
        pts = np.stack([X.ravel(), Y.ravel()], axis=1)
        obj = np.linalg.norm(pts[:, None, :] - P[None], axis=2).sum(axis=1)
        cx, cy = pts[np.argmin(obj)]
        half /= 4
    return np.array([cx, cy])


@pytest.mark.parametrize("seed", range(5))
def test_geometric_median_matches_grid_oracle(seed):
    P = stream(seed, "geo").uniform(-2, 2, (3, 2))
    z = geometric_median(P, iters=10_000, tol=1e-12)
    assert np.abs(z - _grid_oracle(P)).max() < 1e-4


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 8))
@example(seed=332, n=3)  # minimiser on an input point
@example(seed=511, n=6)  # minimiser just off an input point
def test_geometric_median_beats_every_input_point(seed, n):
    G = stream(seed, "geo-obj").standard_normal((n, 4))

    def obj(x):
        return np.linalg.norm(G - x, axis=1).sum()

    z = geometric_median(G)
    assert obj(z) <= min(obj(g) for g in G) + 1e-6


def test_geometric_median_returns_input_point_on_hit():
    G = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1e-12]])
    z = geometric_median(G)
    assert any(np.array_equal(z, g) for g in G)


def test_fltrust_weights_and_fallback():
    ref = np.array([1.0, 0.0])
    w = fltrust_weights(np.array([[2.0, 0.0], [-1.0, 0.0], [1.0, 1.0]]), ref)
    # relu(cos) * |ref| / |g|: 0.5, 0, 0.5
    assert np.allclose(w, [0.5, 0.0, 0.5])
    assert fltrust_weights(np.array([[-1.0, 0.0]]), ref) is None
    out = combine_updates(AggregatorSpec("fltrust_like"), _updates([[-1.0, 0.0], [0.0, -2.0]]), reference=ref)
    assert np.array_equal(out, ref)
    with pytest.raises(ConfigurationError):
        combine_updates(AggregatorSpec("fltrust_like"), _updates([[1.0, 0.0]]))


def test_aggregation_errors():
    with pytest.raises(ConfigurationError):
        AggregatorSpec("bulyan")
    with pytest.raises(ConfigurationError):
        combine_updates(AggregatorSpec("fedavg"), [])
    with pytest.raises(ShapeError):
        combine_updates(AggregatorSpec("fedavg"), _updates([[1.0], [1.0, 2.0]]))
    with pytest.raises(ShapeError):
        aggregate(AggregatorSpec("fedavg"), _model(), _updates([[1.0, 2.0]]))
    assert AggregatorSpec("fedbnp").client_mu > 0 and AggregatorSpec("fedbn").client_mu == 0


# --------------------------------------------------------------------------
# QSGD


def test_quantize_preserves_dimension_and_signs():
    v = stream(0, "q").standard_normal(500)
    q = quantize(v, 8, 1)
    out = dequantize(q)
    assert out.shape == v.shape
    nz = out != 0
    assert np.array_equal(np.sign(out[nz]), np.sign(v[nz]))
    assert q.levels.max() <= q.level_count


def test_zero_vector_round_trips_exactly():
    q = quantize(np.zeros(10), 8)
    assert q.norm == 0.0 and not q.levels.any()
    assert np.array_equal(dequantize(q), np.zeros(10))


def test_quantize_is_unbiased():
    v = stream(3, "unbiased").standard_normal(20)
    mean = np.mean([dequantize(quantize(v, 8, s)) for s in range(10_000)], axis=0)
    assert np.abs(mean - v).max() < 1e-2 * np.abs(v).max()


def test_quantize_is_unbiased_at_two_bits():
    v = stream(4, "unbiased").standard_normal(20)
    mean = np.mean([dequantize(quantize(v, 2, s)) for s in range(10_000)], axis=0)
    # one magnitude level, so the per-coordinate spread is about |v| / 2
    assert np.abs(mean - v).max() < 5 * np.linalg.norm(v) / 2 / np.sqrt(10_000)


def test_quantize_is_deterministic_per_seed():
    v = stream(5, "det").standard_normal(100)
    assert quantize(v, 8, 7).levels.tobytes() == quantize(v, 8, 7).levels.tobytes()
    assert not np.array_equal(quantize(v, 8, 7).levels, quantize(v, 8, 8).levels)


@pytest.mark.parametrize("d", [10_000, 100_000])
def test_eight_bit_size_is_a_quarter(d):
    q = quantize(stream(0, "size").standard_normal(d), 8)
    blob = q.to_bytes()
    assert len(blob) == q.serialized_size()
    assert len(blob) <= 0.26 * 4 * d


@pytest.mark.parametrize("bits", [1, 3, 8, 12, 16])
def test_serialization_round_trip(bits):
    q = quantize(stream(bits, "ser").standard_normal(37), bits, 2)
    back = QuantizedUpdate.from_bytes(q.to_bytes())
    assert back.bits == bits and back.norm == q.norm
    assert np.array_equal(back.levels, q.levels)
    assert np.array_equal(dequantize(back), dequantize(q))


def test_bits_range():
    with pytest.raises(ConfigurationError):
        quantize(np.ones(3), 0)
    with pytest.raises(ConfigurationError):
        quantize(np.ones(3), 17)
