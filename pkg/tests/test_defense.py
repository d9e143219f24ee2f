import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from shapleak.defense import (
    DefenseConfig,
    apply_defense,
    apply_topk,
    calibrated_range,
    quantize,
    quantize_values,
    rank_by_shapley_variance,
)
from shapleak.explain import Explanation, ShapleyExplainer

finite = st.floats(-2, 2, allow_nan=False)


def _expl(values):
    return Explanation(np.asarray(values, dtype=np.float64), 0)


def test_two_levels_snap():
    got = quantize_values([0.49, 0.51, 0.5, -3.0, 7.0], 2, 0.0, 1.0)
    np.testing.assert_array_equal(got, [0.0, 1.0, 0.0, 0.0, 1.0])


def test_grid_points_are_fixed():
    grid = np.linspace(-0.3, 0.7, 11)
    np.testing.assert_allclose(quantize_values(grid, 11, -0.3, 0.7), grid, atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 12, elements=finite), st.integers(2, 50))
def test_idempotent(S, k):
    once = quantize_values(S, k, -1.0, 1.0)
    np.testing.assert_array_equal(quantize_values(once, k, -1.0, 1.0), once)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 12, elements=st.floats(-1, 1)), st.integers(2, 50))
def test_distortion_at_most_half_step(S, k):
    q = quantize_values(S, k, -1.0, 1.0)
    assert np.abs(q - S).max() <= (2.0 / (k - 1)) / 2 + 1e-12


def test_per_feature_grid_and_nan_passthrough():
    S = np.array([[0.26, np.nan], [0.9, 5.2]])
    q = quantize_values(S, 3, np.array([0.0, 4.0]), np.array([1.0, 6.0]))
    np.testing.assert_array_equal(q, [[0.5, np.nan], [1.0, 5.0]])


@pytest.mark.parametrize("levels,lo,hi", [(1, 0, 1), (4, 1, 1), (4, 2, 1)])
def test_quantize_rejects(levels, lo, hi):
    with pytest.raises(ValueError):
        quantize_values([0.1], levels, lo, hi)


def test_quantize_explanation_keeps_metadata():
    e = Explanation(np.array([0.12, -0.4]), 3, "sampled", 50, "train:1", 9)
    q = quantize(e, 5, (-0.5, 0.5))
    np.testing.assert_allclose(q.shapley, [0.0, -0.5])
    assert (q.target_class, q.nu, q.seed) == (3, 50, 9)


def test_calibrated_range_widens_flat_columns():
    lo, hi = calibrated_range(np.array([[0.0, 1.0], [0.5, 1.0]]))
    assert lo[0] == 0.0 and hi[0] == 0.5
    assert lo[1] < 1.0 < hi[1]


def test_rank_constant_last_and_ties_stable():
    rng = np.random.default_rng(0)
    S = np.column_stack([rng.normal(0, 1, 50), np.full(50, 0.3), rng.normal(0, 3, 50),
                         rng.normal(0, 1, 50)])
    order = rank_by_shapley_variance(S)
    assert order[0] == 2 and order[-1] == 1
    np.testing.assert_array_equal(rank_by_shapley_variance(np.ones((5, 3))), [0, 1, 2])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_rank_invariant_to_row_order(seed):
    rng = np.random.default_rng(seed)
    S = rng.normal(size=(20, 5)) * rng.uniform(0.1, 3, size=5)
    want = rank_by_shapley_variance(S)
    np.testing.assert_array_equal(rank_by_shapley_variance(S[rng.permutation(20)]), want)


def test_rank_needs_two_rows():
    with pytest.raises(ValueError):
        rank_by_shapley_variance(np.ones((1, 3)))


def test_rank_prefers_informative_features(small_split, small_models):
    roles = small_split.train.meta["roles"]
    ex = ShapleyExplainer(nu=30, target_class=0, random_state=0).fit(
        small_models["MLP"], small_split.train.features[0])
    order = list(rank_by_shapley_variance(ex.transform(small_split.val.features[:80])))
    pos = {r: np.mean([order.index(i) for i, x in enumerate(roles) if x == r])
           for r in set(roles)}
    assert pos["key"] < pos["noise"]
    assert pos["redundant"] < pos["noise"]


def test_topk_identity_and_empty():
    e = _expl([0.1, -0.2, 0.3])
    full = apply_topk(e, [0, 1, 2])
    np.testing.assert_array_equal(full.shapley, e.shapley)
    assert full.released.all()
    none = apply_topk(e, [])
    assert not none.released.any() and np.isnan(none.shapley).all()


def test_topk_leaves_values_untouched():
    e = _expl(np.arange(14) / 10)
    k = math.ceil(0.2 * 14)
    assert k == 3
    out = apply_topk(e, [5, 0, 9])
    assert out.released.sum() == 3
    np.testing.assert_array_equal(out.shapley[[0, 5, 9]], e.shapley[[0, 5, 9]])
    with pytest.raises(ValueError):
        apply_topk(e, [14])


def test_defense_order_and_resolution():
    e = _expl([0.26, 0.74, 0.1])
    cfg = DefenseConfig(quantize_levels=3, quantize_range=(0.0, 1.0), topk=2, topk_indices=(1, 2))
    out = apply_defense(e, cfg)
    np.testing.assert_array_equal(out.shapley, [np.nan, 0.5, 0.0])
    with pytest.raises(ValueError, match="calibrate"):
        apply_defense(e, DefenseConfig(quantize_levels=3))
    with pytest.raises(ValueError, match="calibrate"):
        apply_defense(e, DefenseConfig(topk=1))
    assert apply_defense(e, DefenseConfig()) is e


def test_defense_config_validation_and_dict():
    with pytest.raises(ValueError):
        DefenseConfig(quantize_levels=1)
    with pytest.raises(ValueError):
        DefenseConfig(topk=2, topk_indices=(1,))
    cfg = DefenseConfig(5, ([0.0, 0.1], [1.0, 1.1]), 1, (0,))
    back = DefenseConfig.from_dict(cfg.to_dict())
    assert back.quantize_levels == 5 and back.topk_indices == (0,)
    assert not DefenseConfig().active
