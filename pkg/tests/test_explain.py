import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shapleak.data import SynthConfig, gen_synthetic, split
from shapleak.explain import (
    ExplainError,
    Explanation,
    ReferenceSample,
    ShapleyExplainer,
    compose_masked,
    estimate_noise_var,
    exact_shapley,
    gaussian_fit_test,
    mi_gaussian,
    permutations_needed,
    sampled_shapley,
)
from shapleak.models import MLPClassifier, RandomForestClassifier, GBDTClassifier, train_model

from conftest import LinearProbModel


def _permutation_oracle(f, x, x0, c):
    """Shapley values as the average over all n! orderings (independent of subset weights)."""
    n = len(x)
    s = np.zeros(n)
    perms = list(itertools.permutations(range(n)))
    for order in perms:
        z = np.array(x0, dtype=float)
        prev = f(z[None, :])[0, c]
        for i in order:
            z[i] = x[i]
            cur = f(z[None, :])[0, c]
            s[i] += cur - prev
            prev = cur
    return s / len(perms)


def test_compose_masked_worked_example():
    x0, x = [3, 9, 2, 8], [6, 0, 3, 4]
    np.testing.assert_array_equal(compose_masked(x, x0, {0, 1, 2}), [6, 0, 3, 8])
    np.testing.assert_array_equal(compose_masked(x, x0, set()), x0)
    np.testing.assert_array_equal(compose_masked(x, x0, range(4)), x)
    with pytest.raises(ExplainError, match="out of range"):
        compose_masked(x, x0, {4})


def test_exact_additive_model():
    m = LinearProbModel([0.4, -0.2], 0.5)
    e = exact_shapley(m, [0.5, 0.5], [0.0, 0.0], target_class=0)
    np.testing.assert_allclose(e.shapley, [0.2, -0.1], atol=1e-12)
    assert e.method == "exact" and e.target_class == 0


@pytest.mark.parametrize("kind", ["MLP", "RF", "GBDT", "KSVM"])
def test_exact_matches_permutation_oracle(small_models, kind):
    # restrict to 5 free features so n! enumeration stays cheap
    rng = np.random.default_rng(0)
    model = small_models[kind]
    base = rng.uniform(size=8)

    def f(Z):
        full = np.tile(base, (Z.shape[0], 1))
        full[:, :5] = Z
        return model.predict_proba(full)

    x, x0 = rng.uniform(size=5), rng.uniform(size=5)
    want = _permutation_oracle(f, x, x0, 1)
    got = exact_shapley(f, x, x0, target_class=1).shapley
    np.testing.assert_allclose(got, want, atol=1e-12)


@pytest.mark.parametrize("kind", ["MLP", "RF", "GBDT", "KSVM"])
def test_efficiency(small_models, kind):
    model = small_models[kind]
    rng = np.random.default_rng(1)
    for _ in range(10):
        x, x0 = rng.uniform(size=8), rng.uniform(size=8)
        e = exact_shapley(model, x, x0)
        p = model.predict_proba(np.vstack([x, x0]))[:, e.target_class]
        assert abs(e.shapley.sum() - (p[0] - p[1])) <= 1e-9


def test_null_player_mlp_exact_and_sampled():
    rng = np.random.default_rng(2)
    X = rng.uniform(size=(100, 4))
    m = MLPClassifier(epochs=5).fit(X, (X[:, 0] > 0.5).astype(int))
    m.coefs_[0][2, :] = 0.0
    x, x0 = rng.uniform(size=4), rng.uniform(size=4)
    assert exact_shapley(m, x, x0).shapley[2] == 0.0
    assert sampled_shapley(m, x, x0, nu=17, seed=3).shapley[2] == 0.0


@pytest.mark.parametrize("cls", [RandomForestClassifier, GBDTClassifier])
def test_null_player_trees(cls):
    rng = np.random.default_rng(3)
    X = rng.uniform(size=(150, 4))
    X[:, 1] = 0.25
    m = cls(n_trees=5).fit(X, (X[:, 0] + X[:, 2] > 1).astype(int))
    x, x0 = rng.uniform(size=4), rng.uniform(size=4)
    assert exact_shapley(m, x, x0).shapley[1] == 0.0


def test_symmetry():
    def f(Z):
        p = 1 / (1 + np.exp(-(Z[:, 0] * Z[:, 1] + np.sin(Z[:, 0] + Z[:, 1]) + Z[:, 2] ** 2)))
        return np.column_stack([p, 1 - p])

    x = np.array([0.3, 0.3, 0.9])
    x0 = np.array([0.7, 0.7, 0.1])
    s = exact_shapley(f, x, x0, target_class=0).shapley
    assert abs(s[0] - s[1]) <= 1e-9


def test_linearity():
    rng = np.random.default_rng(4)
    W1, W2 = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))

    def f(Z):
        return np.tanh(Z @ W1)

    def g(Z):
        return (Z @ W2) ** 2

    a, b = 0.7, -1.3
    x, x0 = rng.uniform(size=5), rng.uniform(size=5)
    lhs = exact_shapley(lambda Z: a * f(Z) + b * g(Z), x, x0, 0).shapley
    rhs = a * exact_shapley(f, x, x0, 0).shapley + b * exact_shapley(g, x, x0, 0).shapley
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_exact_refuses_large_n():
    m = LinearProbModel(np.full(21, 0.01), 0.3)
    with pytest.raises(ExplainError, match="refused"):
        exact_shapley(m, np.zeros(21), np.zeros(21))


def test_default_target_class_is_top(small_models):
    x = np.random.default_rng(5).uniform(size=8)
    m = small_models["MLP"]
    e = exact_shapley(m, x, np.zeros(8))
    assert e.target_class == int(np.argmax(m.predict_proba(x[None, :])))


@pytest.mark.parametrize("delta,ratio,want", [(0.1, 5, 38), (0.1, 10, 150), (0.05, 1, 2)])
def test_permutations_needed(delta, ratio, want):
    # ln(2/delta) * ratio^2 / 2: ln 20 * 25 / 2 = 37.45; ln 20 * 100 / 2 = 149.79; ln 40 / 2 = 1.84
    assert permutations_needed(delta, 1.0 / ratio) == want
    assert permutations_needed(delta, 0.3 / ratio, r_m=0.3) == want


@pytest.mark.parametrize("args", [(0.0, 0.1), (1.0, 0.1), (0.1, 0.0), (0.1, 0.1, -1.0)])
def test_permutations_needed_errors(args):
    with pytest.raises(ValueError):
        permutations_needed(*args)


def test_sampled_deterministic_and_converges():
    rng = np.random.default_rng(6)
    W = rng.normal(size=(6, 3))

    def f(Z):
        e = np.exp(Z @ W)
        return e / e.sum(axis=1, keepdims=True)

    x, x0 = rng.uniform(size=6), rng.uniform(size=6)
    a = sampled_shapley(f, x, x0, 0, nu=2000, seed=1)
    b = sampled_shapley(f, x, x0, 0, nu=2000, seed=1)
    np.testing.assert_array_equal(a.shapley, b.shapley)
    exact = exact_shapley(f, x, x0, 0).shapley
    assert np.abs(a.shapley - exact).max() <= 0.02
    assert a.method == "sampled" and a.nu == 2000 and a.seed == 1


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2 ** 32 - 1))
def test_sampled_efficiency_holds_per_permutation(nu, seed):
    # every ordering telescopes to f(x) - f(x0), so the mean does too
    m = LinearProbModel([0.1, -0.3, 0.2, 0.05], 0.5)

    def f(Z):
        P = m.predict_proba(Z)
        return P ** 2

    x, x0 = np.array([0.2, 0.9, 0.4, 0.6]), np.array([0.5, 0.1, 0.3, 0.8])
    s = sampled_shapley(f, x, x0, 0, nu=nu, seed=seed).shapley
    want = f(x[None, :])[0, 0] - f(x0[None, :])[0, 0]
    assert abs(s.sum() - want) <= 1e-12


def test_sampled_requires_positive_nu():
    with pytest.raises(ExplainError):
        sampled_shapley(LinearProbModel([0.1], 0.5), [0.5], [0.1], nu=0)


def test_noise_variance_exact_zero_and_scaling():
    rng = np.random.default_rng(7)
    W = rng.normal(size=(6, 2)) * 3

    def f(Z):
        p = 1 / (1 + np.exp(-(np.sin(Z @ W[:, 0]) * (Z @ W[:, 1]))))
        return np.column_stack([p, 1 - p])

    x, x0 = rng.uniform(size=6), rng.uniform(size=6)
    assert estimate_noise_var(f, x, x0, 0, nu=None, trials=3).max() <= 1e-20
    v100 = estimate_noise_var(f, x, x0, 0, nu=100, trials=60, seed=1)
    v400 = estimate_noise_var(f, x, x0, 0, nu=400, trials=60, seed=2)
    assert np.median(v400) < np.median(v100)


def test_noise_variance_two_trials_is_unbiased_form():
    def f(Z):
        p = 0.5 + 0.3 * Z[:, 0] * Z[:, 1] - 0.2 * Z[:, 2]
        return np.column_stack([p, 1 - p])

    x, x0 = np.array([0.9, 0.8, 0.1]), np.array([0.1, 0.2, 0.7])
    v = estimate_noise_var(f, x, x0, 0, nu=3, trials=2, seed=0)
    runs = [sampled_shapley(f, x, x0, 0, 3, np.random.default_rng(c)).shapley
            for c in np.random.SeedSequence(0).spawn(2)]
    np.testing.assert_allclose(v, (runs[0] - runs[1]) ** 2 / 2)


def test_mi_gaussian():
    assert mi_gaussian(1.0, 1.0) == (0.0, False)
    assert mi_gaussian(4.0, 1.0).bits == pytest.approx(1.0)
    assert mi_gaussian(0.5, 1.0) == (0.0, True)
    with pytest.raises(ValueError):
        mi_gaussian(1.0, 0.0)


def test_mi_important_exceeds_noise_feature():
    d = gen_synthetic(SynthConfig(n_samples=1500, seed=1))
    sp = split(d, 0)
    m = train_model("MLP", sp.train, seed=0, epochs=60)
    x0 = sp.train.features[0]
    S = np.vstack([sampled_shapley(m, x, x0, 0, 50, j).shapley
                   for j, x in enumerate(sp.val.features[:150])])
    var_eps = estimate_noise_var(m, sp.val.features[0], x0, 0, nu=50, trials=20)
    key = mi_gaussian(S[:, 0].var(), var_eps[0]).bits
    noise = mi_gaussian(S[:, -1].var(), max(var_eps[-1], 1e-12)).bits
    assert key > noise


def test_gaussian_fit_calibration():
    ok = [gaussian_fit_test(np.random.default_rng(s).normal(2.0, 3.0, 10_000)).pvalue > 0.05
          for s in range(200)]
    assert np.mean(ok) >= 0.92


def test_gaussian_fit_power():
    res = gaussian_fit_test(np.random.default_rng(0).uniform(size=10_000))
    assert res.pvalue < 0.01


def test_gaussian_fit_errors():
    with pytest.raises(ValueError, match="at least"):
        gaussian_fit_test(np.zeros(49))
    assert gaussian_fit_test(np.zeros(100)).pvalue == 0.0


def test_explanation_roundtrip_with_withheld():
    e = Explanation(np.array([0.1, np.nan, -0.2]), 2, "sampled", 50, "train:3", 7,
                    present=np.array([True, False, True]))
    d = e.to_dict()
    assert d["shapley"] == [0.1, None, -0.2]
    back = Explanation.from_dict(d)
    np.testing.assert_array_equal(back.released, [True, False, True])
    np.testing.assert_array_equal(back.filled(0.0), [0.1, 0.0, -0.2])
    assert (back.nu, back.seed, back.reference_id) == (50, 7, "train:3")


def test_reference_validation():
    with pytest.raises(ExplainError):
        ReferenceSample(np.array([0.5, 1.5]))
    assert ReferenceSample(np.array([0.2]), 4).id == "train:4"


def test_explainer_transform_matches_explain(small_models):
    X = np.random.default_rng(8).uniform(size=(4, 8))
    ex = ShapleyExplainer(nu=20, target_class=0, random_state=10).fit(small_models["MLP"],
                                                                       np.full(8, 0.5))
    S = ex.transform(X)
    for j, x in enumerate(X):
        np.testing.assert_array_equal(S[j], ex.explain(x, seed=10 + j).shapley)
    exact = ShapleyExplainer(method="exact", target_class=0).fit(small_models["MLP"],
                                                                   np.full(8, 0.5))
    assert exact.transform(X).shape == (4, 8)
    assert math.isclose(exact.get_params()["target_class"], 0)
