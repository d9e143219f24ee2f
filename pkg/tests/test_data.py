import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from shapleak.data import (
    ConstantInputWarning,
    DataError,
    SynthConfig,
    denormalize,
    gen_synthetic,
    load_csv,
    load_dataset,
    macc,
    normalize_minmax,
    pearson,
    save_csv,
    save_dataset,
    split,
)

from conftest import make_dataset


def test_load_csv_basic(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b,label\n1,2,0\n3,4,1\n5,6,0\n")
    d = load_csv(p)
    assert (d.n_samples, d.n_features) == (3, 2)
    assert d.feature_names == ("a", "b")
    assert d.labels.tolist() == [0, 1, 0]
    assert d.n_classes == 2


def test_load_csv_string_labels_and_label_position(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("cls,x\nyes,0.5\nno,0.1\nyes,0.2\n")
    d = load_csv(p, label_column="cls")
    assert d.labels.tolist() == [1, 0, 1]
    assert d.meta["classes"] == ["no", "yes"]


def test_load_csv_fourteen_features(tmp_path):
    rng = np.random.default_rng(0)
    p = tmp_path / "adult.csv"
    rows = [",".join([f"f{i}" for i in range(14)] + ["label"])]
    for _ in range(20):
        rows.append(",".join([f"{v:.4f}" for v in rng.uniform(size=14)] + [str(rng.integers(2))]))
    p.write_text("\n".join(rows) + "\n")
    assert load_csv(p).n_features == 14


@pytest.mark.parametrize("body,msg", [
    ("a,b,label\n1,x,0\n", "non-numeric"),
    ("", "empty"),
    ("a,b,label\n", "no data"),
    ("a,b,label\n1,2\n", "expected 3 cells"),
    ("a,b\n1,2\n", "label column"),
])
def test_load_csv_errors(tmp_path, body, msg):
    p = tmp_path / "bad.csv"
    p.write_text(body)
    with pytest.raises(DataError, match=msg):
        load_csv(p)


def test_load_csv_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_csv(tmp_path / "nope.csv")


def test_csv_roundtrip(tmp_path, small_synth):
    save_csv(small_synth, tmp_path / "s.csv")
    back = load_csv(tmp_path / "s.csv")
    np.testing.assert_array_equal(back.features, small_synth.features)
    np.testing.assert_array_equal(back.labels, small_synth.labels)


def test_dataset_json_roundtrip(tmp_path, small_synth):
    save_dataset(small_synth, tmp_path / "s.json")
    back = load_dataset(tmp_path / "s.json")
    np.testing.assert_array_equal(back.features, small_synth.features)
    assert back.meta["roles"] == small_synth.meta["roles"]


def test_dataset_is_immutable(small_synth):
    with pytest.raises(ValueError):
        small_synth.features[0, 0] = 5.0


def test_dataset_rejects_bad_labels():
    with pytest.raises(DataError):
        make_dataset([[0.1], [0.2]], [0, 3], n_classes=2)


def test_normalize_affine_and_constant():
    d = make_dataset([[2, 5], [4, 5], [6, 5]], [0, 1, 0])
    z, rec = normalize_minmax(d)
    np.testing.assert_allclose(z.features[:, 0], [0, 0.5, 1])
    np.testing.assert_array_equal(z.features[:, 1], [0, 0, 0])
    assert rec["min"].tolist() == [2, 5]


def test_normalize_idempotent(small_synth):
    once, _ = normalize_minmax(small_synth)
    twice, _ = normalize_minmax(once)
    np.testing.assert_array_equal(once.features, twice.features)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 20), st.integers(1, 5)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_normalize_roundtrip_and_range(X):
    # constant columns cannot be inverted, so only check varying ones
    d = make_dataset(X, np.zeros(X.shape[0], dtype=int))
    z, rec = normalize_minmax(d)
    assert z.features.min() >= 0 and z.features.max() <= 1
    back = denormalize(z, rec).features
    varying = X.max(axis=0) > X.min(axis=0)
    np.testing.assert_allclose(back[:, varying], X[:, varying], atol=1e-12 * (1 + np.abs(X).max()))


def test_split_exact_proportions():
    d = make_dataset(np.random.default_rng(0).uniform(size=(100, 2)), np.zeros(100, dtype=int))
    sp = split(d, seed=7)
    assert (sp.train.n_samples, sp.aux.n_samples, sp.val.n_samples) == (60, 20, 20)


def test_split_rounding_and_partition():
    d = make_dataset(np.arange(101.0)[:, None] / 101, np.zeros(101, dtype=int))
    sp = split(d, seed=1)
    sizes = (sp.train.n_samples, sp.aux.n_samples, sp.val.n_samples)
    assert sizes == (60, 20, 21)
    for got, want in zip(sizes, (60.6, 20.2, 20.2)):
        assert abs(got - want) <= 1
    allidx = np.concatenate([sp.train_idx, sp.aux_idx, sp.val_idx])
    assert sorted(allidx.tolist()) == list(range(101))


def test_split_deterministic(small_synth):
    a, b = split(small_synth, 4), split(small_synth, 4)
    np.testing.assert_array_equal(a.train_idx, b.train_idx)
    assert not np.array_equal(a.train_idx, split(small_synth, 5).train_idx)


def test_split_too_small():
    with pytest.raises(DataError, match="too small"):
        split(make_dataset(np.zeros((4, 1)), np.zeros(4, dtype=int)), 0)


@pytest.mark.parametrize("frac,n_red,n_noise", [(0.25, 0, 9), (0.5, 3, 6), (0.75, 6, 3)])
def test_synth_feature_counts(frac, n_red, n_noise):
    d = gen_synthetic(SynthConfig(important_fraction=frac, n_samples=50))
    roles = d.meta["roles"]
    assert roles.count("key") == 3
    assert roles.count("redundant") == n_red
    assert roles.count("noise") == n_noise
    assert d.n_classes == 5
    assert d.features.min() >= 0 and d.features.max() <= 1


def test_synth_invalid_fraction():
    with pytest.raises(DataError):
        SynthConfig(important_fraction=0.3)
    with pytest.raises(DataError):
        SynthConfig(n_features=4, important_fraction=0.25)


def test_synth_deterministic():
    a = gen_synthetic(SynthConfig(n_samples=300, seed=9))
    b = gen_synthetic(SynthConfig(n_samples=300, seed=9))
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_synth_centers_distinct_vertices():
    d = gen_synthetic(SynthConfig(n_samples=10))
    centers = np.array(d.meta["cluster_centers"])
    assert centers.shape == (5, 3)
    assert len({tuple(c) for c in centers}) == 5
    assert set(np.unique(centers)) <= {0.0, 1.0}


def test_synth_zero_std_collapses_classes():
    d = gen_synthetic(SynthConfig(n_samples=200, cluster_std=0.0))
    for c in range(5):
        key = d.features[d.labels == c, :3]
        if len(key):
            assert np.all(key == key[0])


def test_synth_correlation_structure():
    d = gen_synthetic(SynthConfig(n_samples=5000, seed=0))
    roles = d.meta["roles"]
    X = d.features
    onehot = np.eye(5)[d.labels]
    for i, role in enumerate(roles):
        if role == "redundant":
            assert max(abs(pearson(X[:, i], X[:, j])) for j in range(3)) >= 0.3
        if role == "noise":
            assert macc(X[:, i], onehot) < 0.1


def test_pearson_examples():
    x = np.array([1.0, 2.0, 5.0, 3.0])
    assert pearson(x, x) == pytest.approx(1.0)
    assert pearson(x, -x) == pytest.approx(-1.0)
    # hand computation: sxy = 4.1, sxx = 2, syy = 8.40667 -> 4.1 / sqrt(16.81333)
    assert pearson([1, 2, 3], [2, 4, 6.1]) == pytest.approx(0.9999008674, abs=1e-10)


def test_pearson_errors_and_constant():
    with pytest.raises(ValueError, match="length mismatch"):
        pearson([1, 2], [1, 2, 3])
    with pytest.warns(ConstantInputWarning):
        assert pearson([1, 1, 1], [1, 2, 3]) == 0.0


def test_macc_examples():
    f = np.array([0.1, 0.5, 0.2, 0.9])
    assert macc(f, f[:, None]) == pytest.approx(1.0)
    rng = np.random.default_rng(0)
    g = rng.normal(size=500)
    # build two outputs with correlation +0.6 and -0.6 to g
    e = rng.normal(size=500)
    e = e - np.polyval(np.polyfit(g, e, 1), g)
    y = 0.6 * (g - g.mean()) / g.std() + 0.8 * e / e.std()
    P = np.column_stack([y, -y])
    assert macc(g, P) == pytest.approx(0.6, abs=1e-9)
    with pytest.raises(ValueError):
        macc(f, np.zeros((3, 2)))


def test_macc_noise_near_zero():
    rng = np.random.default_rng(1)
    m = 2000
    P = np.column_stack([np.sin(np.linspace(0, 6, m)), np.linspace(0, 1, m)])
    assert macc(rng.uniform(size=m), P) < 3 / np.sqrt(m)
