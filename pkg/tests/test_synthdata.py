import numpy as np
import pytest

from graphops.engine import ConfigurationError
from graphops import synthdata
from graphops.synthdata import Dataset, GeneratorSpec, generate, load, save


def spec_for(families, n=32, noise=0.05, outlier_rate=0.05, seed=0, **kw):
    return GeneratorSpec(families=families, n_samples=n, noise=noise,
                         outlier_rate=outlier_rate, seed=seed, **kw)


def test_generate_is_deterministic():
    a = generate(spec_for(("temporal", "difference"), n=16))
    b = generate(spec_for(("temporal", "difference"), n=16))
    for name in ("features", "positions", "maps", "global_features", "labels", "group_ids"):
        assert np.array_equal(getattr(a, name), getattr(b, name)), name


def test_class_balance_per_family():
    ds = generate(spec_for(synthdata.FAMILIES, n=48))
    for f_idx in range(4):
        for cls in range(2):
            label = 2 * f_idx + cls
            assert int((ds.labels == label).sum()) == 6


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        GeneratorSpec(families=("nonsense",))
    with pytest.raises(ConfigurationError):
        GeneratorSpec(families=("temporal",), n_samples=7)
    with pytest.raises(ConfigurationError):
        GeneratorSpec(noise=-0.1)
    with pytest.raises(ConfigurationError):
        GeneratorSpec(outlier_rate=1.0)


def test_families_are_canonicalized_sorted():
    s = GeneratorSpec(families=("temporal", "aggregation"), n_samples=8)
    assert s.families == ("aggregation", "temporal")


def test_temporal_frame_pooled_mean_identical_across_classes():
    ds = generate(spec_for(("temporal",), n=20, noise=0.0, outlier_rate=0.0))
    pooled = ds.features.mean(axis=1)
    # consecutive samples are twins differing only in drift sign
    for m in range(0, 20, 2):
        assert ds.labels[m] != ds.labels[m + 1]
        assert np.allclose(pooled[m], pooled[m + 1], atol=1e-12)


def test_difference_and_background_pooled_invariance_exact():
    for fam in ("difference", "background"):
        ds = generate(spec_for((fam,), n=20, noise=0.0, outlier_rate=0.0))
        for m in range(0, 20, 2):
            assert np.allclose(ds.global_features[m], ds.global_features[m + 1], atol=1e-12), fam


def test_aggregation_pooled_mean_class_invariant():
    ds = generate(spec_for(("aggregation",), n=20, noise=0.0, outlier_rate=0.0))
    pooled = ds.features.mean(axis=1)
    # prototype offsets sum to zero, so twins (same draws, opposite class)
    # have identical pooled means
    for m in range(0, 20, 2):
        assert np.allclose(pooled[m], pooled[m + 1], atol=1e-12)


def test_global_feature_is_pure_function_of_sample():
    ds = generate(spec_for(("temporal", "background"), n=16))
    n = len(ds)
    manual = np.concatenate(
        [ds.features.mean(axis=1), ds.maps.reshape(n, -1, ds.spec.channels).mean(axis=1)], axis=1
    )
    assert np.array_equal(ds.global_features, manual)


def test_sample_accessor_and_groups():
    ds = generate(spec_for(("background", "temporal"), n=16))
    s = ds.sample(0)
    assert s.nodes.features.data.shape == (24, 16)
    assert s.background.maps.data.shape == (4, 4, 4, 16)
    assert s.group in ("background", "temporal")
    assert s.global_feature.shape == (32,)


def test_serialization_roundtrip_and_byte_equality(tmp_path):
    ds = generate(spec_for(("difference", "aggregation"), n=16))
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    save(ds, p1)
    save(ds, p2)
    assert p1.read_bytes() == p2.read_bytes()
    back = load(p1)
    assert back.spec == ds.spec
    for name in ("features", "positions", "frame_index", "maps", "global_features", "labels", "group_ids"):
        assert np.array_equal(getattr(back, name), getattr(ds, name)), name


def test_load_rejects_bad_magic(tmp_path):
    p = tmp_path / "junk.bin"
    p.write_bytes(b"NOTADATASET")
    with pytest.raises(ValueError):
        load(p)


def _least_squares_accuracy(feats, labels):
    """Linear classifier oracle: least squares on +-1 targets, 50/50 split."""
    n = len(labels)
    half = n // 2
    idx = np.random.default_rng(0).permutation(n)
    tr, te = idx[:half], idx[half:]
    x = np.concatenate([feats, np.ones((n, 1))], axis=1)
    y = np.where(labels == labels.min(), -1.0, 1.0)
    w, *_ = np.linalg.lstsq(x[tr], y[tr], rcond=None)
    pred = np.sign(x[te] @ w)
    return float((pred == y[te]).mean())


def test_difference_family_invisible_to_mean_pool_but_not_to_differences():
    ds = generate(spec_for(("difference",), n=400, noise=0.05, outlier_rate=0.0))
    pooled = ds.features.mean(axis=1)
    acc_pool = _least_squares_accuracy(pooled, ds.labels)
    assert acc_pool <= 0.55

    # hand-coded pairwise-difference feature: third moment of centered nodes
    centered = ds.features - pooled[:, None, :]
    skew = (centered * (centered ** 2).sum(axis=2, keepdims=True)).mean(axis=1)
    acc_diff = _least_squares_accuracy(skew, ds.labels)
    assert acc_diff >= 0.95


def test_outliers_replace_features():
    clean = generate(spec_for(("aggregation",), n=16, noise=0.0, outlier_rate=0.0))
    dirty = generate(spec_for(("aggregation",), n=16, noise=0.0, outlier_rate=0.4))
    changed = np.any(clean.features != dirty.features, axis=2)
    frac = changed.mean()
    assert 0.2 <= frac <= 0.6


def test_subset_preserves_alignment():
    ds = generate(spec_for(("temporal", "background"), n=16))
    sub = ds.subset([3, 1, 7])
    assert np.array_equal(sub.labels, ds.labels[[3, 1, 7]])
    assert np.array_equal(sub.features, ds.features[[3, 1, 7]])
