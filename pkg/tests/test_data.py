import numpy as np
import pytest
from scipy.stats import kendalltau

from dmib import data as dd
from dmib.data import MultimodalDataset, NoiseSpec, SynthSpec
from dmib.errors import ConfigurationError, DataError
from dmib.metrics import roc_auc


def _write(path, text):
    path.write_text(text)
    return str(path)


@pytest.fixture
def toy_ds():
    x = np.array([[1.0, 10.0], [np.nan, 20.0], [3.0, np.nan], [5.0, 40.0]])
    return MultimodalDataset(["a", "b", "c", "d"], [0, 1, 0, 1], {"m": x})


# --- loading ----------------------------------------------------------------


def test_load_aligns_to_label_order(tmp_path):
    labels = _write(tmp_path / "labels.csv", "sample_id,label\nC,1\nA,0\nB,1\n")
    m1 = _write(tmp_path / "rna.csv", "sample_id,g1,g2\nA,1,2\nB,3,4\nC,5,6\n")
    m2 = _write(tmp_path / "clin.tsv", "sample_id\tage\nB\t40\nC\t50\nA\t60\n")
    ds = dd.load_modalities([m1, m2], labels)
    assert ds.sample_ids == ["C", "A", "B"]
    np.testing.assert_array_equal(ds.labels, [1, 0, 1])
    np.testing.assert_array_equal(ds.modalities["rna"], [[5, 6], [1, 2], [3, 4]])
    np.testing.assert_array_equal(ds.modalities["clin"], [[50], [60], [40]])
    assert ds.dropped_ids == []


def test_load_intersects_ids(tmp_path):
    labels = _write(tmp_path / "y.csv", "sample_id,label\nA,0\nB,1\nC,0\nD,1\n")
    m1 = _write(tmp_path / "m1.csv", "sample_id,x\nA,1\nB,2\nC,3\n")
    m2 = _write(tmp_path / "m2.csv", "sample_id,x\nB,1\nC,2\nD,3\n")
    ds = dd.load_modalities([m1, m2], labels)
    assert ds.sample_ids == ["B", "C"]
    assert ds.dropped_ids == ["A", "D"]


def test_load_empty_cell_marks_missing(tmp_path):
    labels = _write(tmp_path / "y.csv", "sample_id,label\nA,0\nB,1\n")
    m = _write(tmp_path / "m.csv", "sample_id,x,y\nA,1,\nB,NA,4\n")
    ds = dd.load_modalities([m], labels)
    np.testing.assert_array_equal(ds.missing("m"), [[False, True], [True, False]])


def test_load_non_numeric_cell_names_row_and_column(tmp_path):
    labels = _write(tmp_path / "y.csv", "sample_id,label\nA,0\nB,1\n")
    m = _write(tmp_path / "m.csv", "sample_id,x,y\nA,1,2\nB,3,abc\n")
    with pytest.raises(DataError, match=r"row 3.*'y'"):
        dd.load_modalities([m], labels)


def test_load_disjoint_ids(tmp_path):
    labels = _write(tmp_path / "y.csv", "sample_id,label\nA,0\n")
    m = _write(tmp_path / "m.csv", "sample_id,x\nZ,1\n")
    with pytest.raises(DataError, match="share no sample ids"):
        dd.load_modalities([m], labels)


def test_load_missing_file(tmp_path):
    with pytest.raises(DataError, match="not found"):
        dd.load_modalities([str(tmp_path / "nope.csv")], str(tmp_path / "y.csv"))


def test_labels_with_group_column(tmp_path):
    path = _write(tmp_path / "y.csv", "sample_id,label,group_id\nA,0,p1\nB,0,p1\nC,1,p2\n")
    ids, labels, groups = dd.read_labels(path)
    assert groups == ["p1", "p1", "p2"]


def test_write_read_round_trip(tmp_path):
    ds = dd.gen_synthetic(SynthSpec(n_samples=12, dims=[3, 2]), seed=1)
    ds.modalities["modality0"][0, 1] = np.nan
    paths = []
    for name, x in ds.modalities.items():
        p = str(tmp_path / f"{name}.csv")
        dd.write_table(p, ds.sample_ids, x)
        paths.append(p)
    dd.write_labels(str(tmp_path / "labels.csv"), ds)
    back = dd.load_modalities(paths, str(tmp_path / "labels.csv"))
    for name in ds.modalities:
        np.testing.assert_array_equal(back.modalities[name], ds.modalities[name])
    np.testing.assert_array_equal(back.labels, ds.labels)


# --- imputation -------------------------------------------------------------


def test_impute_column_mean():
    ds = MultimodalDataset(["a", "b", "c"], [0, 1, 0], {"m": np.array([[1.0], [np.nan], [3.0]])})
    out, means = dd.impute_mean(ds)
    np.testing.assert_array_equal(out.modalities["m"][:, 0], [1.0, 2.0, 3.0])


def test_impute_without_missing_is_identity():
    x = np.arange(6.0).reshape(3, 2)
    ds = MultimodalDataset(["a", "b", "c"], [0, 1, 0], {"m": x})
    np.testing.assert_array_equal(dd.impute_mean(ds)[0].modalities["m"], x)


def test_impute_uses_training_rows_only():
    x = np.array([[4.0], [6.0], [np.nan], [100.0]])
    ds = MultimodalDataset(list("abcd"), [0, 1, 0, 1], {"m": x})
    out, means = dd.impute_mean(ds, train_rows=[0, 1])
    assert means["m"][0] == 5.0
    assert out.modalities["m"][2, 0] == 5.0
    # fitting on everything would have leaked the held-out 100
    assert dd.impute_mean(ds)[0].modalities["m"][2, 0] != 5.0


def test_impute_fully_missing_column_named():
    x = np.array([[1.0, np.nan], [2.0, np.nan]])
    ds = MultimodalDataset(["a", "b"], [0, 1], {"clin": x})
    with pytest.raises(DataError, match="clin.*1"):
        dd.impute_mean(ds)


def test_leakage_oracle_held_out_cells_do_not_move_statistics(toy_ds):
    train = [0, 1, 2]
    ds2 = MultimodalDataset(toy_ds.sample_ids, toy_ds.labels, {"m": toy_ds.modalities["m"].copy()})
    ds2.modalities["m"][3] = [-1e6, 1e6]
    p1 = dd.Preprocessor.fit(toy_ds, train).blocks()
    p2 = dd.Preprocessor.fit(ds2, train).blocks()
    assert p1.keys() == p2.keys()
    for k, v in p1.items():
        np.testing.assert_array_equal(v, p2[k])


# --- normalization ----------------------------------------------------------


def test_zscore_constant_column_becomes_zero():
    x = np.column_stack([np.full(5, 3.0), np.arange(5.0)])
    ds = MultimodalDataset(list("abcde"), [0, 1, 0, 1, 0], {"m": x})
    out, _ = dd.normalize_zscore(ds)
    assert not out.modalities["m"][:, 0].any()


def test_zscore_training_rows_standardized():
    g = np.random.default_rng(0)
    x = g.normal(3.0, 2.0, size=(40, 4))
    ds = MultimodalDataset([str(i) for i in range(40)], np.arange(40) % 2, {"m": x})
    train = np.arange(30)
    out, stats = dd.normalize_zscore(ds, train)
    z = out.modalities["m"][train]
    assert np.abs(z.mean(axis=0)).max() < 1e-10
    assert np.abs(z.std(axis=0) - 1.0).max() < 1e-10
    # held-out rows use the training statistics, not their own
    held = out.modalities["m"][30:]
    self_norm = (x[30:] - x[30:].mean(axis=0)) / x[30:].std(axis=0)
    assert not np.allclose(held, self_norm)
    np.testing.assert_allclose(held, (x[30:] - stats.mean["m"]) / stats.std["m"], rtol=0, atol=1e-15)


def test_preprocessor_blocks_round_trip(toy_ds):
    prep = dd.Preprocessor.fit(toy_ds, [0, 1, 2])
    back = dd.Preprocessor.from_blocks(prep.blocks())
    a = prep.apply(toy_ds).modalities["m"]
    b = back.apply(toy_ds).modalities["m"]
    assert a.tobytes() == b.tobytes()
    assert not np.isnan(a).any()


# --- splitting --------------------------------------------------------------


def _labels_60_40():
    return np.array([0] * 60 + [1] * 40)


def test_split_reserves_twenty_percent_per_class():
    y = _labels_60_40()
    plan = dd.split_stratified(y, 0.2, 5, seed=0)
    assert (y[plan.test] == 0).sum() == 12
    assert (y[plan.test] == 1).sum() == 8


def test_split_is_an_exact_partition():
    y = _labels_60_40()
    plan = dd.split_stratified(y, 0.2, 5, seed=3)
    parts = [plan.test, *plan.folds]
    joined = np.concatenate(parts)
    assert joined.size == y.size and set(joined.tolist()) == set(range(y.size))
    for f in plan.folds:
        for c, n_c in ((0, 48), (1, 32)):
            assert abs((y[f] == c).sum() - n_c / 5) <= 1


def test_split_k_one_single_fold():
    y = _labels_60_40()
    plan = dd.split_stratified(y, 0.2, 1, seed=0)
    assert plan.k == 1 and plan.folds[0].size == 80


def test_split_determinism():
    y = _labels_60_40()
    a = dd.split_stratified(y, seed=5)
    b = dd.split_stratified(y, seed=5)
    c = dd.split_stratified(y, seed=6)
    assert a.digest() == b.digest()
    assert a.digest() != c.digest()
    assert (y[a.test] == 0).sum() == (y[c.test] == 0).sum()
    assert [f.size for f in a.folds] == [f.size for f in c.folds]


def test_split_class_too_small():
    with pytest.raises(DataError, match="class 1"):
        dd.split_stratified([0] * 10 + [1] * 5, k=5)


def test_split_keeps_groups_together():
    y = np.repeat(np.arange(30) % 2, 3)
    groups = [f"p{i // 3}" for i in range(90)]
    plan = dd.split_stratified(y, 0.2, 5, seed=0, groups=groups)
    where = {}
    for part, rows in enumerate([plan.test, *plan.folds]):
        for r in rows:
            where.setdefault(groups[r], set()).add(part)
    assert all(len(v) == 1 for v in where.values())


def test_train_and_val_rows_are_complementary():
    plan = dd.split_stratified(_labels_60_40(), seed=0)
    for f in range(plan.k):
        assert set(plan.train_rows(f)) | set(plan.val_rows(f)) == set(np.concatenate(plan.folds))
        assert not set(plan.train_rows(f)) & set(plan.val_rows(f))


# --- noise injection --------------------------------------------------------


def test_replace_with_integer_noise():
    ds = dd.gen_synthetic(SynthSpec(n_samples=200, dims=[4, 1]), 0)
    out = dd.inject_noise_channel(ds, NoiseSpec(replace="modality1"), seed=1)
    v = out.modalities["modality1"]
    assert v.shape == (200, 1)
    assert np.array_equal(v, np.round(v)) and v.min() >= 0 and v.max() <= 100
    np.testing.assert_array_equal(out.modalities["modality0"], ds.modalities["modality0"])


def test_degenerate_noise_range_is_constant():
    ds = dd.gen_synthetic(SynthSpec(n_samples=20), 0)
    for gen in ("int_uniform", "real_uniform"):
        out = dd.inject_noise_channel(ds, NoiseSpec(replace="modality1", generator=gen, lo=7, hi=7), 0)
        assert (out.modalities["modality1"] == 7.0).all()


def test_append_adds_exactly_one_modality():
    ds = dd.gen_synthetic(SynthSpec(n_samples=20), 0)
    out = dd.inject_noise_channel(ds, NoiseSpec(append="noise", width=3), 0)
    assert out.modality_names == ["modality0", "modality1", "noise"]
    assert out.modalities["noise"].shape == (20, 3)
    assert ds.modality_names == ["modality0", "modality1"]


def test_unknown_modality_rejected():
    ds = dd.gen_synthetic(SynthSpec(n_samples=20), 0)
    with pytest.raises(ConfigurationError, match="age"):
        dd.inject_noise_channel(ds, NoiseSpec(replace="age"), 0)


def test_noise_is_seeded():
    ds = dd.gen_synthetic(SynthSpec(n_samples=50), 0)
    spec = NoiseSpec(replace="modality1", generator="real_uniform")
    a = dd.inject_noise_channel(ds, spec, 3).modalities["modality1"]
    b = dd.inject_noise_channel(ds, spec, 3).modalities["modality1"]
    c = dd.inject_noise_channel(ds, spec, 4).modalities["modality1"]
    assert np.array_equal(a, b) and not np.array_equal(a, c)


@pytest.mark.parametrize("seed", range(5))
def test_injected_noise_has_no_rank_correlation_with_labels(seed):
    ds = dd.gen_synthetic(SynthSpec(n_samples=500, dims=[4, 1]), seed)
    out = dd.inject_noise_channel(ds, NoiseSpec(replace="modality1"), seed)
    tau, _ = kendalltau(out.modalities["modality1"][:, 0], out.labels)
    assert abs(tau) < 0.1


# --- synthetic data ---------------------------------------------------------


def test_synthetic_default_shape_and_balance():
    ds = dd.gen_synthetic()
    assert ds.n_samples == 500
    assert ds.modality_names == ["modality0", "modality1"]
    assert np.bincount(ds.labels).tolist() == [250, 250]


def test_synthetic_lda_oracle_auc():
    spec = SynthSpec()
    ds = dd.gen_synthetic(spec, seed=0)
    mu = dd.class_means(spec)
    # equal isotropic covariances: the Bayes rule projects onto mu1 - mu0
    score = ds.modalities["modality0"] @ (mu[1] - mu[0])
    assert roc_auc(score, ds.labels) >= 0.99


def test_synthetic_class_means_are_separation_apart():
    spec = SynthSpec(n_classes=4, separation=3.0)
    mu = dd.class_means(spec)
    d = np.linalg.norm(mu[:, None] - mu[None], axis=2)
    np.testing.assert_allclose(d[~np.eye(4, dtype=bool)], 3.0, rtol=1e-15)


def test_synthetic_zero_noise_floor_is_separable():
    ds = dd.gen_synthetic(SynthSpec(noise_floor=0.0), seed=2)
    x = ds.modalities["modality0"]
    assert roc_auc(x[:, 1] - x[:, 0], ds.labels) == 1.0


def test_synthetic_all_noise_is_label_independent():
    ds = dd.gen_synthetic(SynthSpec(informative=None), seed=0)
    for x in ds.modalities.values():
        auc = roc_auc(x[:, 0], ds.labels)
        assert abs(auc - 0.5) < 0.1


def test_synthetic_repeats_write_groups():
    ds = dd.gen_synthetic(SynthSpec(n_samples=60, n_repeats=3), 0)
    assert ds.group_ids[:3] == ["g00000"] * 3
    assert len(set(ds.group_ids)) == 20


def test_synthetic_deterministic():
    a, b = dd.gen_synthetic(seed=4), dd.gen_synthetic(seed=4)
    assert dd.dataset_cache_bytes(a) == dd.dataset_cache_bytes(b)


def test_synthetic_spec_validation():
    with pytest.raises(ConfigurationError):
        SynthSpec(informative=2)
    with pytest.raises(ConfigurationError):
        SynthSpec(n_classes=5, dims=[4, 4])


def test_cache_round_trip():
    ds = dd.gen_synthetic(SynthSpec(n_samples=30), 1)
    back = dd.dataset_from_cache(dd.dataset_cache_bytes(ds))
    assert back.sample_ids == ds.sample_ids
    np.testing.assert_array_equal(back.labels, ds.labels)
    for name in ds.modalities:
        assert back.modalities[name].tobytes() == ds.modalities[name].tobytes()


def test_cache_bad_magic():
    with pytest.raises(DataError):
        dd.dataset_from_cache(b"garbage!" + b"\0" * 12)
