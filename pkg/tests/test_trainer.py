import json

import numpy as np
import pytest

from dmib import trainer as tr
from dmib.autodiff import Tensor
from dmib.data import SplitPlan, SynthSpec, gen_synthetic, split_stratified
from dmib.errors import ConfigurationError, TrainingError
from dmib.losses import ABLATION_ROWS
from dmib.trainer import AdamState, TrainConfig, adam_step, lr_schedule


def _fast_config(**kw):
    base = dict(lr=1e-2, epochs=2, common_dim=4, hidden_dims=[8], dropout=0.1)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def small_ds():
    return gen_synthetic(SynthSpec(n_samples=60, dims=[4, 3]), seed=1)


# --- Adam -------------------------------------------------------------------


def test_adam_zero_gradient_leaves_parameters():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), 0.1)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


@pytest.mark.parametrize("g", [3.0, -0.02, 1e4])
def test_adam_first_step_moves_by_lr(g):
    p = {"w": Tensor(np.array([0.0]))}
    adam_step(p, {"w": np.array([g])}, AdamState(), 1e-3)
    assert p["w"].data[0] == pytest.approx(-np.sign(g) * 1e-3, rel=1e-5)


def test_adam_constant_gradient_moves_monotonically():
    p = {"w": Tensor(np.array([0.0, 0.0]))}
    state = AdamState()
    trace = []
    for _ in range(100):
        adam_step(p, {"w": np.array([0.5, -2.0])}, state, 1e-2)
        trace.append(p["w"].data.copy())
    trace = np.array(trace)
    assert (np.diff(trace[:, 0]) < 0).all()
    assert (np.diff(trace[:, 1]) > 0).all()
    assert state.step == 100


def test_adam_skips_parameters_without_gradient():
    p = {"a": Tensor(np.ones(2)), "b": Tensor(np.ones(2))}
    adam_step(p, {"a": np.ones(2), "b": None}, AdamState(), 0.1)
    np.testing.assert_array_equal(p["b"].data, [1.0, 1.0])
    assert (p["a"].data < 1.0).all()


def test_adam_nan_gradient_names_parameter_and_step():
    p = {"head.fused.weight": Tensor(np.ones(2))}
    state = AdamState()
    adam_step(p, {"head.fused.weight": np.ones(2)}, state, 0.1)
    with pytest.raises(TrainingError, match=r"head\.fused\.weight.*step 2"):
        adam_step(p, {"head.fused.weight": np.array([np.nan, 1.0])}, state, 0.1)


# --- learning-rate schedule -------------------------------------------------


def test_schedule_epoch_zero_is_lr0():
    assert lr_schedule(1e-6, 1e-2, 0, 70) == 1e-6


def test_schedule_without_decay_is_constant():
    assert {lr_schedule(0.3, 0.0, e, 10) for e in range(10)} == {0.3}


def test_schedule_halfway():
    assert lr_schedule(1e-6, 1e-2, 50, 70) == pytest.approx(5e-7, rel=1e-12)


def test_schedule_floor():
    assert lr_schedule(1.0, 0.5, 9, 10) == 0.01


def test_schedule_multiplicative():
    assert lr_schedule(1.0, 0.1, 2, 5, "multiplicative") == pytest.approx(0.81)


def test_schedule_epoch_out_of_range():
    with pytest.raises(ConfigurationError):
        lr_schedule(1.0, 0.0, 5, 5)


# --- configuration ----------------------------------------------------------


def test_default_hyperparameters():
    c = TrainConfig()
    assert (c.lr, c.decay, c.batch_size, c.epochs) == (1e-6, 1e-2, 8, 70)
    assert (c.adam_beta1, c.adam_beta2, c.adam_eps) == (0.9, 0.999, 1e-8)
    assert (c.alpha, c.beta) == (1.0, 10.0)
    assert tr.DESK_LR == 1e-3


@pytest.mark.parametrize("kw", [{"epochs": 0}, {"lr": 0.0}, {"batch_size": 0}, {"flags": 7}, {"decay_mode": "cosine"}])
def test_invalid_train_config(kw):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kw)


def test_flags_from_row_number_and_dict():
    assert TrainConfig(flags=4).flags == ABLATION_ROWS[4]
    d = {"fused": True, "ib": False, "distilled": False, "sufficiency": False, "modality": True}
    assert TrainConfig(flags=d).flags.active() == ("fused", "modality")


def test_config_snapshot_is_json():
    json.dumps(TrainConfig(flags=2).as_dict())


# --- fold training ----------------------------------------------------------


def test_one_epoch_on_eight_samples_is_one_step():
    ds = gen_synthetic(SynthSpec(n_samples=8, dims=[3, 2]), seed=0)
    plan = SplitPlan(np.array([], dtype=np.int64), [np.arange(8)], seed=0)
    res = tr.train_fold(ds, plan, 0, _fast_config(epochs=1))
    assert res.steps == 1
    assert res.epochs[0].steps == 1


def test_train_fold_is_bitwise_deterministic(small_ds):
    plan = split_stratified(small_ds.labels, k=3, seed=0)
    cfg = _fast_config(epochs=3)
    a = tr.train_fold(small_ds, plan, 1, cfg)
    b = tr.train_fold(small_ds, plan, 1, cfg)
    for name, p in a.net.parameters().items():
        assert p.data.tobytes() == b.net.parameters()[name].data.tobytes()
    assert a.val_auc == b.val_auc


def test_different_seed_changes_training(small_ds):
    plan = split_stratified(small_ds.labels, k=3, seed=0)
    a = tr.train_fold(small_ds, plan, 0, _fast_config(seed=0))
    b = tr.train_fold(small_ds, plan, 0, _fast_config(seed=1))
    assert not np.array_equal(a.net.parameters()["head.fused.weight"].data,
                              b.net.parameters()["head.fused.weight"].data)


def test_epoch_log_contents(small_ds):
    plan = split_stratified(small_ds.labels, k=3, seed=0)
    seen = []
    tr.train_fold(small_ds, plan, 0, _fast_config(epochs=3), log=seen.append)
    assert [e.epoch for e in seen] == [0, 1, 2]
    for e in seen:
        assert set(e.train) == {"fused", "modality", "distilled", "sufficiency", "total"}
        assert min(e.train.values()) >= -1e-12
        assert min(e.val.values()) >= -1e-12
        assert 0.0 <= e.val_auc <= 1.0
    assert seen[1].lr < seen[0].lr


def test_masking_only_with_bottleneck(small_ds):
    plan = split_stratified(small_ds.labels, k=3, seed=0)
    res = tr.train_fold(small_ds, plan, 0, _fast_config(epochs=5, flags=1))
    assert res.masks_all_ones == res.masks_total


def test_mask_fraction_over_long_run():
    ds = gen_synthetic(SynthSpec(n_samples=100, dims=[2, 2]), seed=3)
    plan = split_stratified(ds.labels, k=5, seed=0)
    cfg = _fast_config(epochs=250, common_dim=2, hidden_dims=[])
    res = tr.train_fold(ds, plan, 0, cfg)
    assert res.masks_total >= 2000
    assert abs(res.masks_all_ones / res.masks_total - 0.5) < 0.02


def test_training_error_carries_context(small_ds, monkeypatch):
    plan = split_stratified(small_ds.labels, k=3, seed=0)

    def broken(*a, **k):
        raise TrainingError("non-finite gradient for x at step 1")

    monkeypatch.setattr(tr, "adam_step", broken)
    with pytest.raises(TrainingError, match=r"fold 2, epoch 0, step 0"):
        tr.train_fold(small_ds, plan, 2, _fast_config())


# --- selection and cross-validation -----------------------------------------


def test_select_ties_go_to_lowest_index():
    assert tr.select_fold([0.9, 0.95, 0.95, 0.7]) == 1
    assert tr.select_fold([0.5]) == 0


def test_cross_validate_selects_best_fold(small_ds):
    plan = split_stratified(small_ds.labels, k=3, seed=0)
    rec = tr.cross_validate(small_ds, plan, _fast_config(epochs=3))
    aucs = [f.val_auc for f in rec.folds]
    assert rec.selected_fold == tr.select_fold(aucs)
    assert rec.test.per_fold["val_auc"] == aucs
    assert rec.test.n == plan.test.size
    assert rec.plan_digest == plan.digest()
    json.dumps(rec.as_dict())


def test_cross_validate_single_fold(small_ds):
    plan = split_stratified(small_ds.labels, k=1, seed=0)
    rec = tr.cross_validate(small_ds, plan, _fast_config())
    assert rec.selected_fold == 0 and len(rec.folds) == 1


def test_cross_validate_with_groups():
    ds = gen_synthetic(SynthSpec(n_samples=90, n_repeats=3, dims=[4, 3]), seed=0)
    plan = split_stratified(ds.labels, k=3, seed=0, groups=ds.group_ids)
    rec = tr.cross_validate(ds, plan, _fast_config())
    assert rec.test.n == plan.test.size // 3


def test_ablation_runs_six_rows_on_one_plan(small_ds):
    plan = split_stratified(small_ds.labels, k=2, seed=0)
    results = tr.run_ablation(small_ds, plan, _fast_config(epochs=1))
    assert [r for r, _ in results] == [1, 2, 3, 4, 5, 6]
    assert {rec.plan_digest for _, rec in results} == {plan.digest()}
    for row, rec in results:
        assert rec.flags == ABLATION_ROWS[row].active()
    table = tr.ablation_table(results).splitlines()
    assert len(table) == 7
    assert table[1].split("\t")[1:6] == ["x", "-", "-", "-", "-"]
    assert table[6].split("\t")[1:6] == ["x"] * 5
