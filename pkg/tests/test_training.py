import math

import numpy as np
import pandas as pd
import pytest
from sklearn.metrics import f1_score, matthews_corrcoef, roc_auc_score

from src.audiofuse import training
from src.audiofuse.autodiff import Parameter, Tensor
from src.audiofuse.dsp import MelConfig
from src.audiofuse.errors import ConfigError, EmptySplitError, NumericError, ParameterError
from src.audiofuse.model import AudioFuseModel
from src.audiofuse.training import (
    HISTORY_COLUMNS,
    PROB_FLOOR,
    AdamW,
    EarlyStopping,
    EvalReport,
    OptimState,
    TrainConfig,
    adamw_step,
    aggregate,
    auto_class_weights,
    bce_value,
    build_feature_set,
    compare_architectures,
    format_comparison,
    metrics,
    multi_seed_eval,
    rank_auc,
    select_split,
    train,
    trapezoid_auc,
    weighted_bce,
    write_history,
)
from tests.common_fixtures import TINY_MODEL


def report_with(accuracy, f1=0.5, roc_auc=0.5, mcc=0.0):
    return EvalReport(accuracy, f1, roc_auc, mcc, tp=1, fp=1, tn=1, fn=1, n=4)


# Loss


def test_bce_of_even_odds_is_ln2():
    loss = weighted_bce(Tensor([0.5], dtype=np.float64), np.array([1]), (1.0, 1.0))
    assert loss.item() == pytest.approx(math.log(2.0))


def test_bce_clamps_probabilities():
    loss = weighted_bce(Tensor([0.0, 1.0], dtype=np.float64), np.array([1, 0]), (1.0, 1.0))
    assert np.isfinite(loss.item())
    assert loss.item() == pytest.approx(-math.log(PROB_FLOOR), rel=1e-6)


def test_bce_matches_numpy_value_and_weights():
    probs = np.array([0.2, 0.7, 0.9, 0.4])
    labels = np.array([0, 1, 1, 0])
    loss = weighted_bce(Tensor(probs, dtype=np.float64), labels, (0.5, 2.0)).item()
    assert loss == pytest.approx(bce_value(probs, labels, (0.5, 2.0)))


def test_bce_gradient_on_probabilities():
    p = Tensor([0.25], requires_grad=True, dtype=np.float64)
    weighted_bce(p, np.array([1]), (3.0, 3.0)).backward()
    np.testing.assert_allclose(p.grad, [-3.0 / 0.25])


def test_bce_rejects_empty_batch_and_shape_mismatch():
    with pytest.raises(ParameterError):
        weighted_bce(Tensor(np.zeros(0)), np.zeros(0), (1.0, 1.0))
    with pytest.raises(ParameterError):
        weighted_bce(Tensor([0.5, 0.5]), np.array([1]), (1.0, 1.0))


def test_auto_class_weights_on_imbalanced_split():
    w0, w1 = auto_class_weights([0, 0, 0, 1] * 5)
    assert w0 == pytest.approx(2.0 / 3.0)
    assert w1 == pytest.approx(2.0)


def test_auto_class_weights_need_both_classes():
    with pytest.raises(ParameterError):
        auto_class_weights([1, 1, 1])


# Optimizer


def test_adamw_first_step_is_lr_sized():
    p = Parameter(np.zeros(3), dtype=np.float64)
    cfg = TrainConfig(weight_decay=0.0)
    adamw_step([p], [np.ones(3)], OptimState.for_parameters([p]), cfg)
    np.testing.assert_allclose(p.data, -3e-4 / (1.0 + 1e-8), rtol=1e-12)
    assert p.data[0] == pytest.approx(-2.9999e-4, rel=1e-4)


def test_adamw_decay_with_zero_gradient():
    p = Parameter(np.full(2, 2.0), dtype=np.float64)
    cfg = TrainConfig(lr=0.1, weight_decay=0.01)
    adamw_step([p], [np.zeros(2)], OptimState.for_parameters([p]), cfg)
    np.testing.assert_allclose(p.data, 2.0 * (1.0 - 0.1 * 0.01))


def test_adamw_skips_decay_for_norm_parameters():
    p = Parameter(np.full(2, 2.0), decay=False, dtype=np.float64)
    adamw_step([p], [np.zeros(2)], OptimState.for_parameters([p]), TrainConfig(lr=0.1, weight_decay=0.5))
    np.testing.assert_array_equal(p.data, [2.0, 2.0])


def test_adamw_leaves_parameters_without_gradient():
    a = Parameter(np.ones(2), dtype=np.float64)
    b = Parameter(np.ones(2), dtype=np.float64)
    optimizer = AdamW([a, b], TrainConfig())
    a.grad = np.ones(2)
    optimizer.step()
    assert a.data[0] < 1.0
    np.testing.assert_array_equal(b.data, [1.0, 1.0])
    optimizer.zero_grad()
    assert a.grad is None


@pytest.mark.parametrize(
    "overrides",
    [
        {"lr": 0.0},
        {"weight_decay": -1.0},
        {"batch_size": 0},
        {"patience": 0},
        {"patience": 300},
        {"trainable": "branches"},
        {"class_weights": (1.0, 0.0)},
        {"class_weights": (1.0, 2.0, 3.0)},
    ],
)
def test_train_config_validation(overrides):
    with pytest.raises(ConfigError):
        TrainConfig(**overrides)


# Metrics


def test_rank_auc_worked_example():
    assert rank_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)


def test_confusion_worked_example():
    probs = np.array([0.9, 0.8, 0.7, 0.1, 0.2, 0.3])
    labels = np.array([1, 1, 0, 1, 0, 0])
    report = metrics(probs, labels)
    assert (report.tp, report.fp, report.fn, report.tn) == (2, 1, 1, 2)
    assert report.f1 == pytest.approx(2.0 / 3.0)
    assert report.mcc == pytest.approx(1.0 / 3.0)
    assert report.accuracy == pytest.approx(2.0 / 3.0)


def test_perfect_separation():
    report = metrics([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
    assert report.accuracy == 1.0
    assert report.f1 == 1.0
    assert report.roc_auc == 1.0
    assert report.mcc == 1.0


def test_threshold_is_inclusive():
    assert metrics([0.5], [1]).tp == 1


def test_single_class_leaves_auc_and_mcc_undefined():
    report = metrics([0.2, 0.7, 0.9], [1, 1, 1])
    assert report.roc_auc is None
    assert report.mcc is None
    assert report.accuracy == pytest.approx(2.0 / 3.0)


def test_no_positive_predictions_gives_zero_mcc():
    report = metrics([0.1, 0.2, 0.3, 0.4], [0, 1, 0, 1])
    assert report.mcc == 0.0
    assert report.f1 == 0.0


def test_rank_and_trapezoid_auc_agree():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(2, 40))
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        # coarse scores force ties
        probs = np.round(rng.random(n), int(rng.integers(1, 4)))
        assert abs(rank_auc(probs, labels) - trapezoid_auc(probs, labels)) < 1e-9


def test_metrics_match_reference_implementation():
    rng = np.random.default_rng(1)
    for _ in range(50):
        labels = rng.integers(0, 2, 60)
        probs = np.clip(labels * 0.3 + rng.random(60) * 0.7, 0.0, 1.0)
        report = metrics(probs, labels)
        predicted = (probs >= 0.5).astype(int)
        assert report.roc_auc == pytest.approx(roc_auc_score(labels, probs), abs=1e-12)
        assert report.f1 == pytest.approx(f1_score(labels, predicted, zero_division=0), abs=1e-12)
        assert report.mcc == pytest.approx(matthews_corrcoef(labels, predicted), abs=1e-12)


def test_mcc_symmetries():
    probs = np.array([0.9, 0.6, 0.4, 0.2, 0.7, 0.3])
    labels = np.array([1, 0, 1, 0, 1, 0])
    base = metrics(probs, labels).mcc
    assert metrics(1.0 - probs + 1e-9, 1 - labels).mcc == pytest.approx(base)
    assert metrics(1.0 - probs + 1e-9, labels).mcc == pytest.approx(-base)


def test_metrics_reject_mismatched_input():
    with pytest.raises(ParameterError):
        metrics([0.5, 0.5], [1])
    with pytest.raises(ParameterError):
        metrics([], [])


# Aggregation


def test_aggregate_identical_runs_have_zero_spread():
    result = aggregate([0, 1, 2], [report_with(0.75)] * 3)
    assert result.mean["accuracy"] == 0.75
    assert result.std["accuracy"] == 0.0


def test_aggregate_sample_standard_deviation():
    result = aggregate([0, 1], [report_with(0.8), report_with(0.9)])
    assert result.mean["accuracy"] == pytest.approx(0.85)
    assert result.std["accuracy"] == pytest.approx(0.0707, abs=1e-4)


def test_aggregate_is_order_invariant():
    reports = [report_with(a) for a in (0.61, 0.93, 0.72, 0.88)]
    forward = aggregate([0, 1, 2, 3], reports)
    backward = aggregate([3, 2, 1, 0], reports[::-1])
    assert forward.mean == backward.mean
    assert forward.std == backward.std


def test_aggregate_skips_undefined_metrics():
    result = aggregate([0, 1], [report_with(0.5, roc_auc=None), report_with(0.7, roc_auc=0.9)])
    assert result.mean["roc_auc"] == 0.9
    assert result.std["roc_auc"] is None


def test_multi_seed_eval_needs_two_seeds():
    with pytest.raises(ParameterError):
        multi_seed_eval(lambda seed: report_with(0.5), [7])


def test_multi_seed_eval_runs_every_seed():
    result = multi_seed_eval(lambda seed: report_with(seed / 10.0), [3, 5])
    assert result.seeds == [3, 5]
    assert result.mean["accuracy"] == pytest.approx(0.4)
    assert result.to_dict()["n"] == 2


def test_compare_architectures_runs_every_arch_and_seed():
    calls = []

    def run_fn(flag, seed):
        calls.append((flag, seed))
        return report_with({"fuse-concat": 0.9, "vit": 0.8}[flag] + seed / 100.0)

    results = compare_architectures(run_fn, ["fuse-concat", "vit"], [0, 2])
    assert calls == [("fuse-concat", 0), ("fuse-concat", 2), ("vit", 0), ("vit", 2)]
    assert list(results) == ["fuse-concat", "vit"]
    assert results["fuse-concat"].mean["accuracy"] == pytest.approx(0.91)
    assert results["vit"].std["accuracy"] == pytest.approx(math.sqrt(2) * 0.01)


@pytest.mark.parametrize("flags", [[], ["vit", "vit"]])
def test_compare_architectures_needs_distinct_archs(flags):
    with pytest.raises(ParameterError):
        compare_architectures(lambda flag, seed: report_with(0.5), flags, [0, 1])


def test_format_comparison_shows_mean_and_spread():
    results = {
        "fuse-concat": aggregate([0, 1], [report_with(0.8), report_with(0.9)]),
        "cnn": aggregate([0, 1], [report_with(0.7, roc_auc=None), report_with(0.7, roc_auc=None)]),
    }
    lines = format_comparison(results).splitlines()
    assert lines[0].split() == ["arch", "accuracy", "f1", "roc_auc", "mcc"]
    assert lines[1].startswith("fuse-concat") and "0.8500 ± 0.0707" in lines[1]
    assert lines[2].startswith("cnn") and "0.7000 ± 0.0000" in lines[2] and "n/a" in lines[2]


# Early stopping


def test_early_stopping_keeps_first_best_epoch():
    stopper = EarlyStopping(patience=30)
    values = [0.6, 0.7] + [0.7] * 40
    for epoch, value in enumerate(values, start=1):
        stopper.update(epoch, value)
        if stopper.should_stop:
            break
    assert epoch == 32
    assert stopper.best_epoch == 2
    assert stopper.best_value == 0.7


@pytest.mark.parametrize(
    "values, best_epoch",
    [([0.5, 0.8, 0.8], 2), ([0.8, 0.6, 0.8, 0.8], 1), ([0.4, 0.8, 0.7, 0.8, 0.9], 5)],
)
def test_equal_later_accuracy_does_not_move_best_epoch(values, best_epoch):
    stopper = EarlyStopping(patience=10)
    improved = [stopper.update(epoch, value) for epoch, value in enumerate(values, start=1)]
    assert stopper.best_epoch == best_epoch
    assert improved.count(True) == len(set(np.maximum.accumulate(values)))


# Data and the training loop


@pytest.fixture
def tiny_splits(synthetic_dataset):
    out_dir, entries = synthetic_dataset
    mel_cfg = MelConfig(image_size=TINY_MODEL.image_size)
    return tuple(
        build_feature_set(
            select_split(entries, split), out_dir, mel_cfg=mel_cfg, split=split, wave_len=TINY_MODEL.wave_len
        )
        for split in ("train", "validation")
    )


def test_feature_set_shapes(tiny_splits):
    train_set, val_set = tiny_splits
    assert len(train_set) + len(val_set) == 12
    assert train_set.spectrograms.shape == (len(train_set), 32, 32, 1)
    assert train_set.waveforms.shape == (len(train_set), 256)
    assert train_set.waveforms.dtype == np.float32


def test_feature_set_needs_rows(tmp_path):
    with pytest.raises(EmptySplitError):
        build_feature_set([], tmp_path, split="test")
    with pytest.raises(EmptySplitError):
        select_split([], "test")


class TestSpectrogramCache:
    @pytest.fixture
    def rows(self, synthetic_dataset):
        out_dir, entries = synthetic_dataset
        return out_dir, select_split(entries, "validation")

    def build(self, rows, cache_dir, image_size=TINY_MODEL.image_size):
        out_dir, entries = rows
        return build_feature_set(
            entries, out_dir, need_waveforms=False, mel_cfg=MelConfig(image_size=image_size), cache_dir=cache_dir
        )

    def test_second_build_reads_cached_images(self, rows, tmp_path, monkeypatch):
        first = self.build(rows, tmp_path / "cache")
        assert len(list((tmp_path / "cache").glob("*.afsp"))) == len(rows[1])

        def refuse(*args, **kwargs):
            raise AssertionError("featurized despite a warm cache")

        monkeypatch.setattr(training, "featurize_batch", refuse)
        second = self.build(rows, tmp_path / "cache")
        np.testing.assert_array_equal(first.spectrograms, second.spectrograms)

    def test_cached_images_match_uncached_features(self, rows, tmp_path):
        cached = self.build(rows, tmp_path / "cache")
        plain = self.build(rows, None)
        np.testing.assert_array_equal(cached.spectrograms, plain.spectrograms)

    def test_image_size_is_part_of_the_key(self, rows, tmp_path):
        self.build(rows, tmp_path / "cache")
        larger = self.build(rows, tmp_path / "cache", image_size=48)
        assert larger.spectrograms.shape[1:] == (48, 48, 1)
        assert len(list((tmp_path / "cache").glob("*.afsp"))) == 2 * len(rows[1])

    def test_corrupt_entry_is_recomputed(self, rows, tmp_path):
        first = self.build(rows, tmp_path / "cache")
        victim = sorted((tmp_path / "cache").glob("*.afsp"))[0]
        victim.write_bytes(b"garbage")
        again = self.build(rows, tmp_path / "cache")
        np.testing.assert_array_equal(first.spectrograms, again.spectrograms)
        assert victim.read_bytes().startswith(b"AFSP")


def test_training_is_deterministic(tiny_splits):
    cfg = TrainConfig(max_epochs=3, patience=3, batch_size=4, seed=5)
    runs = []
    for _ in range(2):
        model = AudioFuseModel(TINY_MODEL, seed=5)
        runs.append((train(model, *tiny_splits, cfg), model.state_dict()))
    (first, first_state), (second, second_state) = runs
    assert [r.__dict__ for r in first.history] == [r.__dict__ for r in second.history]
    assert all(np.array_equal(first_state[name], second_state[name]) for name in first_state)
    assert len(first.history) == 3
    assert 1 <= first.best_epoch <= 3


def test_training_restores_best_epoch(tiny_splits):
    model = AudioFuseModel(TINY_MODEL, seed=0)
    result = train(model, *tiny_splits, TrainConfig(max_epochs=4, patience=4, batch_size=4))
    _, val_set = tiny_splits
    probs = model.predict(val_set.spectrograms, val_set.waveforms, 4)
    assert metrics(probs, val_set.labels).accuracy == result.best_val_acc
    assert not model.training


def test_non_finite_loss_is_reported(tiny_splits):
    model = AudioFuseModel(TINY_MODEL, seed=0)
    model.head.output.bias.data = np.full_like(model.head.output.bias.data, np.nan)
    with pytest.raises(NumericError, match="epoch 1"):
        train(model, *tiny_splits, TrainConfig(max_epochs=2, patience=1, batch_size=4))
    assert all(p.requires_grad for p in model.parameters())


def test_head_training_freezes_branches(tiny_splits):
    model = AudioFuseModel(TINY_MODEL.with_arch_flag("fuse-film"), seed=1)
    branch_names = {name for name, _ in model.named_parameters() if name.startswith(("vit.", "cnn."))}
    branch_names |= {name for name, _ in model.named_buffers() if name.startswith(("vit.", "cnn."))}
    before = {name: value.copy() for name, value in model.state_dict().items()}
    train(model, *tiny_splits, TrainConfig(max_epochs=2, patience=2, batch_size=4, trainable="head"))
    after = model.state_dict()
    assert all(np.array_equal(before[name], after[name]) for name in branch_names)
    assert all(p.requires_grad for p in model.parameters())


def test_write_history(tmp_path, tiny_splits):
    result = train(AudioFuseModel(TINY_MODEL, seed=2), *tiny_splits, TrainConfig(max_epochs=2, patience=2))
    write_history(result.history, tmp_path / "history.csv")
    frame = pd.read_csv(tmp_path / "history.csv")
    assert list(frame.columns) == HISTORY_COLUMNS
    assert frame["epoch"].tolist() == [1, 2]


@pytest.mark.slow
def test_tiny_fusion_model_overfits_sixteen_clips(tmp_path):
    from src.audiofuse.signal_io import SynthSpec, write_synthetic_dataset

    entries = write_synthetic_dataset(SynthSpec(n_per_class=8, rng_seed=4, cue_mode="both"), tmp_path / "d")
    data = build_feature_set(
        entries, tmp_path / "d", mel_cfg=MelConfig(image_size=TINY_MODEL.image_size), wave_len=TINY_MODEL.wave_len
    )
    model = AudioFuseModel(TINY_MODEL, seed=0)
    result = train(model, data, data, TrainConfig(max_epochs=200, patience=200, batch_size=16))
    assert result.best_val_acc == 1.0
    assert result.history[-1].train_loss < result.history[0].train_loss
