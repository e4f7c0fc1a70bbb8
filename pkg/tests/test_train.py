import math

import numpy as np
import pytest

from avnet import data as D
from avnet import ops
from avnet.data import ClassId, IGNORE
from avnet.model import CDCConfig, ModelConfig, build_model
from avnet.tensor import Tensor, backward
from avnet.train import (ConfusionCounts, LrSchedule, OptimizerState, TrainConfig, TrainingDiverged, adam_step,
                         count_pixels, evaluate, metrics, metrics_report, pad_to_multiple, poly_lr, predict,
                         records_csv, sgd_step, train)

TINY = ModelConfig(encoder_channels=[8, 8, 8, 8], decoder_channels=[8, 8, 8], cdc=CDCConfig(channels=8))


# ----------------------------------------------------------------- schedule

def test_poly_lr_endpoints_and_midpoint():
    s = LrSchedule(1e-4, 0.9, 100)
    assert poly_lr(s, 0) == 1e-4
    assert poly_lr(s, 100) == 0.0
    assert poly_lr(s, 50) == pytest.approx(1e-4 * 0.5 ** 0.9)
    with pytest.raises(ValueError):
        poly_lr(s, 101)


def test_poly_lr_monotone():
    s = LrSchedule(1e-3, 0.9, 40)
    lrs = [poly_lr(s, i) for i in range(41)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))


# --------------------------------------------------------------- optimizers

def test_sgd_momentum_two_steps():
    p = Tensor(np.array([1.0]), requires_grad=True)
    st = OptimizerState("sgd", momentum=0.9)
    p.grad = np.array([1.0])
    sgd_step({"p": p}, st, 0.1)
    assert p.data[0] == pytest.approx(0.9)
    p.grad = np.array([1.0])
    sgd_step({"p": p}, st, 0.1)
    assert p.data[0] == pytest.approx(0.9 - 0.1 * 1.9)
    np.testing.assert_array_equal(p.grad, 0)


def test_adam_first_step_is_lr_sized():
    p = Tensor(np.array([0.0, 0.0]), requires_grad=True)
    p.grad = np.array([3.0, -0.01])
    adam_step({"p": p}, OptimizerState("adam"), 0.01)
    np.testing.assert_allclose(p.data, [-0.01, 0.01], rtol=1e-5)


def test_step_without_grad_raises():
    with pytest.raises(ValueError, match="no gradient"):
        sgd_step({"w": Tensor(np.ones(1), requires_grad=True)}, OptimizerState(), 0.1)


# ------------------------------------------------------------------- train

@pytest.fixture(scope="module")
def samples():
    return [D.generate_synthetic(32, seed=k) for k in range(3)]


def test_loss_decreases_on_tiny_model(samples):
    m = build_model(TINY, seed=0)
    r = train(m, samples[:1], TrainConfig(iterations=30, batch_size=1, base_lr=1e-2, optimizer="adam"))
    assert np.mean(r.losses[-5:]) < 0.7 * np.mean(r.losses[:5])


def test_training_is_bit_reproducible(samples, tmp_path):
    cfg = TrainConfig(iterations=4, batch_size=2, base_lr=1e-3, checkpoint_every=2)
    runs = []
    for k in range(2):
        out = tmp_path / str(k)
        out.mkdir()
        r = train(build_model(TINY, seed=0), samples, cfg, seed=5, checkpoint_dir=out, log_path=out / "log.csv")
        runs.append((r.csv_text(), r.checkpoint.to_bytes(), (out / "log.csv").read_text()))
    assert runs[0] == runs[1]
    assert runs[0][0] == runs[0][2]
    assert sorted(p.name for p in (tmp_path / "0").glob("*.ckpt")) == ["iter_000002.ckpt", "iter_000004.ckpt"]


def test_different_seed_changes_run(samples):
    cfg = TrainConfig(iterations=2, batch_size=1)
    a = train(build_model(TINY, seed=0), samples, cfg, seed=1).losses
    b = train(build_model(TINY, seed=0), samples, cfg, seed=2).losses
    assert a != b


def test_diverged_training_names_iteration(samples):
    m = build_model(TINY, seed=0)
    m.parameters()["head.weight"].data[:] = np.nan
    with pytest.raises(TrainingDiverged, match="iteration 0"):
        train(m, samples, TrainConfig(iterations=1, batch_size=1))


def test_empty_dataset_rejected():
    with pytest.raises(ValueError, match="empty"):
        train(build_model(TINY), [], TrainConfig(iterations=1))


def test_csv_format():
    text = records_csv([{"iteration": 0, "epoch": 0, "lr": 0.1, "loss": 1.5}])
    assert text == "iteration,epoch,lr,loss\n0,0,0.1,1.5\n"


# --------------------------------------------------------- class weighting

def test_intersection_contribution_negligible(samples):
    s = samples[0]
    assert (s.class_map == ClassId.INTERSECTION).any()
    rng = np.random.default_rng(0)
    probs = ops.softmax_channels(Tensor(rng.standard_normal((1, 4, 32, 32))))
    target, w = s.class_map[None], s.weight_map[None, None]
    full = ops.weighted_cross_entropy(probs, target, w).item()
    no_x = np.where(target == ClassId.INTERSECTION, IGNORE, target)
    without = ops.weighted_cross_entropy(probs, no_x, w).item()
    assert abs(full - without) / full < 1e-9


# -------------------------------------------------------------- evaluation

def test_metrics_by_substitution():
    m = metrics(ConfusionCounts(tp_at=8, fp_at=2, tp_ve=9, fp_ve=1))
    assert (m["tpr_at"], m["tpr_ve"], m["accuracy"]) == (0.8, 0.9, 0.85)
    assert m["undefined"] == []


def test_perfect_prediction_is_all_ones(samples):
    cm = samples[1].class_map
    m = metrics(count_pixels(cm, cm), recall=True)
    assert all(m[k] == 1.0 for k in ("tpr_at", "tpr_ve", "accuracy", "recall_at", "recall_ve"))


def test_all_venule_predictor():
    truth = np.array([[1, 1, 2, 2, 0]])
    c = count_pixels(np.full_like(truth, ClassId.VENULE), truth)
    m = metrics(c, recall=True)
    assert math.isnan(m["tpr_at"]) and m["undefined"] == ["tpr_at"]
    assert m["tpr_ve"] == 0.5 and m["recall_at"] == 0.0 and m["recall_ve"] == 1.0
    assert metrics_report(c)["tpr_at"] is None


def test_missed_vessels_do_not_enter_ratios():
    truth = np.array([[1, 1, 2]])
    pred = np.array([[1, 0, 3]])
    c = count_pixels(pred, truth)
    assert (c.tp_at, c.missed_at, c.missed_ve) == (1, 1, 1)
    assert metrics(c)["tpr_at"] == 1.0


def test_ignored_and_background_truth_not_counted():
    truth = np.array([[0, IGNORE, 3]])
    assert count_pixels(np.ones_like(truth), truth).evaluated == 0
    with pytest.raises(ValueError):
        metrics_report(ConfusionCounts())


@pytest.mark.parametrize("h,w,want", [(584, 565, (584, 568)), (64, 64, (64, 64)), (5, 3, (8, 8))])
def test_pad_to_multiple(h, w, want):
    img = np.random.default_rng(0).random((3, h, w))
    padded, size = pad_to_multiple(img, 8)
    assert padded.shape[1:] == want and size == (h, w)
    np.testing.assert_array_equal(padded[:, :h, :w], img)


def test_reflect_padding_values():
    img = np.tile(np.arange(6.0), (1, 8, 1))
    padded, _ = pad_to_multiple(img, 8)
    np.testing.assert_array_equal(padded[0, 0], [0, 1, 2, 3, 4, 5, 4, 3])
    assert padded.shape == (1, 8, 8)


def test_predict_crops_back(samples):
    m = build_model(TINY)
    probs = predict(m, samples[0].image[:, :29, :30])
    assert probs.shape == (4, 29, 30)
    np.testing.assert_allclose(probs.sum(axis=0), 1, atol=1e-6)


def test_evaluate_runs(samples):
    counts, report = evaluate(build_model(TINY), samples[:2], recall=True)
    assert report["pixels_evaluated"] == counts.evaluated > 0
    assert "recall_at" in report
