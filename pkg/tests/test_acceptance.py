"""Acceptance criteria, one test each, run at their stated tolerances.

Every test records a PASS/FAIL line (see acceptance_log) before asserting,
so the verdicts appear together in the terminal summary. Run on its own
with ``pytest tests/test_acceptance.py -v``. The long learning-signal job
runs only when AVNET_LONG=1.
"""
import os
import time

import numpy as np
import pytest

from acceptance_log import record
from avnet import data as D
from avnet import ops
from avnet.checkpoint import load_checkpoint
from avnet.data import ClassId, IGNORE
from avnet.model import CDCConfig, ForwardContext, ModelConfig, analyze, build_cdc, build_model
from avnet.ops import BatchNormState, Conv2dSpec
from avnet.tensor import Tensor, backward, dot_weights, finite_diff_check, gradient_check
from avnet.train import (ConfusionCounts, TrainConfig, count_pixels, evaluate, metrics, model_checkpoint, train)

import oracles

TRIALS = 10


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# ------------------------------------------------------------ gradient suite

def _op_trials():
    """(label, callable returning max rel error) for every differentiable op, TRIALS draws each."""
    cases = []
    for d in (1, 2, 4, 8, 12):
        for trial in range(TRIALS):
            def conv_case(d=d, trial=trial):
                rng = np.random.default_rng([d, trial])
                s = 1 + trial % 2
                size = 2 * d + 3 + int(rng.integers(0, 4))
                spec = Conv2dSpec(2, 3, 3, 3, s, d, (d, d))
                x = t64(rng.standard_normal((2, 2, size, size)))
                w = t64(rng.standard_normal((3, 2, 3, 3)))
                b = t64(rng.standard_normal(3))
                return max(finite_diff_check(lambda t: ops.conv2d(t, w, b, spec), x, seed=trial),
                           finite_diff_check(lambda t: ops.conv2d(x, t, b, spec), w, seed=trial),
                           finite_diff_check(lambda t: ops.conv2d(x, w, t, spec), b, seed=trial))
            cases.append((f"conv2d d={d}", conv_case))

    for trial in range(TRIALS):
        def pool_case(trial=trial):
            rng = np.random.default_rng([100, trial])
            k, s, p = [(2, 2, 0), (3, 1, 1), (3, 2, 1)][trial % 3]
            shape = (2, 2, 6 + 2 * (trial % 2), 6)
            x = t64(rng.permutation(np.prod(shape)).reshape(shape) * 0.1 + rng.uniform(0, 0.01, shape))
            return finite_diff_check(lambda t: ops.maxpool2d(t, k, s, p), x, seed=trial)
        cases.append(("maxpool2d", pool_case))

        def up_case(trial=trial):
            rng = np.random.default_rng([200, trial])
            return finite_diff_check(ops.upsample_nearest2x, t64(rng.standard_normal((2, 3, 3, 4))), seed=trial)
        cases.append(("upsample_nearest2x", up_case))

        def bn_case(trial=trial):
            rng = np.random.default_rng([300, trial])
            st = BatchNormState.create(3, np.float64)
            st.gamma.data[:] = rng.uniform(0.5, 1.5, 3)
            st.beta.data[:] = rng.standard_normal(3)
            x = t64(rng.normal(1.0, 2.0, (2, 3, 4, 4)))
            f = lambda t: ops.batchnorm2d(t, st, "train")  # noqa: E731
            return max(finite_diff_check(f, x, seed=trial),
                       finite_diff_check(lambda t: ops.batchnorm2d(x, st, "train"), st.gamma, seed=trial),
                       finite_diff_check(lambda t: ops.batchnorm2d(x, st, "train"), st.beta, seed=trial))
        cases.append(("batchnorm2d train", bn_case))

        def ce_case(trial=trial):
            rng = np.random.default_rng([400, trial])
            target = rng.integers(0, 4, (2, 4, 4))
            target[0, 0, :2] = IGNORE
            weights = np.array([1.0, 5.0, 5.0, 1e-12])[target % 4][:, None]
            x = t64(rng.standard_normal((2, 4, 4, 4)))
            return finite_diff_check(
                lambda t: ops.weighted_cross_entropy(ops.softmax_channels(t), target, weights), x)
        cases.append(("softmax + weighted CE", ce_case))
    return cases


def _full_model_trial(trial):
    """Sampled coordinates of a 16x16-input model in train mode.

    Returns (max rel error, checked, kink-skipped, unresolved, max |pre-BN bias grad|).
    """
    m = build_model(seed=trial, dtype=np.float64)
    rng = np.random.default_rng([500, trial])
    x = Tensor(rng.random((2, 3, 16, 16)))
    target = rng.integers(0, 4, (2, 16, 16))
    weights = np.where(target == 0, 1.0, 5.0)[:, None]

    def loss(_):
        return ops.weighted_cross_entropy(m.forward(x, "train", np.random.default_rng(trial)), target, weights)

    params = m.parameters()
    # conv biases feeding a train-mode BN have an identically zero gradient; they are checked separately
    names = [n for n in params if not (n.endswith(".bias") and n[:-5] + ".bn.gamma" in params)]
    worst, checked, skipped, unresolved = 0.0, 0, 0, 0
    for name in rng.choice(names, 6, replace=False):
        p = params[name]
        idx = rng.choice(p.size, size=min(4, p.size), replace=False)
        r = gradient_check(loss, p, epsilon=1e-7, indices=idx, kink_tol=1e-3, resolve_ulps=1e4)
        worst = max(worst, r.max_rel_error)
        checked, skipped, unresolved = checked + r.checked, skipped + r.skipped, unresolved + r.unresolved
    backward(loss(None))
    pre_bn = max(float(np.abs(params[n].grad).max()) for n in params if n.endswith(".bias") and n not in names)
    return worst, checked, skipped, unresolved, pre_bn


def test_gradient_suite():
    t0 = time.perf_counter()
    worst = {}
    for label, case in _op_trials():
        worst[label] = max(worst.get(label, 0.0), case())
    full = [_full_model_trial(t) for t in range(TRIALS)]
    elapsed = time.perf_counter() - t0
    full_err = max(f[0] for f in full)
    checked, skipped, unresolved = (sum(f[k] for f in full) for k in (1, 2, 3))
    pre_bn = max(f[4] for f in full)
    ops_ok = all(v < 1e-4 for v in worst.values())
    full_ok = full_err < 1e-3 and skipped + unresolved <= checked // 4 and pre_bn < 1e-10
    ok = ops_ok and full_ok and elapsed < 300
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record("gradient suite", ok,
           f"{detail}; full model {full_err:.1e} over {checked} coords "
           f"({skipped} kink-skipped, {unresolved} below roundoff), "
           f"pre-BN bias grad {pre_bn:.0e}; {TRIALS} trials each; {elapsed:.0f}s")
    assert ok


# ------------------------------------------------------- convolution oracles

def test_convolution_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    # d=1: integer-valued float64 data makes every partial sum exact, so any summation order agrees bitwise
    exact = True
    for k, s, p in [(1, 1, 0), (3, 1, 1), (3, 2, 0), (7, 1, 3), (7, 2, 2)]:
        x = rng.integers(-9, 10, (2, 3, 13, 12)).astype(np.float64)
        w = rng.integers(-5, 6, (4, 3, k, k)).astype(np.float64)
        b = rng.integers(-5, 6, 4).astype(np.float64)
        got = ops.conv2d(t64(x), t64(w), t64(b), Conv2dSpec(3, 4, k, k, s, 1, (p, p))).data
        exact &= np.array_equal(got, oracles.classic_conv2d(x, w, b, s, (p, p, p, p)))
    worst, combos = 0.0, 0
    for k in (1, 3, 7):
        for s in (1, 2):
            for d in (1, 2, 4, 8, 12):
                for p in sorted({0, d * (k - 1) // 2}):
                    size = d * (k - 1) + 3
                    x = rng.standard_normal((1, 2, size, size + 2))
                    w = rng.standard_normal((2, 2, k, k))
                    b = rng.standard_normal(2)
                    got = ops.conv2d(t64(x), t64(w), t64(b), Conv2dSpec(2, 2, k, k, s, d, (p, p))).data
                    want = oracles.classic_conv2d(x, w, b, s, (p, p, p, p), dilation=d)
                    worst = max(worst, float(np.abs(got - want).max()))
                    combos += 1
    elapsed = time.perf_counter() - t0
    ok = exact and worst < 1e-6 and elapsed < 60
    record("convolution oracles", ok,
           f"d=1 bit-exact {exact}; dilated max abs diff {worst:.1e} over {combos} (k,s,d,pad) combos; {elapsed:.1f}s")
    assert ok


# --------------------------------------------------------- receptive field

def test_receptive_field():
    t0 = time.perf_counter()
    analytic = CDCConfig().receptive_field
    cdc = build_cdc(CDCConfig(channels=1, batchnorm=False), rng=np.random.default_rng(0), dtype=np.float64)
    for name, p in cdc.named_parameters():
        p.data[...] = 1.0 if name.endswith("weight") else 0.0
    x = Tensor(np.ones((1, 1, 96, 96)), requires_grad=True)
    out = cdc.forward(x, ForwardContext("eval"))
    pick = np.zeros(out.shape)
    pick[0, 0, 48, 48] = 1.0
    backward(dot_weights(out, pick))
    ys, xs = np.nonzero(x.grad[0, 0])
    footprint = (int(np.ptp(ys)) + 1, int(np.ptp(xs)) + 1)
    elapsed = time.perf_counter() - t0
    ok = analytic == 53 and footprint == (53, 53) and elapsed < 60
    record("receptive field", ok, f"analytic {analytic}, empirical footprint {footprint[0]}x{footprint[1]}; "
                                  f"{elapsed:.2f}s")
    assert ok


# ---------------------------------------------------------- architecture

def test_architecture_audit(tmp_path):
    model = build_model(seed=0)
    rep = analyze(model, 64)
    stages = {s["name"]: s["out_shape"] for s in rep["stages"]}
    enc = [stages[f"enc{i}"][0] for i in range(4)]
    dec = [stages[f"dec{j}"][0] for j in range(3)]
    sums = {}
    for size in (64, 128, 512):
        x = Tensor(np.random.default_rng(size).random((1, 3, size, size)).astype(np.float32))
        p = model.forward(x, "eval").data
        assert p.shape == (1, 4, size, size)
        sums[size] = float(np.abs(p.sum(axis=1) - 1).max())
    model_checkpoint(model).save(tmp_path / "m.ckpt")
    stored = sum(a.size for a in load_checkpoint(tmp_path / "m.ckpt").params.values())
    ok = (enc == [32, 32, 64, 128] and dec == [128, 64, 32] and rep["output_shape"] == [1, 4, 64, 64]
          and all(v < 1e-6 for v in sums.values()) and rep["parameter_count"] == stored)
    record("architecture audit", ok,
           f"encoder {enc}, decoder {dec}, output {rep['output_shape']}, "
           f"max |sum p - 1| {', '.join(f'{k}px {v:.1e}' for k, v in sums.items())}; "
           f"analyze {rep['parameter_count']} params vs checkpoint {stored}")
    assert ok


# ----------------------------------------------------------------- overfit

def test_overfit_single_sample():
    t0 = time.perf_counter()
    sample = D.generate_synthetic(64, seed=0)
    model = build_model(seed=0)
    cfg = TrainConfig(iterations=500, batch_size=1, base_lr=1e-4, power=0.9, optimizer="adam")
    result = train(model, [sample], cfg, seed=0)
    elapsed = time.perf_counter() - t0
    final = result.losses[-1]
    _, report = evaluate(model, [sample])
    acc = report["accuracy"]
    ok = final < 0.05 and acc is not None and acc > 0.95 and elapsed < 600
    record("overfit test", ok, f"final weighted CE {final:.4f} (target < 0.05), vessel accuracy {acc:.4f} "
                               f"(target > 0.95); Adam, lr 1e-4 poly, batch 1, 500 iters; {elapsed:.0f}s")
    assert ok


# ----------------------------------------------------------------- metrics

def test_metric_equations():
    m = metrics(ConfusionCounts(tp_at=8, fp_at=2, tp_ve=9, fp_ve=1))
    got = (m["tpr_at"], m["tpr_ve"], m["accuracy"])
    cm = D.generate_synthetic(64, seed=3).class_map
    perfect = metrics(count_pixels(cm, cm))
    perfect_vals = (perfect["tpr_at"], perfect["tpr_ve"], perfect["accuracy"])
    ok = got == (0.8, 0.9, 0.85) and perfect_vals == (1.0, 1.0, 1.0)
    record("metric equations", ok, f"metrics(8,2,9,1) = {got}; perfect prediction = {perfect_vals}")
    assert ok


# ---------------------------------------------------- intersection weight

def test_intersection_weighting():
    model = build_model(seed=0)
    worst, batches = 0.0, 0
    for seed in range(5):
        batch = [D.generate_synthetic(64, seed=seed * 2 + k) for k in range(2)]
        target = np.stack([s.class_map for s in batch])
        weights = np.stack([s.weight_map for s in batch])[:, None]
        assert np.isin(target, [ClassId.ARTERIOLE, ClassId.VENULE]).any()
        x = Tensor(np.stack([s.image for s in batch]))
        probs = model.forward(x, "train", np.random.default_rng(seed)).data.astype(np.float64)
        p_t = np.take_along_axis(probs, np.where(target == IGNORE, 0, target)[:, None], axis=1)[:, 0]
        terms = np.where(target == IGNORE, 0.0, weights[:, 0] * -np.log(np.maximum(p_t, 1e-12)))
        share = terms[target == ClassId.INTERSECTION].sum() / terms.sum()
        worst, batches = max(worst, share), batches + 1
    ok = worst < 1e-9
    record("intersection weighting", ok, f"max relative loss share of intersection pixels {worst:.1e} "
                                         f"over {batches} vessel batches (target < 1e-9)")
    assert ok


# ----------------------------------------------------------- data pipeline

def test_data_pipeline():
    cm = np.array([[0, 1, 2, 3, IGNORE]] * 3, dtype=np.uint8)
    rgb = D.decode_labels(cm)
    codec = np.array_equal(D.encode_labels(rgb)[0], cm) and np.array_equal(D.decode_labels(D.encode_labels(rgb)[0]), rgb)
    sources = [D.generate_synthetic(32, seed=k) for k in range(30)]
    ds = D.AugmentedDataset(sources, D.AugmentationConfig(crop_size=32))
    ids = [s.source_id for s in sources]
    folds = D.split_folds(ids, 5, seed=0)
    vals = [set(v) for _, v in folds]
    disjoint = all(not (a & b) for i, a in enumerate(vals) for b in vals[i + 1:])
    covering = set().union(*vals) == set(ids) and all(set(t) | set(v) == set(ids) and not set(t) & set(v)
                                                      for t, v in folds)
    ok = codec and len(ds) == 2490 and disjoint and covering
    record("data pipeline", ok, f"palette round-trip exact {codec}; 30 sources x 83 = {len(ds)} samples; "
                                f"5 folds disjoint {disjoint}, covering {covering}")
    assert ok


# --------------------------------------------------------- reproducibility

def test_reproducibility(tmp_path):
    sources = [D.generate_synthetic(64, seed=k) for k in range(3)]
    ds = D.AugmentedDataset(sources, D.AugmentationConfig(crop_size=64, multiplier=4, seed=1))
    cfg = TrainConfig(iterations=6, batch_size=2, base_lr=1e-4, checkpoint_every=3)
    outs = []
    for k in range(2):
        d = tmp_path / str(k)
        d.mkdir()
        r = train(build_model(seed=0), ds, cfg, seed=7, checkpoint_dir=d, log_path=d / "train.csv")
        r.checkpoint.save(d / "final.ckpt")
        outs.append(((d / "train.csv").read_bytes(), (d / "final.ckpt").read_bytes(),
                     (d / "iter_000003.ckpt").read_bytes()))
    same_csv = outs[0][0] == outs[1][0]
    same_ckpt = outs[0][1] == outs[1][1] and outs[0][2] == outs[1][2]
    ok = same_csv and same_ckpt
    record("reproducibility", ok, f"loss CSV identical {same_csv}, checkpoints identical {same_ckpt} "
                                  f"({len(outs[0][1])} bytes)")
    assert ok


# ------------------------------------------------------------ long job

@pytest.mark.skipif(os.environ.get("AVNET_LONG") != "1", reason="long job; set AVNET_LONG=1")
def test_long_learning_signal():
    t0 = time.perf_counter()
    train_set = [D.generate_synthetic(128, seed=k) for k in range(20)]
    held_out = [D.generate_synthetic(128, seed=1000 + k) for k in range(5)]
    model = build_model(seed=0)
    cfg = TrainConfig(iterations=5000, batch_size=1, base_lr=1e-4, optimizer="adam")
    result = train(model, train_set, cfg, seed=0)
    _, report = evaluate(model, held_out)
    acc = report["accuracy"]
    ok = acc is not None and acc > 0.90
    record("long learning signal", ok, f"held-out vessel accuracy {acc}, final loss {result.losses[-1]:.4f}; "
                                       f"{time.perf_counter() - t0:.0f}s")
    assert ok


def test_long_learning_signal_status():
    if os.environ.get("AVNET_LONG") != "1":
        record("long learning signal", None, "optional long job not run (set AVNET_LONG=1)")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v", *sys.argv[1:]]))
