"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 6-9 share one pipeline run (dataset, interpolator, Monte-Carlo
variance, uncertainty predictor) built by the ``acceptance_run`` fixture,
which takes most of the suite's runtime.
"""
import json
import math
import time

import numpy as np
import pytest
import torch
from scipy.stats import pearsonr, spearmanr

from due import diffusion as dif
from due import pipeline
from due import uncertainty as unc
from due.config import load_config
from due.explain import TrainConfig, channel_weights_and_cam, train
from due.metrics import iou, pr_auc, precision_recall_f1, roc_auc
from due.report import load_report
from due.volume_data import DenseAnnotation, SparseAnnotation, generate_mask_pool

from conftest import record_acceptance
from oracles import iou_sets, pr_auc_thresholds, prf_sets, roc_auc_pairs
from stubs import NoisyStub, X0Stub
from test_explain import central_difference_weights
from toy import ToyNet3D

# Full-size acceptance configuration: 64x64 slices, 20 balanced training volumes,
# 50 epochs, lambda 1, three classifier seeds.
ACCEPTANCE_OVERRIDES = [
    "data.synthetic.n_pos=40",
    "data.synthetic.n_neg=40",
    "data.split_ratios=[0.25,0.15,0.6]",
    "train.n_seeds=3",
    "train.epochs=50",
    "train.lam=1.0",
    "uq.pool_size=16",
]
HELD_OUT_SEED = 424242
GAPS = (2, 4, 8)
N_TEST_INTERVALS = 12
T_RUNS = 8


# ---------------------------------------------------------------------------
# Criteria 1-5: oracle and property checks
# ---------------------------------------------------------------------------


def test_criterion_01_metric_oracles():
    rng = np.random.default_rng(2024)
    t0 = time.time()
    worst = 0.0
    n_instances = 1000
    for _ in range(n_instances):
        a = rng.random((4, 4, 4)) < rng.random()
        b = rng.random((4, 4, 4)) < rng.random()
        worst = max(worst, abs(iou(a, b) - iou_sets(a, b)))
        worst = max(worst, *(abs(x - y) for x, y in zip(precision_recall_f1(a, b), prf_sets(a, b))))
        n = int(rng.integers(2, 201))
        scores = rng.integers(0, int(rng.integers(2, 50)), n) / 10.0  # coarse grid forces ties
        labels = rng.integers(0, 2, n)
        if labels.sum() == 0:
            labels[0] = 1
        if labels.sum() == n:
            labels[0] = 0
        worst = max(worst, abs(roc_auc(scores, labels) - roc_auc_pairs(scores, labels)))
        worst = max(worst, abs(pr_auc(scores, labels) - pr_auc_thresholds(scores, labels)))
    elapsed = time.time() - t0
    ok = worst <= 1e-9 and elapsed < 60
    record_acceptance(1, "metric oracle equivalence", ok,
                      f"{n_instances} instances, max |diff| {worst:.2e} (tol 1e-9), {elapsed:.1f}s (< 60s)")
    assert ok


def test_criterion_02_diffusion_identities():
    rng = np.random.default_rng(7)
    exact = True
    for kind in ("linear", "cosine"):
        s = dif.make_schedule(200, 5e-4, 0.1, kind)
        abar = []
        prod = 1.0
        for b in s.betas:
            prod *= 1.0 - b
            abar.append(prod)
        for t in (1, 2, 50, 137, 200):
            x0 = rng.standard_normal((8, 8))
            eps = rng.standard_normal((8, 8))
            expected = math.sqrt(abar[t - 1]) * x0 + math.sqrt(1.0 - abar[t - 1]) * eps
            exact &= bool(np.array_equal(dif.forward_noise(x0, t, eps, s), expected))
    monotone = all(
        np.all(np.diff(dif.make_schedule(n, lo, hi, kind).alpha_bars) < 0)
        for n in (2, 10, 200, 1000) for lo, hi in ((1e-4, 0.02), (5e-4, 0.1), (0.01, 0.5))
        for kind in ("linear", "cosine")
    )

    class Oracle:
        eps = None

        def __call__(self, x, t):
            return self.eps

    g = torch.Generator().manual_seed(0)
    losses = []
    s = dif.make_schedule()
    for _ in range(20):
        n = int(torch.randint(1, 17, (1,), generator=g))
        target, past, future = ((torch.rand(n, 1, 16, 16, generator=g) > 0.5).float() for _ in range(3))
        t = torch.randint(1, s.n_steps + 1, (n,), generator=g)
        eps = torch.randn(n, 1, 16, 16, generator=g)
        stub = Oracle()
        stub.eps = eps
        keep = dif.ConditionMaskPolicy().sample(n, g)
        losses.append(dif.diffusion_loss(stub, target, past, future, torch.rand(n, generator=g), s,
                                         dif.ConditionMaskPolicy(), g, t=t, eps=eps, keep=keep).item())
    ok = exact and monotone and max(losses) == 0.0
    record_acceptance(2, "diffusion identities", ok,
                      f"closed form exact={exact}, eps-oracle max loss={max(losses)}, alpha_bar monotone={monotone}")
    assert ok


def test_criterion_03_gradcam_gradient_check():
    t0 = time.time()
    worst = 0.0
    for case in range(20):
        torch.manual_seed(case)
        model = ToyNet3D().double()
        x = torch.randn(1, 1, 5, 6, 6, dtype=torch.float64)
        target = case % 2
        _, _, w, _ = channel_weights_and_cam(model, x, target, "conv1")
        fd = central_difference_weights(model, x, target)
        rel = (w - fd).abs() / torch.maximum(torch.maximum(w.abs(), fd.abs()), torch.tensor(1e-12))
        worst = max(worst, rel.max().item())
    elapsed = time.time() - t0
    ok = worst <= 1e-3 and elapsed < 60
    record_acceptance(3, "Grad-CAM gradient check", ok,
                      f"20 cases, max relative error {worst:.2e} (tol 1e-3), {elapsed:.1f}s")
    assert ok


def test_criterion_04_mc_variance_oracle():
    s = dif.make_schedule(20, 0.01, 0.3)
    torch.manual_seed(0)
    net = dif.SliceDenoiser(dif.DenoiserConfig(base_channels=8, channel_mult=(1, 2), groups=4)).eval()
    masks = (np.random.default_rng(3).random((3, 16, 16)) > 0.5).astype(np.uint8)
    sp = SparseAnnotation((1, 4, 8), masks, 10)
    worst = 0.0
    for denoiser in (net, NoisyStub()):
        for T in (2, 5):
            u = unc.mc_variance(denoiser, sp, 10, s, T_runs=T, root_seed=17)
            runs = np.stack([dif.interpolate_volume(denoiser, sp, 10, s, seed=unc.run_seed(17, r)).mask
                             for r in range(T)]).astype(np.float64)
            oracle = (runs ** 2).mean(axis=0) - runs.mean(axis=0) ** 2
            worst = max(worst, float(np.abs(u.values - oracle).max()))
    zero = unc.mc_variance(X0Stub(s), sp, 10, s, T_runs=6, root_seed=5)
    ok = worst <= 1e-6 and np.all(zero.values == 0)
    record_acceptance(4, "Monte-Carlo variance oracle", ok,
                      f"max |diff| vs stacked-run oracle {worst:.2e} (tol 1e-6), "
                      f"deterministic stub max variance {zero.values.max()}")
    assert ok


def test_criterion_05_weight_mapping():
    rng = np.random.default_rng(11)
    monotone = attains = True
    for _ in range(200):
        u = rng.exponential(rng.uniform(0.01, 2.0), (7, 4, 4))
        w = unc.uncertainty_to_weights(u, known_depths=(0, 6)).values
        g, wg = u[1:6].ravel(), w[1:6].ravel()
        order = np.argsort(g, kind="stable")
        monotone &= bool(np.all(np.diff(wg[order]) <= 0))
        attains &= bool(wg.min() == 0.0 and wg.max() == 1.0)
    const = unc.uncertainty_to_weights(np.full((5, 3, 3), 0.7), known_depths=(0, 4)).values
    hand = np.zeros((3, 1, 2))
    hand[1, 0, 1] = math.log(3)
    wh = unc.uncertainty_to_weights(hand, known_depths=(0, 2)).values[1, 0]
    ok = monotone and attains and np.all(const == 1) and wh.tolist() == [1.0, 0.0]
    record_acceptance(5, "weight mapping", ok,
                      f"monotone={monotone}, range [0,1] attained={attains}, "
                      f"constant->ones={bool(np.all(const == 1))}, u in {{0, ln 3}} -> {wh.tolist()}")
    assert ok


# ---------------------------------------------------------------------------
# Shared pipeline run for criteria 6-10
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def acceptance_run(tmp_path_factory):
    config = load_config(None, ACCEPTANCE_OVERRIDES, seed=0)
    run = pipeline.open_run(config, tmp_path_factory.mktemp("acceptance") / "run")
    timings = {}
    for name, stage in (("gen-data", pipeline.gen_data), ("train-interp", pipeline.train_interp),
                        ("mc-variance", pipeline.mc_variance), ("train-uq", pipeline.train_uq)):
        t0 = time.time()
        stage(run)
        timings[name] = time.time() - t0
    run.timings = timings
    return run


@pytest.fixture(scope="session")
def held_out(acceptance_run):
    """Monte-Carlo runs on held-out intervals of gaps 2, 4, 8 centred in unseen lesions."""
    run = acceptance_run
    den = run.denoiser()
    masks = generate_mask_pool(run.config.data.synthetic, HELD_OUT_SEED, N_TEST_INTERVALS)
    depth = masks.shape[1]
    items = []
    for i, m in enumerate(masks):
        lo, hi = DenseAnnotation(m).foreground_extent()
        c = (lo + hi) // 2
        for gap in GAPS:
            a = max(0, c - gap // 2)
            b = a + gap
            items.append({"gap": gap, "a": a, "b": b, "gt": m[a + 1:b],
                          "sparse": SparseAnnotation((a, b), m[[a, b]], depth)})
    t0 = time.time()
    maps, runs = unc.mc_variance_many(den.net, [it["sparse"] for it in items], [depth] * len(items),
                                      den.schedule, T_RUNS,
                                      [pipeline.derive_seed(HELD_OUT_SEED, "mc", k) for k in range(len(items))],
                                      run.config.interp.block_size, return_runs=True)
    for it, u, r in zip(items, maps, runs):
        it["variance"] = u.values[it["a"] + 1:it["b"]]
        it["runs"] = r[:, it["a"] + 1:it["b"]]
    return {"items": items, "mc_seconds": time.time() - t0, "denoiser": den}


def test_criterion_06_distance_sensitivity(acceptance_run, held_out):
    items = held_out["items"]
    meta = json.loads((acceptance_run.out_dir("train-interp") / "meta.json").read_text())
    n_triples = meta["n_triples"]
    per_gap = {g: float(np.mean([it["variance"].mean() for it in items if it["gap"] == g])) for g in GAPS}
    gaps = [it["gap"] for it in items]
    values = [float(it["variance"].mean()) for it in items]
    rho = spearmanr(gaps, values).statistic
    non_decreasing = per_gap[2] <= per_gap[4] <= per_gap[8]
    train_minutes = acceptance_run.timings["train-interp"] / 60
    ok = non_decreasing and rho >= 0 and len(items) >= 10 and n_triples >= 200
    record_acceptance(6, "distance sensitivity", ok,
                      f"mean interior variance by gap {{2: {per_gap[2]:.5f}, 4: {per_gap[4]:.5f}, 8: {per_gap[8]:.5f}}}, "
                      f"Spearman {rho:.3f} over {len(items)} intervals, interpolator trained on {n_triples} triples "
                      f"in {train_minutes:.1f} min")
    assert ok


def test_criterion_07_gap2_fidelity(held_out):
    scores = []
    for it in held_out["items"]:
        if it["gap"] != 2:
            continue
        for r in it["runs"]:
            scores.append(iou(r[0] >= 0.5, it["gt"][0]))
    mean = float(np.mean(scores))
    ok = mean >= 0.6
    record_acceptance(7, "gap-2 interpolation fidelity", ok,
                      f"mean IoU {mean:.3f} over {len(scores)} samples (min {min(scores):.3f}); need >= 0.6")
    assert ok


def test_criterion_08_uq_surrogate(acceptance_run, held_out):
    uq = unc.load_uq(acceptance_run.out_dir("train-uq"))
    den = held_out["denoiser"]
    preds, mcs, per_interval = [], [], []
    for it in held_out["items"]:
        ctx = unc.NPContext.for_interval(it["sparse"].masks[0], it["a"], it["sparse"].masks[1], it["b"])
        p = unc.predict_uncertainty(uq, ctx)
        preds.append(p.ravel())
        mcs.append(it["variance"].ravel())
        if it["variance"].std() > 0 and p.std() > 0:
            per_interval.append(pearsonr(p.ravel(), it["variance"].ravel()).statistic)
    r = pearsonr(np.concatenate(preds), np.concatenate(mcs)).statistic

    timing_items = [it for it in held_out["items"] if it["gap"] == 4][:5]
    t0 = time.perf_counter()
    for it in timing_items:
        unc.predict_uncertainty(uq, unc.NPContext.for_interval(it["sparse"].masks[0], it["a"],
                                                              it["sparse"].masks[1], it["b"]))
    t_uq = (time.perf_counter() - t0) / len(timing_items)
    t0 = time.perf_counter()
    for k, it in enumerate(timing_items):
        unc.mc_variance(den.net, it["sparse"], it["sparse"].depth, den.schedule, T_RUNS, root_seed=k,
                        block_size=acceptance_run.config.interp.block_size)
    t_mc = (time.perf_counter() - t0) / len(timing_items)
    speedup = t_mc / t_uq
    train_minutes = acceptance_run.timings["train-uq"] / 60
    ok = r >= 0.5 and speedup >= 10 and train_minutes <= 15
    record_acceptance(8, "uncertainty surrogate fidelity", ok,
                      f"pooled Pearson {r:.3f} (mean per-interval {np.mean(per_interval):.3f}), "
                      f"per-interval {t_uq * 1e3:.1f} ms vs MC {t_mc:.1f} s ({speedup:.0f}x), "
                      f"trained in {train_minutes:.1f} min")
    assert ok


@pytest.fixture(scope="session")
def table_run(acceptance_run):
    run = acceptance_run
    t0 = time.time()
    pipeline.build_targets(run)
    for mode in run.config.train.modes:
        pipeline.train_mode(run, mode)
    pipeline.evaluate(run)
    run.timings["table"] = time.time() - t0
    return run


def test_criterion_09_direction_of_effect(table_run):
    run = table_run
    agg = {m: load_report(run.out_dir("evaluate") / m / "report.json")["aggregates"]
           for m in ("baseline", "baseline_plus", "due")}
    n_train = len(run.dataset().by_split("train"))
    iou_b, iou_p, iou_d = (agg[m]["iou"]["mean"] for m in ("baseline", "baseline_plus", "due"))
    auc_b, auc_d = agg["baseline"]["roc_auc"]["mean"], agg["due"]["roc_auc"]["mean"]
    minutes = (run.timings["table"] + sum(v for k, v in run.timings.items() if k != "table")) / 60
    ok = (iou_d >= iou_b + 0.05 and iou_d >= iou_p and auc_d >= auc_b - 0.02
          and n_train == 20 and minutes <= 60)
    record_acceptance(9, "direction of effect", ok,
                      f"IoU baseline {iou_b:.4f}, baseline+ {iou_p:.4f}, DUE {iou_d:.4f}; "
                      f"ROC-AUC baseline {auc_b:.4f}, DUE {auc_d:.4f}; {n_train} training volumes, "
                      f"{run.config.train.n_seeds} seeds, {minutes:.1f} min")
    assert ok


def test_criterion_10_lambda_zero_equivalence(table_run):
    run = table_run
    data, _ = pipeline.training_data(run, "train", with_targets=True)
    seed = pipeline.classifier_seeds(run.config)[0]
    common = dict(epochs=10, seed=seed, arch=run.config.train.arch)
    _, hb = train(data, TrainConfig(mode="baseline", **common))
    _, hd = train(data, TrainConfig(mode="due", lam=0.0, **common))
    pb = [h["prediction_loss"] for h in hb]
    pd = [h["prediction_loss"] for h in hd]
    ok = pb == pd
    record_acceptance(10, "lambda = 0 equivalence", ok,
                      f"{len(pb)} epochs, logged prediction losses identical={ok} (final {pb[-1]:.6f} vs {pd[-1]:.6f})")
    assert ok


def test_criterion_11_end_to_end_determinism(tmp_path):
    # Default 32x64x64 volumes and architecture with shortened training budgets.
    overrides = ["data.synthetic.n_pos=10", "data.synthetic.n_neg=10", "interp.n_steps=50",
                 "interp.train.epochs=2", "interp.train.max_steps_per_epoch=20", "uq.pool_size=4",
                 "uq.train.epochs=5", "train.epochs=5", "train.n_seeds=2"]
    reports = []
    t0 = time.time()
    for name in ("first", "second"):
        config = load_config(None, overrides, seed=123)
        run = pipeline.open_run(config, tmp_path / name)
        pipeline.run_all(run)
        reports.append({m: load_report(run.out_dir("evaluate") / m / "report.json")
                        for m in config.train.modes})
    same_aggregates = all(reports[0][m]["aggregates"] == reports[1][m]["aggregates"] for m in reports[0])
    same_reports = reports[0] == reports[1]
    ok = same_aggregates
    record_acceptance(11, "end-to-end determinism", ok,
                      f"two full pipeline runs (root seed 123): aggregates identical={same_aggregates}, "
                      f"whole report.json identical={same_reports}, {time.time() - t0:.0f}s")
    assert ok
