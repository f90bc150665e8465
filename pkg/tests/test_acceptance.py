"""Acceptance suite: one test per shipped guarantee.

Each test prints a one-line verdict with the measured margin (run with
``pytest tests/test_acceptance.py -v -rA`` to see the lines for passing
tests too). Guarantees 1-5 and 8 re-verify the numerics against independent
straight-from-the-formula oracles under explicit runtime budgets; 6, 7 and 9
train the adaptation matrix on the default benchmark and take minutes.
"""

import json
import time

import numpy as np
import pytest

from segadapt.autodiff import (
    Tensor,
    add,
    bilinear_upsample,
    conv2d,
    leaky_relu,
    linear,
    log_clamped,
    mean_all,
    mul,
    no_grad,
    scale,
    softmax_channel,
    sum_all,
    take0,
)
from segadapt.config import DatasetConfig, ExperimentConfig, build_bundle, with_budget
from segadapt.data import IGNORE_INDEX, SealedLabels, SplitPlan
from segadapt.losses import (
    class_average,
    global_adversarial_loss,
    global_discriminator_loss,
    segmentation_loss,
    semantic_adversarial_conv,
    semantic_adversarial_fc,
    semantic_discriminator_conv,
    semantic_discriminator_fc,
)
from segadapt.metrics import ConfusionMatrix, mean_iou
from segadapt.networks import (
    GlobalDiscriminator,
    ModelConfig,
    SemanticDiscriminatorConv,
    SemanticDiscriminatorFC,
)
from segadapt.training import Adam, NesterovSGD, TrainConfig, poly_lr, train

from test_autodiff import check_fd
from test_losses import (
    CFG,
    np_global,
    oracle_class_average,
    oracle_conv,
    oracle_fc,
    oracle_seg,
    rand_labels,
    rand_simplex,
)


def verdict(name, ok, detail):
    print(f"acceptance[{name}]: {'PASS' if ok else 'FAIL'} — {detail}")


# ---------------------------------------------------------------------------
# 1. gradient suite: every op vs central finite differences
# ---------------------------------------------------------------------------

def test_gradient_suite():
    t0 = time.perf_counter()
    conv_cases = [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 1, 4), (1, 0, 1),
                  (3, 2, 2), (2, 0, 2), (1, 2, 3), (2, 2, 4), (1, 1, 2)]
    n_ops = 12
    for i in range(10):
        rng = np.random.default_rng(9000 + i)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((3, 4))
        check_fd(lambda x, y: add(x, y), a.copy(), b.copy())
        check_fd(lambda x, y: mul(x, y), a.copy(), b.copy())
        check_fd(lambda x: scale(x, -1.7), a.copy())
        check_fd(lambda x: sum_all(x), a.copy())
        check_fd(lambda x: mean_all(x), a.copy())
        check_fd(lambda x: log_clamped(x), rng.uniform(0.1, 3.0, size=(4, 3)))
        away = rng.standard_normal((4, 4))
        away[np.abs(away) < 1e-2] = 0.5  # keep clear of the kink
        check_fd(lambda x: leaky_relu(x, 0.2), away)
        sm = rng.standard_normal((4, 3, 2))
        check_fd(lambda x: softmax_channel(x), sm.copy())
        check_fd(lambda x: take0(x, i % 4), sm.copy())
        check_fd(lambda x, w, bb: linear(x, w, bb),
                 rng.standard_normal(5), rng.standard_normal((3, 5)), rng.standard_normal(3))
        stride, padding, kh = conv_cases[i]
        check_fd(lambda x, k, bb: conv2d(x, k, bb, stride=stride, padding=padding),
                 rng.standard_normal((2, 6, 5)), rng.standard_normal((3, 2, kh, kh)),
                 rng.standard_normal(3))
        h, w = (int(v) for v in rng.integers(2, 5, size=2))
        oh, ow = h + int(rng.integers(0, 4)), w + int(rng.integers(0, 4))
        check_fd(lambda x: bilinear_upsample(x, oh, ow), rng.standard_normal((2, h, w)))
    wall = time.perf_counter() - t0
    verdict("gradient suite", wall < 30.0,
            f"{n_ops} ops x 10 instances, step 1e-5, rel err < 1e-4, {wall:.1f}s (budget 30s)")
    assert wall < 30.0


# ---------------------------------------------------------------------------
# 2. loss-oracle suite: all eight losses + class_average vs the raw formulas
# ---------------------------------------------------------------------------

def test_loss_oracle_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(9100)
    c = 4
    gdisc = GlobalDiscriminator(c, CFG, seed=8, dtype=np.float64)
    fc = SemanticDiscriminatorFC(c, CFG, seed=9, dtype=np.float64)
    conv = SemanticDiscriminatorConv(c, CFG, seed=10, dtype=np.float64)
    worst = 0.0

    def close(got, want):
        nonlocal worst
        diff = abs(got - want)
        worst = max(worst, diff)
        assert diff <= 1e-9

    for i in range(50):
        norm = bool(i % 2)
        h, w = (int(v) for v in rng.integers(3, 8, size=2))
        P = rand_simplex(rng, (c, h, w))
        y = rand_labels(rng, c, h, w)
        z = int(rng.integers(0, 2))
        F = rng.standard_normal((CFG.feature_channels, h, w))

        close(segmentation_loss(Tensor(P), y, normalize=norm).item(), oracle_seg(P, y, norm))

        # the patch discriminator downsamples at every layer, so its input is larger
        hg, wg = (int(v) for v in rng.integers(8, 17, size=2))
        Pg = rand_simplex(rng, (c, hg, wg))
        with no_grad():
            gout = gdisc.forward(Tensor(Pg)).data
        close(global_adversarial_loss(gdisc, Tensor(Pg), normalize=norm).item(), np_global(gout, 1, norm))
        close(global_discriminator_loss(gdisc, Tensor(Pg), z, normalize=norm).item(), np_global(gout, z, norm))

        vset = class_average(Tensor(F), y, c)
        vec, present = oracle_class_average(F, y, c)
        assert (vset.present == present).all()
        close(float(np.abs(vset.vectors.data - vec).max()), 0.0)

        close(semantic_adversarial_fc(fc, vset, normalize=norm).item(), oracle_fc(fc, vset, c, norm))
        close(semantic_discriminator_fc(fc, vset, z, normalize=norm).item(), oracle_fc(fc, vset, z * c, norm))
        close(semantic_adversarial_conv(conv, Tensor(F), y, normalize=norm).item(), oracle_conv(conv, F, y, c, norm))
        close(semantic_discriminator_conv(conv, Tensor(F), y, z, normalize=norm).item(),
              oracle_conv(conv, F, y, z * c, norm))
    wall = time.perf_counter() - t0
    verdict("loss oracles", wall < 30.0,
            f"8 losses + class_average, 50 inputs each, max |diff| {worst:.2e} (tol 1e-9), {wall:.1f}s (budget 30s)")
    assert wall < 30.0


# ---------------------------------------------------------------------------
# 3. FC -> 1x1-conv weight transplant agrees per pixel
# ---------------------------------------------------------------------------

def test_fc_conv_transplant_per_pixel():
    rng = np.random.default_rng(9200)
    c = 4
    fc = SemanticDiscriminatorFC(c, CFG, seed=16, dtype=np.float64)
    conv = SemanticDiscriminatorConv.from_fc(fc, config=CFG)
    worst = 0.0
    for _ in range(10):
        h, w = (int(v) for v in rng.integers(2, 7, size=2))
        F = rng.standard_normal((CFG.feature_channels, h, w))
        with no_grad():
            out = conv.forward(Tensor(F)).data
            for i in range(h):
                for j in range(w):
                    ref = fc.forward(Tensor(F[:, i, j])).data
                    worst = max(worst, float(np.abs(out[:, i, j] - ref).max()))
    verdict("fc/conv transplant", worst < 1e-10, f"max per-pixel |diff| {worst:.2e} (tol 1e-10)")
    assert worst < 1e-10


# ---------------------------------------------------------------------------
# 4. schedule exactness: poly decay and both optimizer recurrences
# ---------------------------------------------------------------------------

def test_schedule_exactness():
    worst_poly = 0.0
    for base, maxi in [(2.5e-4, 20000), (0.1, 8), (5e-3, 1000)]:
        for i in (0, maxi // 4, maxi // 2, maxi):
            want = base * (1.0 - i / maxi) ** 0.9
            worst_poly = max(worst_poly, abs(poly_lr(base, i, maxi) - want))
    assert worst_poly <= 1e-12

    rng = np.random.default_rng(9300)
    p0 = rng.standard_normal(6)
    mu, wd, kq = 0.9, 0.1, 3.0
    param = Tensor(p0.copy(), requires_grad=True)
    opt = NesterovSGD({"p": param}, momentum=mu, weight_decay=wd)
    p_hand, v_hand = p0.copy(), np.zeros_like(p0)
    worst_sgd = 0.0
    for t in range(5):
        lr = poly_lr(0.01, t, 10)
        param.grad = kq * param.data.copy()  # gradient of the quadratic kq/2 * |p|^2
        opt.step(lr)
        g = kq * p_hand
        v_hand = mu * v_hand + g
        p_hand = p_hand * (1.0 - lr * wd) - lr * (g + mu * v_hand)
        worst_sgd = max(worst_sgd, float(np.abs(param.data - p_hand).max()))
    assert worst_sgd <= 1e-10

    q0 = rng.standard_normal(5)
    grads = [rng.standard_normal(5) for _ in range(5)]
    b1, b2, eps = 0.9, 0.99, 1e-8
    param = Tensor(q0.copy(), requires_grad=True)
    opt = Adam({"p": param}, beta1=b1, beta2=b2, eps=eps)
    q_hand = q0.copy()
    m = np.zeros_like(q0)
    v = np.zeros_like(q0)
    worst_adam = 0.0
    for t, g in enumerate(grads, start=1):
        param.grad = g.copy()
        opt.step(1e-4)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        q_hand = q_hand - 1e-4 * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        worst_adam = max(worst_adam, float(np.abs(param.data - q_hand).max()))
    assert worst_adam <= 1e-10
    verdict("schedules", True,
            f"poly |diff| {worst_poly:.1e} (tol 1e-12); 5-step SGD-Nesterov {worst_sgd:.1e}, "
            f"Adam {worst_adam:.1e} (tol 1e-10)")


# ---------------------------------------------------------------------------
# 5. mIoU vs brute-force set computation
# ---------------------------------------------------------------------------

def brute_force_miou(pred, gt, c):
    ious = []
    valid = gt != IGNORE_INDEX
    for k in range(c):
        pk = {t for t in zip(*np.nonzero((pred == k) & valid))}
        gk = {t for t in zip(*np.nonzero(gt == k))}
        union = pk | gk
        if union:
            ious.append(len(pk & gk) / len(union))
    return float(np.mean(ious)), ious


def test_miou_against_brute_force():
    rng = np.random.default_rng(9400)
    for i in range(100):
        c = int(rng.integers(2, 7))
        h, w = (int(v) for v in rng.integers(1, 9, size=2))
        gt = rng.integers(0, c, size=(h, w))
        gt[rng.random((h, w)) < 0.1] = IGNORE_INDEX
        pred = rng.integers(0, min(c, int(rng.integers(1, c + 1))), size=(h, w))
        if not (gt != IGNORE_INDEX).any():
            gt[0, 0] = 0
        got = mean_iou(ConfusionMatrix(c).update(pred, gt))
        want_mean, want_ious = brute_force_miou(pred, gt, c)
        assert got.mean == want_mean
        assert list(got.per_class.values()) == want_ious
    example = mean_iou(ConfusionMatrix(2).update(np.array([[0, 1], [1, 1]]), np.array([[0, 0], [1, 1]])))
    assert example.mean == pytest.approx(7.0 / 12.0, abs=1e-15)
    verdict("mIoU oracle", True, "100 random maps exact; 2x2 worked example = 7/12")


# ---------------------------------------------------------------------------
# 6/7. the adaptation matrix on the default benchmark
# ---------------------------------------------------------------------------

BENCH_ITERS = 1500
SEEDS = (0, 1, 2)


def bench_bundle(budget):
    return build_bundle(with_budget(ExperimentConfig(), budget).dataset)


def bench_miou(mode, bundle, seed, **overrides):
    cfg = TrainConfig(mode=mode, max_iterations=BENCH_ITERS, seed=seed, **overrides)
    return 100.0 * train(cfg, bundle).final_miou


def seed_mean(mode, bundle, **overrides):
    return float(np.mean([bench_miou(mode, bundle, s, **overrides) for s in SEEDS]))


@pytest.fixture(scope="module")
def adaptation_table():
    t0 = time.perf_counter()
    bundles = {b: bench_bundle(b) for b in (0, 5, 20, 50)}
    table = {
        "source_only": seed_mean("source_only", bundles[0]),
        "ga_0": seed_mean("global", bundles[0]),
        "ga_20": seed_mean("global", bundles[20]),
        "csa_5": seed_mean("semantic_conv", bundles[5]),
        "csa_20": seed_mean("semantic_conv", bundles[20]),
        "csa_50": seed_mean("semantic_conv", bundles[50]),
    }
    table["wall"] = time.perf_counter() - t0
    return table


def test_adaptation_effect(adaptation_table):
    t = adaptation_table
    ds = DatasetConfig()
    assert ds.num_classes == 4 and ds.resolution == (48, 48)
    assert ds.plan.n_source == 400 and ds.plan.n_target_val == 100
    assert ds.plan.n_target_labeled + ds.plan.n_target_unlabeled == 200

    checks = [
        ("(a) GA(0) - SourceOnly", t["ga_0"] - t["source_only"], 3.0),
        ("(b) CSA(20) - GA(20)", t["csa_20"] - t["ga_20"], 2.0),
        ("(c) CSA 5->20", t["csa_20"] - t["csa_5"], -2.0),
        ("(c) CSA 20->50", t["csa_50"] - t["csa_20"], -2.0),
    ]
    failed = [name for name, margin, need in checks if margin < need]
    detail = "; ".join(f"{name} = {margin:+.1f} (need >= {need:+.0f})" for name, margin, need in checks)
    detail += (f"; SourceOnly {t['source_only']:.1f}, GA(0) {t['ga_0']:.1f}, GA(20) {t['ga_20']:.1f}, "
               f"CSA(5/20/50) {t['csa_5']:.1f}/{t['csa_20']:.1f}/{t['csa_50']:.1f}; "
               f"3 seeds, {t['wall']:.0f}s (budget 900s)")
    verdict("adaptation effect", not failed and t["wall"] < 900.0, detail)
    assert t["wall"] < 900.0
    assert not failed, f"failed margins: {failed} — {detail}"


def test_semi_supervised_vs_oracle():
    bundle = bench_bundle(200)
    oracle = seed_mean("target_only", bundle)
    semi = seed_mean("semantic_conv", bundle)
    gap = semi - oracle
    verdict("semi-supervised vs oracle", gap >= -1.0,
            f"CSA(200) {semi:.1f} vs Oracle(200) {oracle:.1f}: signed gap {gap:+.1f} pts (assert >= -1)")
    assert gap >= -1.0


# ---------------------------------------------------------------------------
# 8. determinism: identical configs produce bit-identical logs
# ---------------------------------------------------------------------------

def test_determinism_bit_identical_logs(tmp_path):
    small = ModelConfig(feature_channels=12, generator_widths=(8, 10, 10),
                        global_disc_widths=(10, 12), semantic_hidden=32)
    ds = DatasetConfig(resolution=(24, 24), plan=SplitPlan(30, 8, 40, 10))
    cfg = TrainConfig(mode="semantic_conv", max_iterations=120, eval_every=30, seed=3)
    logs = []
    for name in ("a", "b"):
        r = train(cfg, build_bundle(ds), model_config=small, run_dir=tmp_path / name)
        logs.append((r.metrics, (tmp_path / name / "metrics.jsonl").read_bytes()))
    assert json.dumps(logs[0][0]) == json.dumps(logs[1][0])
    assert logs[0][1] == logs[1][1]
    verdict("determinism", True,
            f"two identical runs: metrics.jsonl bit-identical ({len(logs[0][1])} bytes)")


# ---------------------------------------------------------------------------
# 9. isolation instrumentation over a full 3000-iteration run
# ---------------------------------------------------------------------------

def test_isolation_over_full_run():
    fresh = SealedLabels(np.zeros((2, 2), dtype=np.int64))
    fresh.reveal()
    assert fresh.reveal_count == 1  # the counter is live

    small = ModelConfig(feature_channels=12, generator_widths=(8, 10, 10),
                        global_disc_widths=(10, 12), semantic_hidden=32)
    ds = DatasetConfig(resolution=(24, 24), plan=SplitPlan(40, 8, 60, 12))
    bundle = build_bundle(ds)
    cfg = TrainConfig(mode="semantic_conv", max_iterations=3000, seed=0, check_isolation=True)
    t0 = time.perf_counter()
    result = train(cfg, bundle, model_config=small)
    wall = time.perf_counter() - t0
    assert np.isfinite(result.final_miou)
    reveals = [s.label.reveal_count for s in bundle.target_unlabeled]
    assert sum(reveals) == 0
    verdict("isolation", True,
            f"3000 iterations with per-step parameter checks; "
            f"unlabeled-target reveal counts all zero ({len(reveals)} sealed labels); {wall:.0f}s")
