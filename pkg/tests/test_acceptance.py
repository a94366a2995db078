"""Acceptance gate: one test per primary criterion.

Each test carries a ``criterion`` marker; ``conftest.py`` prints one
PASS/FAIL line per criterion after the run. Desk-scale training uses the
natural images bundled with scikit-image. The three trained models are
shared between tests through module-scoped fixtures. The whole module
takes roughly 20-25 minutes on one CPU core.

Run on its own with ``pytest tests/test_acceptance.py``.
"""

import itertools
import os
import time

import numpy as np
import pytest

from helpers import central_diff, direct_ssim, max_rel_error, naive_conv2d
from windenoise import nn
from windenoise.checkpoint import decode, encode, read_checkpoint, write_checkpoint
from windenoise.data import SigmaRegime, add_awgn, corpus_patches, noise_seed
from windenoise.images import load_gray
from windenoise.metrics import hist_distance, histogram, psnr, ssim
from windenoise.models import ModelConfig, Variant, backward, build_model, forward, receptive_field
from windenoise.nn import BnParams, ConvParams
from windenoise.optim import OptState, adam_step
from windenoise.trainer import TrainConfig, behavior_curve, evaluate, train

skimage_data = pytest.importorskip("skimage.data")
DATA_DIR = os.path.dirname(skimage_data.__file__)

TRAIN_NAMES = ["camera", "brick", "coins", "moon", "grass", "page", "astronaut", "coffee", "cell", "motorcycle_left"]
TEST_NAMES = ["gravel", "text", "chelsea", "clock_motion", "ihc"]
PRIOR_NAMES = ["camera", "brick", "coins", "moon", "grass", "page"]
DESK_WIDTH = 16
DESK_LR = {Variant.WIN5_RB: 1e-2, Variant.WIN5: 1e-3}  # best of {1e-3, 1e-2} per variant in pilots
CURVE_SIGMAS = [10, 30, 50, 70]


def natural(name):
    return load_gray(os.path.join(DATA_DIR, name + ".png"))


@pytest.fixture(scope="module")
def train_images():
    return [natural(n) for n in TRAIN_NAMES]


@pytest.fixture(scope="module")
def test_images():
    return [(n, natural(n)[:256, :256]) for n in TEST_NAMES]


def desk_config(variant, sigma, steps):
    return TrainConfig(
        model=ModelConfig(variant, width=DESK_WIDTH),
        sigma=SigmaRegime.parse(sigma),
        epochs=3,
        steps_per_epoch=steps // 3,
        batch=16,
        patch=64,
        stride=32,
        lr=DESK_LR[Variant(variant)],
        seed=1,
    )


def timed_train(cfg, images):
    t0 = time.perf_counter()
    ckpt, _ = train(cfg, images)
    return ckpt, time.perf_counter() - t0


@pytest.fixture(scope="module")
def desk_rb(train_images):
    return timed_train(desk_config("WIN5_RB", 30, 600), train_images)


@pytest.fixture(scope="module")
def desk_win5(train_images):
    return timed_train(desk_config("WIN5", 30, 600), train_images)


@pytest.fixture(scope="module")
def desk_blind(train_images):
    return timed_train(desk_config("WIN5_RB", "blind", 300), train_images)


# ---------------------------------------------------------------------------


def _grad_instances(seed):
    rng = np.random.default_rng(seed)
    n, c, k, h, w, f = 1 + seed % 2, 1 + seed % 3, 1 + (seed // 3) % 3, 4 + seed % 3, 5, (1, 3, 5)[seed % 3]
    x = rng.standard_normal((n, c, h, w))
    return rng, x, n, c, k, h, w, f


@pytest.mark.criterion("Gradient correctness (conv, BN, ReLU, add, MSE; 20 seeds each; rel err < 1e-3)")
def test_gradient_correctness(record_property):
    t0 = time.perf_counter()
    worst = {"conv": 0.0, "bn": 0.0, "relu": 0.0, "add": 0.0, "mse": 0.0}
    for seed in range(20):
        rng, x, n, c, k, h, w, f = _grad_instances(seed)
        r = rng.standard_normal((n, k, h, w))

        p = ConvParams(rng.standard_normal((k, c, f, f)) * 0.5, rng.standard_normal(k))
        g = nn.conv2d_backward(r, x, p)
        conv_loss = lambda: float(np.sum(nn.conv2d_forward(x, p) * r))  # noqa: E731
        worst["conv"] = max(
            worst["conv"],
            max_rel_error(g.grad_input, central_diff(conv_loss, x)),
            max_rel_error(g.grad_weight, central_diff(conv_loss, p.weight)),
            max_rel_error(g.grad_bias, central_diff(conv_loss, p.bias)),
        )

        bp = BnParams(rng.random(c) + 0.5, rng.standard_normal(c), np.zeros(c), np.ones(c))
        rb = rng.standard_normal(x.shape)
        _, cache = nn.batchnorm_forward(x, bp, "train")
        gb = nn.batchnorm_backward(rb, cache, bp)
        bn_loss = lambda: float(np.sum(nn.batchnorm_forward(x, bp, "train")[0] * rb))  # noqa: E731
        worst["bn"] = max(
            worst["bn"],
            max_rel_error(gb.grad_input, central_diff(bn_loss, x)),
            max_rel_error(gb.grad_gamma, central_diff(bn_loss, bp.gamma)),
            max_rel_error(gb.grad_beta, central_diff(bn_loss, bp.beta)),
        )

        xr = x.copy()
        xr[np.abs(xr) < 0.01] = 0.5  # finite differences are undefined across the kink
        gr = nn.relu_backward(rb, xr)
        worst["relu"] = max(worst["relu"], max_rel_error(gr, central_diff(lambda: float(np.sum(nn.relu_forward(xr) * rb)), xr)))

        y = rng.standard_normal(x.shape)
        ga, gy = nn.add_backward(rb)
        add_loss = lambda: float(np.sum(nn.add(x, y) * rb))  # noqa: E731
        worst["add"] = max(
            worst["add"],
            max_rel_error(ga, central_diff(add_loss, x)),
            max_rel_error(gy, central_diff(add_loss, y)),
        )

        target = rng.standard_normal(x.shape)
        _, gm = nn.mse_loss(x, target)
        worst["mse"] = max(worst["mse"], max_rel_error(gm, central_diff(lambda: nn.mse_loss(x, target)[0], x)))
    elapsed = time.perf_counter() - t0
    record_property("detail", ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f}s")
    assert all(v < 1e-3 for v in worst.values()), worst
    assert elapsed < 60


@pytest.mark.criterion("Conv oracle equivalence (fast vs naive loops, atol 1e-5, up to 2x8x16x16)")
def test_conv_oracle_equivalence(record_property):
    t0 = time.perf_counter()
    worst = 0.0
    shapes = [(1, 1, 5, 5, 1, 3), (1, 3, 7, 9, 2, 5), (2, 4, 12, 10, 3, 7), (2, 8, 16, 16, 8, 3), (2, 8, 16, 16, 4, 7)]
    for seed, (n, c, h, w, k, f) in enumerate(shapes * 2):
        rng = np.random.default_rng(100 + seed)
        x = rng.standard_normal((n, c, h, w)).astype(np.float32)
        wt = (rng.standard_normal((k, c, f, f)) / f).astype(np.float32)
        b = rng.standard_normal(k).astype(np.float32)
        fast = nn.conv2d_forward(x, ConvParams(wt, b))
        ref = naive_conv2d(x, wt, b, f // 2)
        assert fast.shape == ref.shape == (n, k, h, w)
        worst = max(worst, float(np.abs(fast - ref).max()))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max |fast - naive| {worst:.2e}; {elapsed:.1f}s")
    assert worst < 1e-5
    assert elapsed < 60


@pytest.mark.criterion("Architecture conformance (parameter counts, receptive field 31, zero-body identity)")
def test_architecture_conformance(record_property):
    counts = {v: build_model(ModelConfig(v)).parameter_count() for v in ("WIN5", "WIN5_R", "WIN5_RB")}
    # per layer: F*F*Cin*K + K (conv) + 2K (BN affine)
    plan = [(1, 128)] + [(128, 128)] * 3 + [(128, 1)]
    by_formula = sum(49 * ci * co + co for ci, co in plan)
    assert counts["WIN5"] == by_formula == 2_421_505
    assert counts["WIN5_R"] == 2_421_505
    assert counts["WIN5_RB"] == by_formula + 2 * sum(co for _, co in plan) == 2_422_531

    assert receptive_field(layers=5, kernel=7) == 1 + 5 * (7 - 1) == 31
    # empirical receptive field: a unit impulse at the centre reaches exactly a 31x31 window
    m = build_model(ModelConfig("WIN5", width=4), seed=0)
    for layer in m.layers:
        layer.conv.weight[...] = np.abs(layer.conv.weight) + 0.01
        layer.conv.bias[...] = 0
    impulse = np.zeros((1, 1, 41, 41), np.float32)
    impulse[0, 0, 20, 20] = 1
    out, _ = forward(m, impulse, "infer")
    rows, cols = np.nonzero(out[0, 0])
    support = (rows.max() - rows.min() + 1, cols.max() - cols.min() + 1)
    assert support == (31, 31)

    y = np.random.default_rng(0).random((2, 1, 40, 33)).astype(np.float32)
    for v in ("WIN5_R", "WIN5_RB"):
        zm = build_model(ModelConfig(v, width=16), seed=3)
        zm.zero_body()
        for mode in ("train", "infer"):
            np.testing.assert_array_equal(forward(zm, y, mode)[0], y)
    record_property("detail", f"WIN5 {counts['WIN5']:,}, WIN5_RB {counts['WIN5_RB']:,}, receptive field {support[0]}")


@pytest.mark.criterion("AWGN statistics (std within 1%, mean within 3sigma/sqrt(N), PSNR at 10/30/50/70 within 0.15 dB)")
def test_awgn_statistics(record_property):
    clean = np.full((512, 512), 0.5, np.float32)
    expected = {10: 28.13, 30: 18.59, 50: 14.15, 70: 11.23}
    got = {}
    for sigma, target in expected.items():
        noisy = add_awgn(clean, sigma, seed=noise_seed(0, "flat", sigma)).noisy
        n = noisy.astype(np.float64) - clean
        s = sigma / 255
        assert abs(n.std() - s) < 0.01 * s
        assert abs(n.mean()) < 3 * s / np.sqrt(n.size)
        # PSNR of the noisy field as produced (unclipped), peak 1
        got[sigma] = 10 * np.log10(1.0 / np.mean(n * n))
        assert abs(got[sigma] - target) <= 0.15
        assert abs(got[sigma] - 20 * np.log10(255 / sigma)) <= 0.15
        if sigma <= 30:  # clipping in the metric is negligible here
            assert abs(psnr(clean, noisy) - target) <= 0.15
    record_property("detail", ", ".join(f"s{k}: {v:.3f} dB" for k, v in got.items()))


@pytest.mark.criterion("SSIM correctness (ssim(x,x) == 1 exactly; 16x16 fixture vs direct summation within 1e-6)")
def test_ssim_correctness(record_property):
    rng = np.random.default_rng(16)
    for shape in [(16, 16), (40, 29), (64, 64)]:
        x = rng.random(shape)
        assert ssim(x, x) == 1.0
    yy, xx = np.mgrid[0:16, 0:16] / 16.0
    a = 0.5 + 0.3 * np.sin(5 * xx) * np.cos(3 * yy)
    b = np.clip(a + 0.08 * rng.standard_normal(a.shape), 0, 1)
    fast, ref = ssim(a, b), direct_ssim(a, b)
    record_property("detail", f"ssim {fast:.9f} vs direct {ref:.9f}")
    assert abs(fast - ref) < 1e-6


@pytest.mark.criterion("Prior claim (15 natural-image pairs: mean hist distance at sigma 50 < sigma 10)")
def test_prior_claim(record_property):
    t0 = time.perf_counter()
    images = {n: natural(n) for n in PRIOR_NAMES}
    pairs = list(itertools.combinations(PRIOR_NAMES, 2))
    assert len(pairs) >= 10

    def noisy_hist(name, sigma):
        return histogram(add_awgn(images[name], sigma, noise_seed(0, name, sigma)).noisy)

    mean = {}
    for sigma in (10, 50):
        hs = {n: noisy_hist(n, sigma) for n in PRIOR_NAMES}
        mean[sigma] = float(np.mean([hist_distance(hs[a], hs[b]) for a, b in pairs]))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"mean distance s10 {mean[10]:.4f}, s50 {mean[50]:.4f}; {elapsed:.1f}s")
    assert mean[50] < mean[10]
    assert elapsed < 60


OVERFIT_STEPS = 2000
OVERFIT_WIDTH = 8
OVERFIT_LR = 1e-2


@pytest.mark.criterion("Overfit gate (WIN5-RB, 8 fixed sigma=30 64x64 pairs, 2000 steps, >= noisy + 10 dB)")
def test_overfit_gate(record_property):
    names = ["camera", "brick", "coins", "moon", "grass", "page", "cell", "text"]
    clean = np.stack([natural(n)[100:164, 100:164] for n in names])[:, None]
    noisy = add_awgn(clean, 30, seed=7).noisy
    model = build_model(ModelConfig("WIN5_RB", width=OVERFIT_WIDTH), seed=0)
    params = model.named_parameters()
    opt = OptState()
    losses = []
    for step in range(OVERFIT_STEPS):
        out, cache = forward(model, noisy, "train")
        loss, grad = nn.mse_loss(out, clean)
        losses.append(loss)
        lr = OVERFIT_LR * 0.5 ** ((3 * step) // OVERFIT_STEPS)
        adam_step(params, backward(model, grad, cache), opt, lr)
    restored, _ = forward(model, noisy, "infer")
    noisy_db = float(np.mean([psnr(c[0], y[0]) for c, y in zip(clean, noisy)]))
    out_db = float(np.mean([psnr(c[0], r[0]) for c, r in zip(clean, restored)]))
    record_property(
        "detail", f"noisy {noisy_db:.2f} dB -> {out_db:.2f} dB (+{out_db - noisy_db:.2f}); loss ratio {losses[0] / losses[-1]:.0f}x"
    )
    assert out_db >= noisy_db + 10
    assert losses[0] / losses[-1] >= 10


@pytest.mark.criterion("Desk-scale generalization (WIN5-RB >= noisy + 5 dB on 5 held-out images; WIN5-RB >= WIN5)")
def test_desk_generalization(record_property, train_images, test_images, desk_rb, desk_win5):
    n_patches = len(corpus_patches(train_images, 64, 32))
    assert len(train_images) <= 20 and 1500 <= n_patches <= 2500
    rb, rb_time = desk_rb
    w5, w5_time = desk_win5
    assert rb_time < 30 * 60 and w5_time < 30 * 60
    rep_rb = evaluate(rb, test_images, [30], seed=5, include_noisy=True)
    rep_w5 = evaluate(w5, test_images, [30], seed=5)
    noisy_db = rep_rb.mean_psnr(30, "noisy")
    rb_db = rep_rb.mean_psnr(30, "WIN5_RB")
    w5_db = rep_w5.mean_psnr(30, "WIN5")
    record_property(
        "detail",
        f"{n_patches} patches; noisy {noisy_db:.2f}, WIN5_RB {rb_db:.2f} ({rb_time:.0f}s), WIN5 {w5_db:.2f} ({w5_time:.0f}s) dB",
    )
    assert len(test_images) >= 5
    assert noisy_db == pytest.approx(18.6, abs=0.2)
    assert rb_db >= noisy_db + 5
    assert rb_db >= w5_db


@pytest.mark.criterion("Noise-level behavior curve (blind model's PSNR curve nonincreasing over sigma 10/30/50/70)")
def test_blind_behavior_curve(record_property, test_images, desk_blind):
    model, _ = desk_blind
    report = evaluate(model, test_images, CURVE_SIGMAS, seed=5)
    curve = behavior_curve(report)
    record_property("detail", ", ".join(f"s{s:g}: {p:.2f}" for s, p in curve))
    assert [s for s, _ in curve] == CURVE_SIGMAS
    values = [p for _, p in curve]
    assert all(a >= b for a, b in zip(values, values[1:]))


@pytest.mark.criterion("Determinism and round-trip (same-seed runs, save/load, resume all bitwise)")
def test_determinism_and_roundtrip(record_property, tmp_path):
    images = [natural(n)[:96, :96] for n in ("camera", "coins", "moon")]
    cfg = TrainConfig(
        model=ModelConfig("WIN5_RB", width=4), sigma=SigmaRegime.parse("blind"),
        epochs=3, steps_per_epoch=3, batch=4, patch=32, stride=32, lr=1e-2, seed=11,
    )
    a, _ = train(cfg, images)
    b, _ = train(cfg, images)
    assert encode(a) == encode(b)

    write_checkpoint(a, tmp_path / "a.winckpt")
    back = read_checkpoint(tmp_path / "a.winckpt")
    for name, arr in a.model.named_arrays().items():
        assert back.model.named_arrays()[name].tobytes() == arr.tobytes()
    write_checkpoint(back, tmp_path / "b.winckpt")
    assert (tmp_path / "a.winckpt").read_bytes() == (tmp_path / "b.winckpt").read_bytes()

    part, _ = train(cfg, images, until_step=4)
    write_checkpoint(part, tmp_path / "part.winckpt")
    resumed, _ = train(cfg, images, resume=read_checkpoint(tmp_path / "part.winckpt"))
    assert encode(resumed) == encode(a)
    assert decode(encode(resumed)).metadata == a.metadata
    record_property("detail", f"{cfg.total_steps}-step runs, resume at step 4; {len(encode(a))} checkpoint bytes identical")
