"""Acceptance suite: eight checks, from closed-form oracles to full runs.

Criteria 1-4 are pure property suites over the numeric core. Criteria 5-8
train real models on phantom corpora (about 128 training cases at default
geometry) and take the better part of an hour on one CPU core; they share
module-scoped fixtures so each heavy artifact is built exactly once.

Every criterion records a one-line verdict in RESULTS; the conftest hook
prints them after the run.
"""

import json
import math
import os

import numpy as np
import pytest
import scipy.special
import torch

from volsr.align import LandmarkSet, fit_rigid
from volsr.config import parse_run_config
from volsr.evaluation import evaluate
from volsr.losses import (
    GeminiLossConfig,
    discriminator_loss,
    gemini_total_loss,
    generator_gan_loss,
    log_softmax,
    mse_loss,
    weighted_cross_entropy,
)
from volsr.metrics import PSNR_CAP_DB, SSIM_C1, SSIM_C2, dice, psnr, ssim
from volsr.phantom import DOMAIN_SHIFT_PRESETS, generate_corpus
from volsr.training import (
    _load_split,
    discriminator_equilibrium,
    load_gemini_discriminator,
    load_gemini_model,
    train_gemini,
    train_vama,
)
from volsr.vama import (
    GaussianLatent,
    VamaConfig,
    kl_standard_normal,
    mixture_combine,
    reparameterize,
    source_block_loss,
    target_block_loss,
)
from volsr.volume import GreyVolume, LabelVolume

RESULTS = []


def _record(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    RESULTS.append(line)
    assert ok, line


# --------------------------------------------------------------------------
# criterion 1: closed-form oracles


def _oracle_weighted_ce(logits, target, weights):
    """Plain-python cross entropy over every position, float64."""
    logp = scipy.special.log_softmax(logits, axis=1)
    n, k = logits.shape[:2]
    total, norm = 0.0, 0.0
    flat_t = target.reshape(n, -1)
    flat_lp = logp.reshape(n, k, -1)
    for i in range(n):
        for j in range(flat_t.shape[1]):
            c = int(flat_t[i, j])
            total -= weights[c] * flat_lp[i, c, j]
            norm += weights[c]
    return total / norm


def _oracle_ssim(x, y):
    x = x.astype(np.float64).ravel()
    y = y.astype(np.float64).ravel()
    mx, my = x.mean(), y.mean()
    vx, vy = x.var(ddof=1), y.var(ddof=1)
    cov = np.cov(x, y, ddof=1)[0, 1]
    return ((2 * mx * my + SSIM_C1) * (2 * cov + SSIM_C2)) / (
        (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))


def test_criterion_1_closed_form_oracles():
    rng = np.random.default_rng(11)
    checked = 0
    for _ in range(50):
        # log-softmax vs scipy on a random (n, k, m) block
        n, k, m = rng.integers(1, 4), rng.integers(2, 6), rng.integers(1, 8)
        logits = rng.normal(0, 3, (n, k, m))
        ours = log_softmax(torch.tensor(logits), dim=1).numpy()
        np.testing.assert_allclose(
            ours, scipy.special.log_softmax(logits, axis=1), rtol=1e-9, atol=1e-12)

        # weighted cross entropy vs the python-loop oracle
        target = rng.integers(0, k, (n, m))
        weights = rng.uniform(0.2, 2.0, k)
        ce = weighted_cross_entropy(
            torch.tensor(logits), torch.tensor(target), torch.tensor(weights))
        assert math.isclose(float(ce), _oracle_weighted_ce(logits, target, weights),
                            rel_tol=1e-9)

        # MSE
        a, b = rng.normal(0, 1, (n, m)), rng.normal(0, 1, (n, m))
        assert math.isclose(float(mse_loss(torch.tensor(a), torch.tensor(b))),
                            float(np.mean((a - b) ** 2)), rel_tol=1e-12)

        # GAN losses on probabilities away from the clamp
        d_real = rng.uniform(0.01, 0.99, 5)
        d_fake = rng.uniform(0.01, 0.99, 5)
        d_oracle = -np.mean(np.log(d_real)) - np.mean(np.log(1.0 - d_fake))
        assert math.isclose(float(discriminator_loss(torch.tensor(d_real),
                                                     torch.tensor(d_fake))),
                            d_oracle, rel_tol=1e-12)
        assert math.isclose(float(generator_gan_loss(torch.tensor(d_fake))),
                            -np.mean(np.log(d_fake)), rel_tol=1e-12)

        # Dice vs set arithmetic
        pa = LabelVolume(rng.integers(0, 4, (5, 5, 3)))
        pb = LabelVolume(rng.integers(0, 4, (5, 5, 3)))
        cls = int(rng.integers(1, 4))
        sa = {tuple(p) for p in np.argwhere(pa.voxels == cls)}
        sb = {tuple(p) for p in np.argwhere(pb.voxels == cls)}
        want = 1.0 if not (sa or sb) else 2 * len(sa & sb) / (len(sa) + len(sb))
        assert math.isclose(dice(pa, pb, cls), want, rel_tol=1e-12)

        # PSNR and SSIM vs direct float64 formulas
        gx = rng.uniform(0, 1, (6, 6, 4)).astype(np.float32)
        gy = rng.uniform(0, 1, (6, 6, 4)).astype(np.float32)
        va, vb = GreyVolume(gx), GreyVolume(gy)
        mse = float(np.mean((gx.astype(np.float64) - gy.astype(np.float64)) ** 2))
        assert math.isclose(psnr(va, vb), min(PSNR_CAP_DB, 10 * math.log10(1 / mse)),
                            rel_tol=1e-9)
        assert math.isclose(ssim(va, vb), _oracle_ssim(gx, gy), rel_tol=1e-9)

        # KL of a diagonal Gaussian against N(0, I)
        mu = rng.normal(0, 1, (2, 6))
        log_s = rng.normal(0, 0.5, (2, 6))
        lat = GaussianLatent(torch.tensor(mu), torch.tensor(log_s))
        s2 = np.exp(2 * log_s)
        want = 0.5 * np.sum(mu ** 2 + s2 - 2 * log_s - 1, axis=1).mean()
        assert math.isclose(float(kl_standard_normal(lat)), want, rel_tol=1e-9)
        checked += 1

    _record(1, checked >= 50, f"{checked} random instances x 9 operations matched oracles")


# --------------------------------------------------------------------------
# criterion 2: analytic gradients vs central finite differences


def _fd_gradient(loss_fn, w, h=1e-6):
    fd = torch.zeros_like(w)
    with torch.no_grad():
        for i in range(w.numel()):
            e = torch.zeros_like(w)
            e[i] = h
            fd[i] = (loss_fn(w + e) - loss_fn(w - e)) / (2 * h)
    return fd


def _grad_rel_error(loss_fn, n_params, seed):
    g = torch.Generator().manual_seed(seed)
    w = (torch.randn(n_params, generator=g, dtype=torch.float64) * 0.4).requires_grad_(True)
    loss = loss_fn(w)
    loss.backward()
    fd = _fd_gradient(loss_fn, w.detach())
    return float((w.grad - fd).norm() / torch.clamp(fd.norm(), min=1e-12))


def _split(w, *sizes):
    parts, start = [], 0
    for s in sizes:
        parts.append(w[start:start + s])
        start += s
    return parts


def test_criterion_2_gradients_match_finite_differences():
    torch.manual_seed(0)
    k, hidden, n_in, m = 3, 8, 6, 9  # m spatial positions
    g = torch.Generator().manual_seed(77)
    x = torch.randn(m, n_in, generator=g, dtype=torch.float64)
    seg_target = torch.randint(0, k, (1, m), generator=g)
    grey_target = torch.rand(1, m, generator=g, dtype=torch.float64)
    reference = torch.rand(1, 1, m, generator=g, dtype=torch.float64)
    k_fixed = torch.randn(1, 4, generator=g, dtype=torch.float64)
    loss_cfg = GeminiLossConfig(lambda_mse=0.7, omega_gan=0.3)
    vama_cfg = VamaConfig()

    def gemini_loss(w):
        A, B, c, d = _split(w, n_in * hidden, hidden * k, hidden, hidden)
        feat = torch.tanh(x @ A.view(n_in, hidden))
        logits = (feat @ B.view(hidden, k)).T.unsqueeze(0)
        ce = weighted_cross_entropy(
            logits, seg_target, torch.ones(k, dtype=torch.float64))
        mse = mse_loss((feat @ c).unsqueeze(0), grey_target)
        gan = generator_gan_loss(torch.sigmoid((feat @ d).mean()).unsqueeze(0))
        return gemini_total_loss(ce, mse, gan, loss_cfg)

    def target_loss(w):
        A, b, mh, sh, d = _split(w, n_in * hidden, hidden, hidden * 4, hidden * 4, hidden)
        feat = torch.tanh(x @ A.view(n_in, hidden))
        out = (feat @ b).view(1, 1, m)
        lat = GaussianLatent((feat @ mh.view(hidden, 4)).mean(0, keepdim=True),
                             (feat @ sh.view(hidden, 4)).mean(0, keepdim=True) * 0.3)
        d_fake = torch.sigmoid((feat @ d).mean()).unsqueeze(0)
        return target_block_loss(reference, out, lat, d_fake, vama_cfg)[0]

    def source_loss(w):
        A, b, mh, sh, mh2, sh2, d = _split(
            w, n_in * hidden, hidden, hidden * 4, hidden * 4, hidden * 4, hidden * 4, hidden)
        feat = torch.tanh(x @ A.view(n_in, hidden))
        out = (feat @ b).view(1, 1, m)
        lat_t = GaussianLatent((feat @ mh.view(hidden, 4)).mean(0, keepdim=True),
                               (feat @ sh.view(hidden, 4)).mean(0, keepdim=True) * 0.3)
        lat_s = GaussianLatent((feat @ mh2.view(hidden, 4)).mean(0, keepdim=True),
                               (feat @ sh2.view(hidden, 4)).mean(0, keepdim=True) * 0.3)
        mix = mixture_combine(lat_t, lat_s, k=k_fixed)
        d_fake = torch.sigmoid((feat @ d).mean()).unsqueeze(0)
        return source_block_loss(reference, out, mix, d_fake, vama_cfg)[0]

    sizes = {
        "gemini_total_loss": (gemini_loss, n_in * hidden + hidden * k + 2 * hidden),
        "target_block_loss": (target_loss, n_in * hidden + hidden + 2 * hidden * 4 + hidden),
        "source_block_loss": (source_loss, n_in * hidden + hidden + 4 * hidden * 4 + hidden),
    }
    worst = 0.0
    for name, (fn, n_params) in sizes.items():
        assert n_params <= 500
        for seed in range(5):
            err = _grad_rel_error(fn, n_params, 1000 + seed)
            worst = max(worst, err)
            assert err < 1e-4, f"{name} seed {seed}: rel err {err:.3e}"
    _record(2, worst < 1e-4,
            f"3 losses x 5 instances, worst FD relative error {worst:.2e} < 1e-4")


# --------------------------------------------------------------------------
# criterion 3: Monte-Carlo statistics of the variational pieces


def test_criterion_3_variational_statistics():
    n = 100_000
    g = torch.Generator().manual_seed(303)

    mu0, sigma0 = 1.0, 0.8
    lat = GaussianLatent(torch.full((n,), mu0, dtype=torch.float64),
                         torch.full((n,), math.log(sigma0), dtype=torch.float64))
    z = reparameterize(lat, generator=g)
    mean_err = abs(float(z.mean()) - mu0) / mu0
    std_err = abs(float(z.std()) - sigma0) / sigma0
    assert mean_err < 0.01 and std_err < 0.01

    lat_t = GaussianLatent(torch.full((n,), 0.4, dtype=torch.float64),
                           torch.full((n,), math.log(0.5), dtype=torch.float64))
    lat_s = GaussianLatent(torch.full((n,), 0.3, dtype=torch.float64),
                           torch.full((n,), math.log(0.6), dtype=torch.float64))
    mix_errs = []
    for mode, want_sigma in (("scale_sum", 1.1), ("variance_sum", math.hypot(0.5, 0.6))):
        mix = mixture_combine(lat_t, lat_s, generator=g, mode=mode)
        assert float(mix.mu[0]) == pytest.approx(0.7)
        assert float(mix.sigma[0]) == pytest.approx(want_sigma)
        mix_errs.append(abs(float(mix.z.mean()) - 0.7) / 0.7)
        mix_errs.append(abs(float(mix.z.std()) - want_sigma) / want_sigma)
    assert max(mix_errs) < 0.01

    # KL closed form vs a Monte-Carlo estimate of E_q[log q - log p]
    mu = torch.tensor([0.5, -0.3, 0.8, 0.1], dtype=torch.float64)
    log_sigma = torch.tensor([0.2, -0.3, 0.1, -0.1], dtype=torch.float64)
    lat4 = GaussianLatent(mu.expand(n, 4), log_sigma.expand(n, 4))
    z4 = reparameterize(lat4, generator=g)
    sigma = log_sigma.exp()
    log_q = (-0.5 * ((z4 - mu) / sigma) ** 2 - log_sigma
             - 0.5 * math.log(2 * math.pi)).sum(dim=1)
    log_p = (-0.5 * z4 ** 2 - 0.5 * math.log(2 * math.pi)).sum(dim=1)
    kl_mc = float((log_q - log_p).mean())
    kl_closed = float(kl_standard_normal(
        GaussianLatent(mu.unsqueeze(0), log_sigma.unsqueeze(0))))
    kl_gap = abs(kl_mc - kl_closed)
    assert kl_gap < 0.01

    _record(3, True,
            f"moments within 1% at 1e5 samples; |KL closed - MC| = {kl_gap:.4f} < 0.01")


# --------------------------------------------------------------------------
# criterion 4: rigid registration construct-then-recover


def _random_rotation(rng):
    q, _ = np.linalg.qr(rng.normal(0, 1, (3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def test_criterion_4_rigid_recovery():
    rng = np.random.default_rng(44)
    worst = 0.0
    for trial in range(100):
        pts = rng.uniform(-40, 40, (6, 3))
        pts[:, 2] += np.arange(6) * 10  # guarantee spatial spread
        R = _random_rotation(rng)
        t = rng.uniform(-25, 25, 3)
        moved = pts @ R.T + t
        fit = fit_rigid(LandmarkSet(pts), LandmarkSet(moved))
        err = max(np.abs(fit.rotation - R).max(), np.abs(fit.translation - t).max())
        worst = max(worst, err)
        assert err < 1e-8, f"trial {trial}: recovery error {err:.3e}"
        assert np.linalg.det(fit.rotation) == pytest.approx(1.0, abs=1e-12)

        # mirrored targets must still come back as a proper rotation
        mirrored = pts * np.array([-1.0, 1.0, 1.0])
        guard = fit_rigid(LandmarkSet(pts), LandmarkSet(mirrored))
        assert np.linalg.det(guard.rotation) == pytest.approx(1.0, abs=1e-12)
    _record(4, worst < 1e-8,
            f"100 transforms recovered, worst error {worst:.2e}; det(R)=+1 throughout")


# --------------------------------------------------------------------------
# criteria 5-8: full phantom experiments (the slow half of the suite)
#
# One anatomy yields an ED and an ES volume, so {train: 64, test: 16}
# is 128 training / 32 test phantom volumes. The run configs below were
# frozen after desk experiments; epochs and corpus sizes are fixed by the
# criteria, everything else (lr, discriminator width, class weights,
# batch size, adaptation schedule) is an experiment-design choice.

_TARGET_SEED = 404
_SOURCE_SEED = 604
_TARGET_COUNTS = {"train": 64, "val": 2, "test": 16}
_SOURCE_COUNTS = {"train": 16, "test": 16}
_SOURCE_PRESET = "mild"

_GEMINI_DOC = {
    "seed": 1001, "epochs": 30, "batch_size": 4,
    "gemini": {"optimizer": {"lr": 1e-3, "weight_decay": 1e-6},
               "discriminator_base_channels": 16,
               "loss": {"class_weights": [0.25, 2.0, 1.0, 1.5]}},
    # flips off: the phantom anatomy is chiral (fixed LV/RV layout), so
    # mirrored views train orientations the test distribution never shows
    "augmentation": {"crop_size": [48, 48], "hflip_p": 0.0, "vflip_p": 0.0},
}
_VAMA_DOC = {
    "seed": 1002, "epochs": 30, "batch_size": 4,
    "gemini": {"discriminator_base_channels": 16},
    "vama": {"lr": 1e-3, "phase1_epochs": 20, "phase2_epochs": 600},
}


@pytest.fixture(scope="module")
def corpora(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept-corpora")
    target = str(root / "target")
    source = str(root / "source")
    generate_corpus(target, _TARGET_COUNTS, seed=_TARGET_SEED)
    generate_corpus(source, _SOURCE_COUNTS, seed=_SOURCE_SEED,
                    shift=DOMAIN_SHIFT_PRESETS[_SOURCE_PRESET])
    return {"target": target, "source": source}


def _run_sr(corpora, out_dir):
    """Train the super-resolution model and score it against both baselines."""
    ckpt = os.path.join(out_dir, "gemini.vsck")
    cfg = parse_run_config(_GEMINI_DOC, env={})
    summary = train_gemini(cfg, corpora["target"], ckpt)
    report = evaluate(ckpt, corpora["target"], os.path.join(out_dir, "sr_report.json"),
                      baselines=("nearest", "trilinear"))
    return {"ckpt": ckpt, "train": summary, "report": report, "dir": out_dir}


def _run_da(corpora, gemini_ckpt, out_dir):
    """Train the adaptation model and score the segmenter with and without it."""
    ckpt = os.path.join(out_dir, "vama.vsck")
    cfg = parse_run_config(_VAMA_DOC, env={})
    summary = train_vama(cfg, corpora["source"], corpora["target"], ckpt)
    report = evaluate(gemini_ckpt, corpora["source"],
                      os.path.join(out_dir, "da_report.json"),
                      vama_path=ckpt, allow_hash_mismatch=True)
    return {"ckpt": ckpt, "train": summary, "report": report, "dir": out_dir}


@pytest.fixture(scope="module")
def sr_run(corpora, tmp_path_factory):
    return _run_sr(corpora, str(tmp_path_factory.mktemp("accept-sr")))


@pytest.fixture(scope="module")
def da_run(corpora, sr_run, tmp_path_factory):
    return _run_da(corpora, sr_run["ckpt"], str(tmp_path_factory.mktemp("accept-da")))


def test_criterion_5_super_resolution_beats_baselines(sr_run):
    s = sr_run["report"]["summary"]
    psnr_margin = s["gemini"]["psnr"]["mean"] - s["trilinear"]["psnr"]["mean"]
    dice_margin = (s["gemini"]["dice_ed"]["lv_cavity"]["mean"]
                   - s["nearest"]["dice_ed"]["lv_cavity"]["mean"])
    _record(5, psnr_margin >= 1.0 and dice_margin >= 0.10,
            f"PSNR +{psnr_margin:.2f} dB over trilinear (need >= 1.0), "
            f"LV-cavity ED Dice +{dice_margin:.3f} over nearest (need >= 0.10)")


def test_criterion_6_adaptation_recovers_segmentation(da_run):
    s = da_run["report"]["summary"]
    dice_delta = (s["gemini+vama"]["dice_ed"]["lv_cavity"]["mean"]
                  - s["gemini"]["dice_ed"]["lv_cavity"]["mean"])
    psnr_delta = s["gemini+vama"]["psnr"]["mean"] - s["gemini"]["psnr"]["mean"]
    _record(6, dice_delta >= 0.2 and psnr_delta >= 3.0,
            f"adapted LV-cavity ED Dice +{dice_delta:.3f} (need >= 0.2), "
            f"adapted PSNR +{psnr_delta:.2f} dB (need >= 3.0)")


def test_criterion_7_discriminator_not_collapsed(corpora, sr_run):
    gen, ckpt = load_gemini_model(sr_run["ckpt"])
    disc = load_gemini_discriminator(ckpt)
    with open(os.path.join(corpora["target"], "corpus.json")) as fh:
        doc = json.load(fh)
    held_out = _load_split(corpora["target"], doc, "test")
    eq = discriminator_equilibrium(gen, disc, held_out)
    ok = 0.2 <= eq["real_mean"] <= 0.8 and 0.2 <= eq["fake_mean"] <= 0.8
    _record(7, ok,
            f"held-out D(real) = {eq['real_mean']:.3f}, D(fake) = {eq['fake_mean']:.3f}, "
            "both within [0.2, 0.8]")


def test_criterion_8_reruns_are_byte_identical(corpora, sr_run, da_run, tmp_path_factory):
    rerun_sr = _run_sr(corpora, str(tmp_path_factory.mktemp("accept-sr-rerun")))
    rerun_da = _run_da(corpora, rerun_sr["ckpt"],
                       str(tmp_path_factory.mktemp("accept-da-rerun")))
    compared = []
    for first, second, name in (
        (sr_run["dir"], rerun_sr["dir"], "sr_report"),
        (da_run["dir"], rerun_da["dir"], "da_report"),
    ):
        for ext in (".json", ".csv"):
            with open(os.path.join(first, name + ext), "rb") as fh:
                a = fh.read()
            with open(os.path.join(second, name + ext), "rb") as fh:
                b = fh.read()
            compared.append((name + ext, a == b))
    bad = [n for n, same in compared if not same]
    _record(8, not bad,
            "retrained both pipelines with the same seeds: "
            + ("all report files byte-identical" if not bad
               else f"files differ: {', '.join(bad)}"))
