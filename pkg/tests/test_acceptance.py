"""Acceptance suite: the project's exit criteria.

Each test covers one numbered criterion at its stated tolerance and prints
one pass/fail line (run with `pytest -s tests/test_acceptance.py` to see
them inline).  The desk-scale training run is shared between the smoke and
constraint criteria.
"""

import math
import time

import numpy as np
import pytest
import torch

from srres import variational as v
from srres.evaluation import lpips_distance, psnr, self_ensemble, ssim
from srres.imaging import (
    DegradationSpec,
    bicubic_resize,
    degrade,
    estimate_noise_sigma,
)
from srres.losses import (
    DomainLossTerms,
    FeatureExtractor,
    LossWeights,
    SRLossTerms,
    domain_composite_loss,
    l1_loss,
    perceptual_loss,
    ragan_discriminator_loss,
    ragan_generator_loss,
    sr_composite_loss,
    tv_loss,
)
from srres.networks import (
    GeneratorSR,
    GeneratorSRConfig,
    ProjectionLayer,
    gsr_forward,
    projection_threshold,
)
from srres.training import (
    TrainConfig,
    load_checkpoint,
    load_sr_generator,
    lr_schedule_domain,
    lr_schedule_sr,
    save_checkpoint,
    train_sr,
)

from conftest import smoke_pairs


def report(num: int, name: str, ok: bool, detail: str = ""):
    print(f"\n[ACCEPTANCE {num:02d}] {name}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"criterion {num} ({name}): {detail}"


# ---------------------------------------------------------------------------
# 1. Analytic generator equals the one-step solver
# ---------------------------------------------------------------------------

def test_criterion_1_oracle_equivalence():
    t0 = time.time()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(20):
        scale = int(rng.choice([1, 2, 4]))
        raw = rng.standard_normal((4, 3, 3, 3))
        slopes = rng.uniform(0.05, 0.9, 4)
        alpha_mult = float(rng.uniform(0.05, 0.5))
        proj_alpha = float(rng.uniform(0.0, 2.0))
        sigma = float(rng.uniform(0.02, 0.3))
        lr = rng.random((3, 8, 8))

        cfg = GeneratorSRConfig(scale=scale, features=4, kernel_size=3,
                                num_blocks=1, analytic_mode=True)
        net = GeneratorSR(cfg, seed=0).double()
        net.set_analytic(raw, slopes, alpha_mult, proj_alpha)
        got = gsr_forward(net, lr, sigma)

        model = v.EnergyModel(scale=scale, lam=1.0, bank=v.FilterBank.from_raw(raw),
                              slopes=slopes, upsample_mode="bilinear")
        eps = projection_threshold(proj_alpha, sigma, (3, 8 * scale, 8 * scale))
        want = v.one_step_inference(model, lr, v.BallConstraint(eps), alpha_mult)
        worst = max(worst, float(np.abs(got - want).max()))
    elapsed = time.time() - t0
    report(1, "oracle equivalence", worst <= 1e-5 and elapsed < 10.0,
           f"max|diff|={worst:.3e} (tol 1e-5), {elapsed:.1f}s (<10s)")


# ---------------------------------------------------------------------------
# 2. Gradient suite
# ---------------------------------------------------------------------------

def _energy_fd_worst():
    rng = np.random.default_rng(202)
    worst = 0.0
    for lam in (0.0, 0.1, 1.0):
        raw = rng.standard_normal((4, 3, 3, 3))
        model = v.EnergyModel(scale=2, lam=lam, bank=v.FilterBank.from_raw(raw),
                              slopes=rng.uniform(0.1, 0.9, 4))
        x = rng.random((3, 6, 6))
        y = rng.random((3, 3, 3))
        g = v.energy_grad(model, x, y)
        h = 1e-4
        fd = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[idx] += h
            xm[idx] -= h
            fd[idx] = (v.energy(model, xp, y) - v.energy(model, xm, y)) / (2 * h)
        worst = max(worst, float(np.abs(g - fd).max() / max(np.abs(fd).max(), 1e-12)))
    return worst


def _input_grad_rel_err(fn, *tensors, h=1e-6):
    leaves = [t.clone().requires_grad_(True) for t in tensors]
    fn(*leaves).backward()
    worst = 0.0
    for leaf in leaves:
        flat = leaf.data.view(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            with torch.no_grad():
                flat[i] = orig + h
                up = float(fn(*leaves))
                flat[i] = orig - h
                down = float(fn(*leaves))
                flat[i] = orig
            fd = (up - down) / (2 * h)
            grad = float(leaf.grad.view(-1)[i])
            if max(abs(fd), abs(grad)) > 1e-9:
                worst = max(worst, abs(grad - fd) / max(abs(fd), abs(grad)))
    return worst


def test_criterion_2_gradient_suite():
    t0 = time.time()
    energy_err = _energy_fd_worst()

    gen = torch.Generator().manual_seed(7)

    def r(shape, lo=0.0, hi=1.0):
        return torch.rand(shape, generator=gen, dtype=torch.float64) * (hi - lo) + lo

    ext = FeatureExtractor(channels=1, seed=2).double()
    b_hi = r((1, 1, 4, 4), lo=0.0, hi=0.3)
    a_lo = r((1, 1, 4, 4), lo=0.6, hi=0.9)
    ramp = torch.cumsum(r((1, 1, 4, 4), lo=0.5, hi=1.5), dim=-1)
    zeros = torch.zeros_like(ramp)
    real = r((4,), lo=-1, hi=1)
    fake = r((4,), lo=-1, hi=1)
    loss_errs = {
        "l1": _input_grad_rel_err(lambda x: l1_loss(x, b_hi), a_lo),
        "tv": _input_grad_rel_err(lambda x: tv_loss(x, zeros), ramp),
        "perceptual": _input_grad_rel_err(lambda x: perceptual_loss(ext, x, b_hi), a_lo),
        "ragan_g": _input_grad_rel_err(lambda rr, ff: ragan_generator_loss(rr, ff), real, fake),
        "ragan_d": _input_grad_rel_err(lambda rr, ff: ragan_discriminator_loss(rr, ff), real, fake),
    }

    # projection-layer alpha gradient in the shrink regime
    z = r((1, 3, 6, 6), lo=-1, hi=1)
    layer = ProjectionLayer(alpha_init=0.3).double()
    out = layer(z, 0.05).pow(2).sum()
    out.backward()
    grad = float(layer.alpha.grad)
    h = 1e-6

    def obj(val):
        with torch.no_grad():
            layer.alpha.fill_(val)
            return float(layer(z, 0.05).pow(2).sum())

    fd = (obj(0.3 + h) - obj(0.3 - h)) / (2 * h)
    loss_errs["project_alpha"] = abs(grad - fd) / max(abs(fd), 1e-12)

    worst_loss = max(loss_errs.values())
    elapsed = time.time() - t0
    ok = energy_err < 1e-5 and worst_loss < 1e-3 and elapsed < 60.0
    report(2, "gradient suite", ok,
           f"energy rel={energy_err:.2e} (<1e-5), losses rel={worst_loss:.2e} (<1e-3), {elapsed:.1f}s (<60s)")


# ---------------------------------------------------------------------------
# 3. Proximal-gradient descent
# ---------------------------------------------------------------------------

def test_criterion_3_pgm_descent():
    t0 = time.time()
    rng = np.random.default_rng(303)
    all_monotone = True
    all_stopped = True
    iters_used = []
    for trial in range(10):
        scale = 1 if trial < 5 else 2
        raw = np.zeros((12, 3, 3, 3))
        for c in range(3):
            for i in range(4):
                raw[c * 4 + i, c] = rng.standard_normal((3, 3))
        bank = v.FilterBank.from_raw(raw)
        model = v.EnergyModel(scale=scale, lam=float(rng.uniform(0.5, 1.0)), bank=bank,
                              slopes=rng.uniform(0.2, 0.9, 12))
        lip = v.lipschitz_estimate(model, (3, 8, 8), iters=300)
        model.step = 1.0 / (1.02 * lip)
        y = rng.random((3, 8 // scale, 8 // scale))
        res = v.pgm_solve(model, y, v.BallConstraint(4.0), max_iters=500, tol=1e-6)
        energies = np.array(res.energies)
        all_monotone &= bool((np.diff(energies) <= 0).all())
        all_stopped &= res.iterations < 500
        iters_used.append(res.iterations)
    elapsed = time.time() - t0
    ok = all_monotone and all_stopped and elapsed < 30.0
    report(3, "pgm descent", ok,
           f"monotone={all_monotone}, stop iters={iters_used} (<500), {elapsed:.1f}s (<30s)")


# ---------------------------------------------------------------------------
# 4. Projection correctness
# ---------------------------------------------------------------------------

def test_criterion_4_prox_correctness():
    rng = np.random.default_rng(404)
    worst = 0.0
    for _ in range(1000):
        z = rng.standard_normal((3, 4, 4)) * rng.uniform(0.1, 3.0)
        eps = float(rng.uniform(0.0, 6.0))
        out = v.prox_ball(z, v.BallConstraint(eps))
        norm = np.linalg.norm(z)
        expected = z if norm <= eps else z * (eps / norm)
        worst = max(worst, float(np.abs(out - expected).max()))
        if norm > eps:
            worst = max(worst, abs(float(np.linalg.norm(out)) - eps))
    report(4, "prox correctness", worst <= 1e-12, f"max deviation={worst:.2e} (tol 1e-12)")


# ---------------------------------------------------------------------------
# 5. Closed-form values
# ---------------------------------------------------------------------------

def test_criterion_5_closed_forms():
    checks = {}
    scores = [0.3, 0.3, 0.3]
    checks["ragan_g"] = abs(float(ragan_generator_loss(scores, scores)) - 2 * math.log(2)) <= 1e-9
    checks["ragan_d"] = abs(float(ragan_discriminator_loss(scores, scores)) - 2 * math.log(2)) <= 1e-9
    checks["threshold"] = abs(projection_threshold(0.0, 0.1, (3, 8, 8)) - 0.1 * math.sqrt(191)) <= 1e-9
    checks["lr_sr"] = lr_schedule_sr(1e-4, 12000) == 2.5e-5
    checks["lr_domain"] = lr_schedule_domain(2e-4, 225, 300) == 1e-4
    w = LossWeights()
    probes_sr = [
        float(sr_composite_loss(w, SRLossTerms(per=1.0))),
        float(sr_composite_loss(w, SRLossTerms(gan=1.0))),
        float(sr_composite_loss(w, SRLossTerms(tv=1.0))),
        float(sr_composite_loss(w, SRLossTerms(l1=1.0))),
    ]
    probes_dom = [
        float(domain_composite_loss(w, DomainLossTerms(color=1.0))),
        float(domain_composite_loss(w, DomainLossTerms(tex=1.0))),
        float(domain_composite_loss(w, DomainLossTerms(per=1.0))),
    ]
    checks["sr_coeffs"] = probes_sr == [1.0, 1.0, 1.0, 10.0]
    checks["domain_coeffs"] = probes_dom == [1.0, 0.005, 0.01]
    failed = [k for k, ok in checks.items() if not ok]
    report(5, "closed-form values", not failed, f"failed={failed or 'none'}")


# ---------------------------------------------------------------------------
# 6. Metric sanity
# ---------------------------------------------------------------------------

def test_criterion_6_metric_sanity():
    rng = np.random.default_rng(606)
    a = rng.random((3, 16, 16)) * 0.8 + 0.1
    checks = {}
    checks["psnr_20db"] = abs(psnr(np.full((3, 8, 8), 0.3), np.full((3, 8, 8), 0.4)) - 20.0) <= 1e-6
    checks["ssim_self"] = ssim(a, a) == 1.0
    ext = FeatureExtractor(channels=3, seed=0)
    checks["lpips_self"] = lpips_distance(ext, a, a) == 0.0
    lr = rng.random((3, 8, 8))
    up = lambda img: bicubic_resize(img, 2.0)
    checks["ensemble_equivariant"] = float(np.abs(self_ensemble(up, lr) - up(lr)).max()) <= 1e-9
    failed = [k for k, ok in checks.items() if not ok]
    report(6, "metric sanity", not failed, f"failed={failed or 'none'}")


# ---------------------------------------------------------------------------
# 7 + 9. Desk-scale smoke training and constraint maintenance
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def smoke_run():
    pairs = smoke_pairs(n=4, size=64, scale=2, sigma=6 / 255)
    l1_trace = []
    worst = {"mean": 0.0, "norm": 0.0}

    def monitor(it, gen, info):
        l1_trace.append(info["l1"])
        for kernels in (gen.encoder_kernels(), gen.decoder_kernels()):
            k = kernels.detach().numpy()
            worst["mean"] = max(worst["mean"], float(np.abs(k.mean(axis=(1, 2, 3))).max()))
            norms = np.sqrt((k ** 2).sum(axis=(1, 2, 3)))
            worst["norm"] = max(worst["norm"], float(np.abs(norms - 1.0).max()))

    cfg = TrainConfig.sr_desk_preset(seed=7)
    t0 = time.time()
    ck = train_sr(cfg, pairs, step_callback=monitor)
    elapsed = time.time() - t0
    return {"pairs": pairs, "ck": ck, "l1": l1_trace, "constraints": worst, "time": elapsed}


def test_criterion_7_smoke_training(smoke_run):
    l1 = smoke_run["l1"]
    ratio = float(np.mean(l1[-5:]) / l1[0])
    model = load_sr_generator(smoke_run["ck"])
    model_psnrs, bicubic_psnrs = [], []
    for pair in smoke_run["pairs"]:
        sr = gsr_forward(model, pair.lr, estimate_noise_sigma(pair.lr))
        model_psnrs.append(psnr(sr, pair.hr))
        bicubic_psnrs.append(psnr(np.clip(bicubic_resize(pair.lr, 2.0), 0, 1), pair.hr))
    margin = float(np.mean(model_psnrs) - np.mean(bicubic_psnrs))
    ok = ratio <= 0.5 and margin >= 0.5 and smoke_run["time"] < 600.0
    report(7, "desk-scale smoke training", ok,
           f"L1 ratio={ratio:.3f} (<=0.5), PSNR margin={margin:.2f} dB (>=0.5), "
           f"{smoke_run['time']:.0f}s (<600s)")


def test_criterion_9_constraint_maintenance(smoke_run):
    worst = smoke_run["constraints"]
    ok = worst["mean"] <= 1e-6 and worst["norm"] <= 1e-6
    report(9, "filter constraint maintenance", ok,
           f"max|mean|={worst['mean']:.2e}, max|norm-1|={worst['norm']:.2e} (tol 1e-6)")


# ---------------------------------------------------------------------------
# 8. Determinism and resume
# ---------------------------------------------------------------------------

def test_criterion_8_determinism_resume(tmp_path):
    pairs = smoke_pairs(n=2, size=48)
    cfg = TrainConfig.sr_desk_preset(total_iters=8, batch_size=2, gsr_features=8,
                                     gsr_blocks=1, checkpoint_every=4, seed=11)
    a = train_sr(cfg, pairs)
    b = train_sr(cfg, pairs)
    identical = all(
        np.array_equal(a.weights["generator"][k], b.weights["generator"][k])
        for k in a.weights["generator"]
    )

    half_cfg = TrainConfig.sr_desk_preset(total_iters=4, batch_size=2, gsr_features=8,
                                          gsr_blocks=1, checkpoint_every=4, seed=11)
    half = train_sr(half_cfg, pairs)
    path = tmp_path / "half.pkl"
    save_checkpoint(half, path)
    resumed = train_sr(cfg, pairs, resume_from=load_checkpoint(path))
    resume_ok = all(
        np.array_equal(a.weights["generator"][k], resumed.weights["generator"][k])
        for k in a.weights["generator"]
    )
    report(8, "determinism and resume", identical and resume_ok,
           f"rerun bit-identical={identical}, resume bit-identical={resume_ok}")


# ---------------------------------------------------------------------------
# 10. Degradation model
# ---------------------------------------------------------------------------

def test_criterion_10_degradation_model():
    rng = np.random.default_rng(1010)
    from conftest import smooth_image

    img = smooth_image(99, size=32)
    exact = np.array_equal(
        degrade(img, DegradationSpec(scale=4, noise_sigma=0.0, seed=0)),
        bicubic_resize(img, 0.25),
    )

    sigma = 8 / 255
    out = degrade(np.full((3, 64, 64), 0.5), DegradationSpec(scale=1, noise_sigma=sigma, seed=5))
    stat = float(np.std(out - 0.5))
    stat_ok = abs(stat - sigma) / sigma < 0.10

    noisy = 0.5 + rng.normal(0.0, 0.05, size=(3, 128, 128))
    est = estimate_noise_sigma(noisy)
    est_ok = abs(est - 0.05) / 0.05 <= 0.20

    ok = exact and stat_ok and est_ok
    report(10, "degradation model", ok,
           f"sigma0 exact={exact}, noise std={stat:.4f} (target {sigma:.4f} +/-10%), "
           f"estimate={est:.4f} (target 0.05 +/-20%)")
