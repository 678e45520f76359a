"""Self-check suite run by ``salient verify``.

Each check compares library output against an independent oracle (closed
forms, brute force, finite differences or a reference recomputation) and
raises ``AssertionError`` on disagreement.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass

import numpy as np
import torch

log = logging.getLogger(__name__)

FD_FLOOR = 1e-7


@dataclass
class CheckResult:
    module: str
    name: str
    ok: bool
    detail: str
    seconds: float


# ---------------------------------------------------------------------------
# shared oracles


def gradient_check(loss_fn, params: dict[str, torch.Tensor], n_coords: int = 50, seed: int = 0, h: float = 1e-5,
                   always=(), order: int = 2) -> dict:
    """Compare autograd against central differences on random parameter coordinates.

    ``loss_fn(params) -> scalar tensor``; params must be float64 leaf tensors.
    ``always`` lists parameter names whose every coordinate is included.
    ``order`` 2 is the 3-point stencil, 4 the 5-point one; the latter tolerates a
    larger ``h`` and so suits losses whose magnitude dwarfs individual gradients.
    Relative error uses ``max(|analytic|, |numeric|, FD_FLOOR)`` as denominator.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    params = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    loss = loss_fn(params)
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    grads = {k: (g if g is not None else torch.zeros_like(params[k])) for k, g in zip(params, grads)}
    rng = np.random.default_rng(seed)
    names = sorted(params)
    sizes = np.array([params[k].numel() for k in names], dtype=np.float64)
    coords = [(k, i) for k in always for i in range(params[k].numel())]
    picks = rng.choice(len(names), size=n_coords, p=sizes / sizes.sum())
    coords += [(names[j], int(rng.integers(params[names[j]].numel()))) for j in picks]
    worst = 0.0
    errs = []
    with torch.no_grad():
        for name, i in coords:
            flat = params[name].view(-1)
            orig = float(flat[i])

            def at(d):
                flat[i] = orig + d
                return float(loss_fn(params))

            if order == 2:
                num = (at(h) - at(-h)) / (2 * h)
            else:
                num = (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h)
            flat[i] = orig
            ana = float(grads[name].view(-1)[i])
            err = abs(ana - num) / max(abs(ana), abs(num), FD_FLOOR)
            errs.append(err)
            worst = max(worst, err)
    return {"n": len(coords), "max_rel_err": worst, "errors": errs}


def brute_auprc(scores, labels) -> float:
    """Average precision by enumerating every distinct threshold directly."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    n_pos = y.sum()
    ap, prev_recall = 0.0, 0.0
    for thr in sorted(set(s.tolist()), reverse=True):
        pred = s >= thr
        tp = int((pred & (y == 1)).sum())
        recall = tp / n_pos
        precision = tp / int(pred.sum())
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def brute_auroc(scores, labels) -> float:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    pos, neg = s[y == 1], s[y == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def haar_reference(x: np.ndarray) -> np.ndarray:
    """Per-block loop implementation of the orthonormal Haar analysis step."""
    h, w = x.shape
    out = np.zeros((4, h // 2, w // 2))
    for i in range(h // 2):
        for j in range(w // 2):
            a, b = x[2 * i, 2 * j], x[2 * i, 2 * j + 1]
            c, d = x[2 * i + 1, 2 * j], x[2 * i + 1, 2 * j + 1]
            out[:, i, j] = [(a + b + c + d) / 2, (a + b - c - d) / 2, (a - b + c - d) / 2, (a - b - c + d) / 2]
    return out


# ---------------------------------------------------------------------------
# wavelet_core


def check_wavelet_roundtrip():
    from .wavelet import dwt2, energy, idwt2

    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, size=(200, 64, 64))
    c = dwt2(x)
    err = np.abs(idwt2(c) - x).max()
    rel = abs(energy(c) - energy(x)) / energy(x)
    assert err < 1e-6 and rel < 1e-6, (err, rel)
    return f"max abs err {err:.2e}, energy rel err {rel:.2e}"


def check_wavelet_reference():
    from .wavelet import dwt2

    rng = np.random.default_rng(1)
    x = rng.normal(size=(16, 16))
    diff = np.abs(dwt2(x) - haar_reference(x)).max()
    assert diff < 1e-12, diff
    block = dwt2(np.array([[1.0, 2.0], [3.0, 4.0]]))[:, 0, 0]
    assert np.allclose(block, [5.0, -2.0, -1.0, 0.0]), block
    return f"matches per-block loop within {diff:.1e}"


def check_band_stats_constant():
    from .wavelet import band_stats, dwt2

    st = band_stats(dwt2(np.full((16, 16), 0.3)))
    assert np.allclose(st.mean[1:], 0) and np.allclose(st.log_std, math.log(1e-6)), st
    assert abs(st.mean[0] - 0.6) < 1e-12
    return "constant slice: detail means 0, log-stds at floor"


def check_weight_map():
    from .wavelet import boundary_weight_map

    empty = boundary_weight_map(np.zeros((8, 8)), beta=2.0, dilation=2)
    assert np.allclose(empty[3], 0.7) and np.allclose(empty[0], 1.0)
    m = np.zeros((16, 16))
    m[6:10, 6:10] = 1
    w = boundary_weight_map(m, beta=2.0, dilation=0)
    assert abs(w[0, 6, 6] - 3.0) < 1e-12 and abs(w[0, 0, 0] - 1.0) < 1e-12 and abs(w[0, 8, 8] - 1.0) < 1e-12
    return "base weights off-boundary, base*(1+beta) on boundary"


# ---------------------------------------------------------------------------
# diffusion_engine


def check_schedule():
    from .diffusion import cosine_schedule

    s = cosine_schedule(200)
    ab = np.asarray(s.alpha_bar)
    assert ab[0] == 1.0 and np.all(np.diff(ab) < 0) and ab.min() >= 1e-5
    f = lambda t: math.cos(((t / 200 + 0.008) / 1.008) * math.pi / 2) ** 2  # noqa: E731
    ref = max(f(100) / f(0), 1e-5)
    assert abs(ab[100] - ref) < 1e-12
    return f"monotone, alpha_bar[100]={ab[100]:.6f}"


def check_forward_moments(draws: int = 4000):
    from .diffusion import cosine_schedule, forward_sample

    s = cosine_schedule(200)
    rng = np.random.default_rng(2)
    w0 = rng.normal(size=(4, 2, 2))
    for t in (1, 50, 199):
        eps = rng.normal(size=(draws, 4, 2, 2))
        x = forward_sample(np.broadcast_to(w0, eps.shape), t, eps, s)
        ab = float(s.alpha_bar[t])
        se = math.sqrt((1 - ab) / draws)
        assert np.all(np.abs(x.mean(0) - math.sqrt(ab) * w0) < 4 * se), t
        assert np.all(np.abs(x.var(0) / (1 - ab) - 1) < 0.15), t
    return f"{draws} draws at t in (1, 50, 199)"


def check_reverse_step():
    from .diffusion import cosine_schedule, reverse_step

    s = cosine_schedule(200)
    rng = np.random.default_rng(3)
    w0 = rng.uniform(-1, 1, size=(4, 4, 4))
    wt = rng.normal(size=(4, 4, 4))
    out = reverse_step(wt, w0, 1, s)
    assert np.allclose(out, w0), "t=1 deterministic step must return the clean estimate"
    big = reverse_step(wt, np.full_like(w0, 10.0), 5, s)
    capped = reverse_step(wt, np.full_like(w0, 3.0), 5, s)
    assert np.array_equal(big, capped)
    return "t=1 returns w0_hat; clean estimate clamped to +-3"


def check_adamw():
    from .diffusion import adamw_step, ema_update, init_optimizer

    rng = np.random.default_rng(4)
    p0 = rng.normal(size=5)
    g = rng.normal(size=5)
    params = {"w": torch.tensor(p0)}
    st = init_optimizer(params, lr=0.1, weight_decay=0.01)
    new, st = adamw_step(params, {"w": torch.tensor(g)}, st)
    # first step: bias-corrected m/sqrt(v) = sign(g) up to eps
    ref = p0 - 0.1 * (g / (np.abs(g) + 1e-8)) - 0.1 * 0.01 * p0
    assert np.allclose(new["w"].numpy(), ref, atol=1e-12)
    e = ema_update({"w": torch.zeros(5)}, {"w": torch.ones(5)}, 0.9)
    assert torch.allclose(e["w"], torch.full((5,), 0.1, dtype=e["w"].dtype))
    same = ema_update({"w": torch.tensor(p0)}, {"w": torch.tensor(p0)}, 0.37)
    assert torch.allclose(same["w"], torch.tensor(p0), rtol=0, atol=1e-15)
    return "first AdamW step and EMA fixed point"


def check_param_format():
    from .diffusion import params_from_bytes, params_to_bytes
    from .errors import FormatError

    rng = np.random.default_rng(5)
    tree = {"a.weight": torch.tensor(rng.normal(size=(3, 2)), dtype=torch.float32),
            "b": torch.tensor(rng.normal(size=(4,)), dtype=torch.float32)}
    blob = params_to_bytes(tree)
    back = params_from_bytes(blob)
    assert all(torch.equal(tree[k], back[k]) for k in tree)
    missed = 0
    for i in range(len(blob)):
        bad = bytearray(blob)
        bad[i] ^= 0xFF
        try:
            params_from_bytes(bytes(bad))
            missed += 1
        except FormatError:
            pass
    assert missed == 0, f"{missed} undetected corruptions"
    return f"{len(blob)} single-byte corruptions all detected"


# ---------------------------------------------------------------------------
# salient_model


def _tiny_denoiser():
    from .model import DenoiserConfig, build_denoiser

    cfg = DenoiserConfig(levels=2, base_channels=8, time_dim=16, groups=4)
    return build_denoiser(cfg, seed=0, dtype=torch.float64)


def tiny_batch(model, n: int = 2, size: int = 16, seed: int = 0):
    from .diffusion import cosine_schedule
    from .model import LossWeights, SliceSet, make_batch, prepare_slices

    rng = np.random.default_rng(seed)
    x = np.clip(rng.normal(0, 0.4, size=(n, size, size)), -1, 1)
    m = np.zeros((n, size, size), dtype=np.uint8)
    m[:, 5:10, 6:11] = 1
    nb = np.stack([np.stack([np.roll(xi, 1, 0), np.roll(xi, -1, 0)]) for xi in x])
    prep = prepare_slices(SliceSet(x, m, nb), model.cfg, LossWeights(), dtype=torch.float64)
    codes = np.zeros(n, dtype=np.int8)
    return make_batch(prep, np.arange(n), codes, cosine_schedule(200), torch.Generator().manual_seed(seed), rng)


def check_total_loss_gradient(n_coords: int = 50):
    from .diffusion import param_tree
    from .model import total_loss

    model = _tiny_denoiser()
    params = param_tree(model)
    params["fsa_gamma"] = torch.tensor([0.3, -0.2, 0.5, 0.1], dtype=torch.float64)
    batch = tiny_batch(model)
    res = gradient_check(lambda p: total_loss(model, batch, p), params, n_coords, always=("fsa_gamma",))
    assert res["max_rel_err"] < 1e-3, res["max_rel_err"]
    return f"{res['n']} coords, max rel err {res['max_rel_err']:.2e}"


def check_fsa_identity():
    from .model import fsa_modulate

    rng = np.random.default_rng(6)
    w = torch.tensor(rng.normal(size=(4, 8, 8)))
    m = torch.tensor((rng.random((8, 8)) > 0.5).astype(np.float64))
    assert torch.equal(fsa_modulate(w, m, torch.zeros(4, dtype=torch.float64)), w)
    assert torch.equal(fsa_modulate(w, torch.zeros(8, 8, dtype=torch.float64), torch.ones(4, dtype=torch.float64)), w)
    return "zero gains and empty mask are identities"


def check_condition():
    from .model import build_condition

    rng = np.random.default_rng(7)
    m = (rng.random((16, 16)) > 0.7).astype(np.uint8)
    nb = [rng.normal(size=(16, 16)) for _ in range(2)]
    full = build_condition(m, nb).channels
    assert full.shape == (3, 8, 8)
    assert np.all(build_condition(m, nb, drop_all=True).channels == 0)
    dn = build_condition(m, nb, drop_neighbors=True).channels
    assert np.array_equal(dn[0], full[0]) and np.all(dn[1:] == 0)
    return "layout and dropout flags"


def check_guidance_algebra():
    from .model import combine_guidance

    g = torch.Generator().manual_seed(8)
    u, m, mn = (torch.randn(2, 4, 8, 8, generator=g) for _ in range(3))
    assert torch.equal(combine_guidance(u, m, mn, 0.0, 0.0), u)
    assert torch.equal(combine_guidance(u, m, mn, 1.0, 0.0), m)
    assert torch.equal(combine_guidance(u, m, mn, 1.0, 1.0), mn)
    s1, s2 = 2.5, 0.7
    ref = u.double() + s1 * (m.double() - u.double()) + s2 * (mn.double() - m.double())
    assert torch.equal(combine_guidance(u, m, mn, s1, s2), ref.float())
    return "(0,0)->u, (1,0)->m, (1,1)->mn exactly"


def check_loss_examples():
    from .model import loss_aux, loss_hf_variance, loss_ll_moments, loss_wavelet

    rng = np.random.default_rng(9)
    w = torch.tensor(rng.normal(size=(4, 8, 8)))
    ones = torch.ones(4, 8, 8, dtype=torch.float64)
    assert float(loss_wavelet(w, w, ones)) == 0.0
    assert abs(float(loss_wavelet(w + 0.5, w, ones)) - 0.5) < 1e-12
    assert float(loss_ll_moments(w, w, 0.1, 0.1)) < 1e-12
    assert float(loss_hf_variance(w, w, (0.1, 0.1, 0.05))) < 1e-12
    x = torch.tensor(rng.uniform(-1, 1, size=(16, 16)))
    assert float(loss_aux(x, x, np.zeros((16, 16)), 0.1, 1.0)) == 0.0
    return "zero at equality, L1 offset example"


# ---------------------------------------------------------------------------
# mask_vae


def _tiny_vae():
    from .mask_vae import VAEConfig, build_vae

    return build_vae(VAEConfig(latent_dim=8, size=(8, 16, 16), channels=(4, 8, 8)), seed=0, dtype=torch.float64)


def check_vae_gradient(n_coords: int = 50):
    from .diffusion import param_tree
    from .mask_vae import LatentCode, vae_loss

    model = _tiny_vae()
    rng = np.random.default_rng(10)
    tgt = np.zeros((2, 8, 16, 16), dtype=np.uint8)
    tgt[:, 2:6, 4:11, 5:12] = 1
    xi = torch.tensor(rng.normal(size=(2, 8)))
    x = torch.tensor(tgt, dtype=torch.float64)

    def loss(p):
        pred, mu, lv = torch.func.functional_call(model, p, (x, xi))
        return vae_loss(pred, tgt, LatentCode(mu, lv, mu + torch.exp(0.5 * lv) * xi, xi), fb=0.0)

    res = gradient_check(loss, param_tree(model), n_coords)
    assert res["max_rel_err"] < 1e-3, res["max_rel_err"]
    return f"{res['n']} coords, max rel err {res['max_rel_err']:.2e}"


def check_vae_loss_examples():
    from .mask_vae import LatentCode, kl_per_dim, soft_dice, vae_loss_terms

    t = np.zeros((1, 4, 4, 4), dtype=np.uint8)
    t[0, 1:3, 1:3, 1:3] = 1
    z = torch.zeros(1, 32, dtype=torch.float64)
    code = LatentCode(z, z, z, z)
    terms = vae_loss_terms(torch.tensor(t, dtype=torch.float64), t, code)
    assert float(terms["dice"]) < 1e-12 and float(terms["bce"]) < 1e-4
    assert abs(float(terms["kl"]) - 32 * 0.05) < 1e-12
    assert abs(float(kl_per_dim(torch.tensor(1.0), torch.tensor(0.0))) - 0.5) < 1e-12
    a = torch.zeros(1, 8, dtype=torch.float64)
    b = torch.zeros(1, 8, dtype=torch.float64)
    a[0, :4] = 1
    b[0, 2:6] = 1
    assert abs(float(soft_dice(a, b)) - 0.5) < 1e-12
    return "KL floor D*fb, KL_d=0.5, half-overlap Dice 0.5"


def check_reparameterization():
    from .mask_vae import encode

    model = _tiny_vae()
    vol = np.zeros((8, 16, 16), dtype=np.uint8)
    vol[2:5, 4:9, 4:9] = 1
    code = encode(model, vol)
    xi = torch.randn(10_000, 8, generator=torch.Generator().manual_seed(11), dtype=torch.float64)
    smp = code.mu + torch.exp(0.5 * code.log_var) * xi
    sd = torch.exp(0.5 * code.log_var)[0]
    assert torch.all((smp.mean(0) - code.mu[0]).abs() < 0.03 * sd + 1e-12)
    assert torch.all((smp.std(0) / sd - 1).abs() < 0.03)
    return "10^4 draws match (mu, exp(log_var/2)) within 3%"


# ---------------------------------------------------------------------------
# phantom_data


def check_phantom_tvr():
    from .phantoms import TVR_BANDS, gen_subject

    for band, (lo, hi) in TVR_BANDS.items():
        for seed in range(3):
            s = gen_subject(seed, True, band)
            assert lo <= s.tvr <= hi, (band, s.tvr)
            assert s.volume.min() >= -1 and s.volume.max() <= 1
    neg = gen_subject(0, False)
    assert neg.mask.sum() == 0 and neg.label == 0
    return "TVR within band for every band"


def check_salv_format():
    from .errors import FormatError
    from .phantoms import gen_subject, volume_from_bytes, volume_to_bytes

    s = gen_subject(3, True, "large", shape=(2, 32, 32))
    blob = volume_to_bytes(s.volume, s.mask)
    rec = volume_from_bytes(blob)
    assert np.array_equal(rec.intensity, s.volume) and np.array_equal(rec.mask, s.mask)
    rng = np.random.default_rng(12)
    positions = rng.choice(len(blob), size=min(len(blob), 400), replace=False)
    for i in positions:
        bad = bytearray(blob)
        bad[i] ^= int(rng.integers(1, 256))
        try:
            volume_from_bytes(bytes(bad))
        except FormatError:
            continue
        raise AssertionError(f"corruption at byte {i} not detected")
    return f"round trip exact, {len(positions)} corruptions detected"


def check_cohort_counts():
    from .phantoms import gen_cohort

    c = gen_cohort(50, 0.1, seed=1, shape=(2, 32, 32))
    assert c.manifest.n_positive == 5 and sum(s.label for s in c.subjects) == 5
    c2 = gen_cohort(50, 0.1, seed=1, shape=(2, 32, 32))
    assert c.manifest.to_json() == c2.manifest.to_json()
    return "exact positive count, deterministic manifest"


# ---------------------------------------------------------------------------
# detection_harness


def check_metrics_brute_force(trials: int = 300):
    from .detection import auprc, auroc

    rng = np.random.default_rng(13)
    done = 0
    while done < trials:
        n = int(rng.integers(2, 9))
        y = rng.integers(0, 2, size=n)
        if y.min() == y.max():
            continue
        s = rng.integers(0, 5, size=n) / 4.0  # coarse scores force ties
        assert abs(auprc(s, y) - brute_auprc(s, y)) < 1e-12
        assert abs(auroc(s, y) - brute_auroc(s, y)) < 1e-12
        done += 1
    s, y = [0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]
    assert abs(auprc(s, y) - 5 / 6) < 1e-12 and auroc(s, y) == 0.75
    return f"{trials} tied instances, worked example 0.8333/0.75"


def check_focal_examples():
    from .detection import focal_loss

    v = float(focal_loss(0.9, 1))
    assert abs(v - 0.25 * 0.01 * -math.log(0.9)) < 1e-12
    assert abs(float(focal_loss(0.5, 1)) - 0.25 * 0.25 * math.log(2)) < 1e-12
    assert abs(float(focal_loss(0.3, 1, alpha=1.0, gamma=0.0)) + math.log(0.3)) < 1e-12
    ps = np.linspace(0.01, 0.99, 50)
    assert np.all(np.diff(focal_loss(torch.tensor(ps), torch.ones(50)).numpy()) < 0)
    return "hand values and monotonicity"


def check_detector_gradient(n_coords: int = 50):
    from .detection import DetectorConfig, build_detector, detector_loss
    from .diffusion import param_tree

    cfg = DetectorConfig(base_channels=4)
    model = build_detector(cfg, dtype=torch.float64)
    rng = np.random.default_rng(14)
    x = rng.uniform(-1, 1, size=(4, 16, 16))
    y = np.array([1, 0, 1, 0])
    m = np.zeros((4, 16, 16), dtype=np.uint8)
    m[0, 4:9, 4:9] = 1
    m[2, 8:12, 2:6] = 1
    res = gradient_check(lambda p: detector_loss(model, x, y, m, cfg, p), param_tree(model), n_coords)
    assert res["max_rel_err"] < 1e-3, res["max_rel_err"]
    return f"{res['n']} coords, max rel err {res['max_rel_err']:.2e}"


def check_aggregation():
    from .detection import GatedAttentionPool, aggregate_subject, epoch_composition

    assert abs(aggregate_subject([0.42]) - 0.42) < 1e-15
    assert abs(aggregate_subject([0.2] * 6) - (1 - 0.8 ** 3)) < 1e-12
    torch.manual_seed(0)
    pool = GatedAttentionPool(5).double()
    w = pool.weights(torch.randn(7, 5, dtype=torch.float64))
    assert abs(float(w.detach().sum()) - 1) < 1e-6
    assert epoch_composition(20, 2) == {"real": 20, "synthetic": 40, "negative": 60}
    return "noisy-or, softmax weights, epoch composition"


def check_alignment_loss():
    from .detection import attention_alignment_loss, resize_mask

    m = np.zeros((16, 16), dtype=np.uint8)
    m[0:8, 0:4] = 1
    a = resize_mask(m).astype(np.float64)
    assert float(attention_alignment_loss(a, m)) == 0.0
    v = float(attention_alignment_loss(np.zeros((4, 4)), m, lam_attn=1.0))
    assert abs(v - 2 / 16) < 1e-12
    assert float(attention_alignment_loss(np.ones((4, 4)), m, lam_attn=0.0)) == 0.0
    return "zero at match, fraction example, lambda=0"


def check_report_roundtrip():
    from .detection import DoseResponseReport, ReportRow

    rows = [ReportRow(16, 0.02, d, 0, 0.1 + 0.2 * d, 0.5, 0.2 * d, int(d == 2)) for d in (0, 1, 2)]
    rep = DoseResponseReport(rows)
    text = rep.to_csv()
    assert DoseResponseReport.from_csv(text).to_csv() == text
    return "CSV round trip"


# ---------------------------------------------------------------------------
# analysis


def check_ms_ssim():
    from .metrics import ms_ssim
    from .phantoms import gen_subject

    x = gen_subject(0, True, "large").volume[6].astype(np.float64)
    rng = np.random.default_rng(15)
    assert abs(ms_ssim(x, x) - 1.0) < 1e-9
    y = np.clip(x + rng.normal(0, 0.1, x.shape), -1, 1)
    assert abs(ms_ssim(x, y) - ms_ssim(y, x)) < 1e-9
    noise = rng.normal(size=x.shape)
    scores = [ms_ssim(x, x + s * noise) for s in (0.05, 0.1, 0.2)]
    assert scores[0] > scores[1] > scores[2], scores
    return "identity, symmetry, monotone degradation"


def check_frechet():
    from .metrics import frechet_distance, frechet_proxy
    from .phantoms import gen_subject

    rng = np.random.default_rng(16)
    slices = [gen_subject(i, False, shape=(1, 64, 64)).volume[0] for i in range(90)]
    assert frechet_proxy(slices, slices) < 1e-6
    a = rng.normal(size=(400, 3))
    b = rng.normal(size=(400, 3)) + [1.0, 0.0, 0.0]
    assert abs(frechet_distance(a, b) - frechet_distance(b, a)) < 1e-6
    return "identity and symmetry"


def check_band_report():
    from .metrics import band_report, band_report_csv, read_band_report

    rng = np.random.default_rng(17)
    xs = rng.uniform(-1, 1, size=(3, 16, 16))
    ms = (rng.random((3, 16, 16)) > 0.6).astype(np.uint8)
    ms[1] = 0
    rows = band_report(xs, ms)
    for r in rows[:3]:
        assert sum(r[f"hist_{k:02d}"] for k in range(64)) == r["roi_pixels"]
    assert rows[1]["roi_empty"] == 1
    const = band_report(np.full((2, 16, 16), 0.2))
    assert all(r["ll_std"] == 0 for r in const)
    text = band_report_csv(rows)
    assert band_report_csv(read_band_report(text)) == text
    return "histogram conservation, empty ROI flag, CSV round trip"


# ---------------------------------------------------------------------------
# optional training smokes


def check_vae_training_smoke():
    from .mask_vae import VAETrainConfig, build_vae, hard_dice, reconstruct, train_vae
    from .pipeline import lesion_volumes, positive_subjects

    vols = lesion_volumes(positive_subjects(32, seed=0))
    model = build_vae()
    res = train_vae(model, vols, VAETrainConfig(steps=400))
    dice = float(np.mean([hard_dice(a, v.data) for a, v in zip(reconstruct(model, vols, res.params), vols)]))
    assert res.min_kl_term >= 32 * 0.05 - 1e-5
    return f"400 steps, mean Dice {dice:.3f}, min KL term {res.min_kl_term:.3f}"


def check_diffusion_training_smoke():
    from .model import DenoiserConfig, DiffusionTrainConfig, build_denoiser, train_diffusion
    from .pipeline import positive_subjects, training_slices

    data = training_slices(positive_subjects(4, seed=0))
    model = build_denoiser(DenoiserConfig(base_channels=16))
    res = train_diffusion(model, data, DiffusionTrainConfig(steps=60, log_every=20))
    losses = [h["loss"] for h in res.history]
    assert all(map(math.isfinite, losses)) and losses[-1] < losses[0], losses
    return f"loss {losses[0]:.4f} -> {losses[-1]:.4f}"


CHECKS = {
    "wavelet_core": [check_wavelet_roundtrip, check_wavelet_reference, check_band_stats_constant, check_weight_map],
    "diffusion_engine": [check_schedule, check_forward_moments, check_reverse_step, check_adamw, check_param_format],
    "salient_model": [check_fsa_identity, check_condition, check_guidance_algebra, check_loss_examples,
                      check_total_loss_gradient],
    "mask_vae": [check_vae_loss_examples, check_reparameterization, check_vae_gradient],
    "phantom_data": [check_phantom_tvr, check_salv_format, check_cohort_counts],
    "detection_harness": [check_metrics_brute_force, check_focal_examples, check_aggregation, check_alignment_loss,
                          check_report_roundtrip, check_detector_gradient],
    "analysis_cli": [check_ms_ssim, check_frechet, check_band_report],
}
FULL_CHECKS = {"training": [check_vae_training_smoke, check_diffusion_training_smoke]}


def run_all(full: bool = False) -> list[CheckResult]:
    groups = dict(CHECKS)
    if full:
        groups.update(FULL_CHECKS)
    results = []
    for module, fns in groups.items():
        for fn in fns:
            t0 = time.perf_counter()
            try:
                detail, ok = fn(), True
            except Exception as exc:  # every failure is reported, none aborts the suite
                detail, ok = f"{type(exc).__name__}: {exc}", False
            dt = time.perf_counter() - t0
            name = fn.__name__.removeprefix("check_")
            log.info("%s %s.%s (%.2fs) %s", "PASS" if ok else "FAIL", module, name, dt, detail)
            results.append(CheckResult(module, name, ok, detail, dt))
    return results


__all__ = ["CheckResult", "gradient_check", "brute_auprc", "brute_auroc", "haar_reference", "tiny_batch", "run_all",
           "CHECKS", "FULL_CHECKS"]
