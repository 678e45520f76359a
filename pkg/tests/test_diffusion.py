import math

import numpy as np
import pytest
import torch
from torch import nn

from salient.diffusion import (
    NoiseSchedule,
    Trainer,
    adamw_step,
    cosine_lr,
    cosine_schedule,
    ema_update,
    forward_sample,
    forward_sample_batch,
    init_optimizer,
    load_params,
    params_from_bytes,
    params_to_bytes,
    reverse_step,
    save_params,
    strided_timesteps,
)
from salient.errors import FormatError, TrainingError, ValidationError

# alpha_bar at t = T/2 for T = 200, s = 0.008, evaluated in 30-digit arithmetic from
# cos^2((0.5 + 0.008) / 1.008 * pi / 2) / cos^2(0.008 / 1.008 * pi / 2)
GOLDEN_HALF = 0.493843590440637713


def test_schedule_endpoints_and_golden():
    s = cosine_schedule(200)
    assert s.alpha_bar[0] == 1.0
    assert s.alpha_bar[200] == 1e-5
    assert abs(s.alpha_bar[100] - GOLDEN_HALF) < 1e-12


@pytest.mark.parametrize("T", [1, 10, 200, 1000])
def test_schedule_monotone(T):
    ab = cosine_schedule(T).alpha_bar
    assert len(ab) == T + 1 and ab.min() >= 1e-5 and ab.max() == 1.0
    # strictly decreasing until the floor; long schedules clamp a short tail
    above = ab[ab > 1e-5]
    assert np.all(np.diff(above) < 0) and np.all(np.diff(ab) <= 0)
    assert (ab == 1e-5).sum() <= max(1, T // 250)


@pytest.mark.parametrize("T,s", [(0, 0.008), (10, 0.0), (10, -1.0)])
def test_schedule_rejects_bad_params(T, s):
    with pytest.raises(ValidationError):
        cosine_schedule(T, s)


def _sched_with(ab_t: float) -> NoiseSchedule:
    return NoiseSchedule(T=2, s=0.008, alpha_bar=np.array([1.0, ab_t, 1e-5]))


def test_forward_scalar_example():
    out = forward_sample(np.array(2.0), 1, np.array(1.0), _sched_with(0.25))
    assert abs(out - (0.5 * 2 + math.sqrt(0.75))) < 1e-15
    assert abs(out - 1.8660254) < 1e-7


def test_forward_zero_noise_exact(rng):
    s = cosine_schedule(200)
    w0 = rng.normal(size=(4, 3, 3))
    assert np.array_equal(forward_sample(w0, 37, np.zeros_like(w0), s), math.sqrt(s.alpha_bar[37]) * w0)


def test_forward_rejects_bad_t_and_shapes():
    s = cosine_schedule(10)
    for t in (0, 11):
        with pytest.raises(ValidationError):
            forward_sample(np.zeros(2), t, np.zeros(2), s)
    with pytest.raises(ValidationError):
        forward_sample(np.zeros(2), 1, np.zeros(3), s)


def test_forward_batch_matches_scalar(rng):
    s = cosine_schedule(50)
    w0 = torch.tensor(rng.normal(size=(3, 4, 2, 2)))
    eps = torch.tensor(rng.normal(size=(3, 4, 2, 2)))
    t = torch.tensor([1, 20, 50])
    out = forward_sample_batch(w0, t, eps, s)
    for i in range(3):
        ref = forward_sample(w0[i], int(t[i]), eps[i], s)
        torch.testing.assert_close(out[i], ref, rtol=0, atol=1e-14)


def _oracle_mean(w_t, w0, ab_t, ab_prev):
    # scalar re-derivation of the posterior mean and variance
    a = ab_t / ab_prev
    b = 1 - a
    mean = (ab_prev ** 0.5 * b / (1 - ab_t)) * w0 + (a ** 0.5 * (1 - ab_prev) / (1 - ab_t)) * w_t
    var = b * (1 - ab_prev) / (1 - ab_t)
    return mean, var


@pytest.mark.parametrize("eta", [0.0, 1.0, 0.4])
def test_reverse_step_against_scalar_oracle(rng, eta):
    s = cosine_schedule(200)
    for t in (2, 77, 200):
        w_t, w0, z = rng.normal(size=3)
        out = reverse_step(np.array(w_t), np.array(w0), t, s, eta=eta, noise=np.array(z))
        mean, var = _oracle_mean(w_t, w0, s.alpha_bar[t], s.alpha_bar[t - 1])
        assert abs(out - (mean + eta * math.sqrt(var) * z)) < 1e-12


def test_reverse_step_final_collapse(rng):
    s = cosine_schedule(200)
    w0 = rng.uniform(-2, 2, size=(4, 4, 4))
    assert np.array_equal(reverse_step(rng.normal(size=w0.shape), w0, 1, s), w0)


def test_reverse_step_fixed_point_of_flat_schedule(rng):
    flat = NoiseSchedule(T=2, s=0.008, alpha_bar=np.array([1.0, 0.5, 0.5]))
    w = rng.uniform(-1, 1, size=(4, 2, 2))
    np.testing.assert_allclose(reverse_step(w, w, 2, flat), w, atol=1e-15)


def test_reverse_step_clamps_and_validates(rng):
    s = cosine_schedule(10)
    w = rng.normal(size=4)
    assert np.array_equal(reverse_step(w, np.full(4, 50.0), 5, s), reverse_step(w, np.full(4, 3.0), 5, s))
    with pytest.raises(ValidationError):
        reverse_step(w, w, 5, s, eta=1.5, noise=w)
    with pytest.raises(ValidationError):
        reverse_step(w, w, 5, s, eta=0.5)
    with pytest.raises(ValidationError):
        reverse_step(w, w, 0, s)


@pytest.mark.parametrize("t", [1, 5, 60, 200])
def test_reverse_consistency_with_oracle_clean_estimate(rng, t):
    s = cosine_schedule(200)
    w0 = rng.uniform(-1, 1, size=(4, 8, 8))
    w = forward_sample(w0, t, rng.normal(size=w0.shape), s)
    for k in range(t, 0, -1):
        w = reverse_step(w, w0, k, s)
    assert np.abs(w - w0).max() < 1e-4


def test_strided_timesteps():
    ts = strided_timesteps(200, 50)
    assert ts[0] == 200 and ts[-1] == 1 and len(ts) == 50
    assert all(a > b for a, b in zip(ts, ts[1:]))
    assert strided_timesteps(5, 5) == [5, 4, 3, 2, 1]
    with pytest.raises(ValidationError):
        strided_timesteps(10, 11)


def test_strided_sampling_consistency(rng):
    s = cosine_schedule(200)
    w0 = rng.uniform(-1, 1, size=(4, 4, 4))
    ts = strided_timesteps(200, 20)
    w = rng.normal(size=w0.shape)
    for i, t in enumerate(ts):
        w = reverse_step(w, w0, t, s, t_prev=ts[i + 1] if i + 1 < len(ts) else 0)
    np.testing.assert_allclose(w, w0, atol=1e-12)


# ---------------------------------------------------------------------------
# optimizer and EMA


def _tree(v):
    return {"p": torch.tensor(v, dtype=torch.float64)}


def test_adamw_zero_grad_no_decay_is_noop():
    params = _tree([1.0, -2.0])
    st = init_optimizer(params, lr=0.1, weight_decay=0.0)
    new, st2 = adamw_step(params, _tree([0.0, 0.0]), st)
    assert torch.equal(new["p"], params["p"])
    assert torch.equal(st2.m["p"], st.m["p"]) and torch.equal(st2.v["p"], st.v["p"])
    assert st2.step == 1


def test_adamw_first_step_hand_value():
    new, _ = adamw_step(_tree([1.0]), _tree([1.0]), init_optimizer(_tree([1.0]), lr=0.1, weight_decay=0.0))
    assert abs(float(new["p"][0]) - (1 - 0.1 / (1 + 1e-8))) < 1e-15


def test_adamw_decoupled_decay_only():
    new, _ = adamw_step(_tree([2.0]), _tree([0.0]), init_optimizer(_tree([2.0]), lr=0.1, weight_decay=0.01))
    assert abs(float(new["p"][0]) - 2.0 * (1 - 0.001)) < 1e-15


def test_adamw_matches_torch_adamw(rng):
    p0 = rng.normal(size=(5,))
    grads = rng.normal(size=(6, 5))
    ref = torch.nn.Parameter(torch.tensor(p0))
    opt = torch.optim.AdamW([ref], lr=0.05, weight_decay=0.01, eps=1e-8)
    params = _tree(p0)
    st = init_optimizer(params, lr=0.05, weight_decay=0.01)
    for g in grads:
        ref.grad = torch.tensor(g)
        opt.step()
        params, st = adamw_step(params, _tree(g), st)
    torch.testing.assert_close(params["p"], ref.detach(), rtol=0, atol=1e-12)


def test_adamw_nonfinite_gradient_names_parameter():
    params = {"a": torch.zeros(2), "layer.weight": torch.zeros(2)}
    grads = {"a": torch.zeros(2), "layer.weight": torch.tensor([0.0, float("inf")])}
    with pytest.raises(TrainingError, match="layer.weight"):
        adamw_step(params, grads, init_optimizer(params))


def test_adamw_descends_quadratic():
    params = _tree(np.linspace(-3, 3, 10))
    f0 = 0.5 * float((params["p"] ** 2).sum())
    st = init_optimizer(params, lr=0.1, weight_decay=0.0)
    for _ in range(100):
        params, st = adamw_step(params, {"p": params["p"].clone()}, st)
    assert 0.5 * float((params["p"] ** 2).sum()) <= 0.1 * f0


def test_cosine_lr_endpoints():
    assert cosine_lr(1.0, 0, 100) == 1.0
    assert abs(cosine_lr(1.0, 50, 100) - 0.5) < 1e-15
    assert cosine_lr(1.0, 100, 100) == 0.0
    assert cosine_lr(0.3, 999, None) == 0.3


def test_second_moments_nonnegative(rng):
    params = _tree(rng.normal(size=8))
    st = init_optimizer(params)
    for _ in range(5):
        params, st = adamw_step(params, _tree(rng.normal(size=8)), st)
    assert bool((st.v["p"] >= 0).all())


def test_ema_examples():
    ema, p = _tree([0.0]), _tree([1.0])
    for _ in range(2):
        ema = ema_update(ema, p, 0.9)
    assert abs(float(ema["p"][0]) - 0.19) < 1e-15
    assert torch.equal(ema_update(_tree([5.0]), p, 0.0)["p"], p["p"])
    assert torch.equal(ema_update(_tree([5.0]), p, 1.0)["p"], _tree([5.0])["p"])
    with pytest.raises(ValidationError):
        ema_update(ema, p, 1.1)


def test_trainer_reduces_loss():
    torch.manual_seed(0)
    model = nn.Linear(3, 1).double()
    x = torch.randn(64, 3, dtype=torch.float64)
    y = x @ torch.tensor([[1.0], [-2.0], [0.5]], dtype=torch.float64)
    tr = Trainer(model, lr=0.05, total_steps=200, weight_decay=0.0, ema_decay=0.9)
    first = None
    for _ in range(200):
        loss = ((model(x) - y) ** 2).mean()
        first = first if first is not None else float(loss.detach())
        loss.backward()
        tr.step()
    assert float(((model(x) - y) ** 2).mean().detach()) < 0.01 * first
    assert tr.ema is not None and set(tr.ema) == {"weight", "bias"}


# ---------------------------------------------------------------------------
# SALP format


def _sample_tree(rng):
    return {
        "conv.weight": torch.tensor(rng.normal(size=(2, 1, 3, 3)), dtype=torch.float32),
        "conv.bias": torch.tensor(rng.normal(size=(2,)), dtype=torch.float32),
        "scalar": torch.tensor(1.5, dtype=torch.float32),
        "unicodé": torch.zeros(0, dtype=torch.float32),
    }


def test_salp_roundtrip_bit_exact(rng, tmp_path):
    tree = _sample_tree(rng)
    save_params(tmp_path / "p.salp", tree)
    back = load_params(tmp_path / "p.salp")
    assert list(back) == sorted(tree)
    for k in tree:
        assert back[k].shape == tree[k].shape
        assert back[k].numpy().tobytes() == tree[k].numpy().tobytes()


def test_salp_header_layout(rng):
    blob = params_to_bytes(_sample_tree(rng))
    assert blob[:4] == b"SALP"
    assert int.from_bytes(blob[4:8], "little") == 1
    assert int.from_bytes(blob[8:12], "little") == 4
    name_len = int.from_bytes(blob[12:14], "little")
    assert blob[14:14 + name_len] == b"conv.bias"


def test_salp_every_single_byte_corruption_detected(rng):
    blob = params_to_bytes(_sample_tree(rng))
    for i in range(len(blob)):
        for flip in (0x01, 0x80):
            bad = bytearray(blob)
            bad[i] ^= flip
            with pytest.raises(FormatError):
                params_from_bytes(bytes(bad))


def test_salp_truncation_detected(rng):
    blob = params_to_bytes(_sample_tree(rng))
    for n in (0, 3, 15, len(blob) // 2, len(blob) - 1):
        with pytest.raises(FormatError):
            params_from_bytes(blob[:n])
