"""Noise schedule, forward corruption, x0-parameterized reverse steps and optimizer state.

Parameters travel as a *param tree*: a plain ``dict[str, torch.Tensor]`` whose keys
are kept in sorted order. Sorted keys give the stable ordering used both by the
SALP serializer and by finite-difference coordinate sampling.
"""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import FormatError, TrainingError, ValidationError

ALPHA_BAR_MIN = 1e-5
X0_CLAMP = 3.0

ParamTree = dict


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    s: float
    alpha_bar: np.ndarray  # float64, length T + 1

    def __post_init__(self):
        if len(self.alpha_bar) != self.T + 1:
            raise ValidationError("alpha_bar must have T + 1 entries")


def cosine_schedule(T: int = 200, s: float = 0.008) -> NoiseSchedule:
    """Squared-cosine cumulative schedule normalized so that alpha_bar[0] == 1."""
    if int(T) != T or T < 1:
        raise ValidationError(f"T must be a positive integer, got {T}")
    if not s > 0:
        raise ValidationError(f"schedule offset s must be > 0, got {s}")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos((t / T + s) / (1 + s) * np.pi / 2) ** 2
    alpha_bar = np.clip(f / f[0], ALPHA_BAR_MIN, 1.0)
    alpha_bar[0] = 1.0
    return NoiseSchedule(T=int(T), s=float(s), alpha_bar=alpha_bar)


def _check_t(t: int, sched: NoiseSchedule) -> None:
    if not 1 <= t <= sched.T:
        raise ValidationError(f"timestep {t} outside [1, {sched.T}]")


def forward_sample(w0, t: int, eps, sched: NoiseSchedule):
    _check_t(t, sched)
    if tuple(w0.shape) != tuple(eps.shape):
        raise ValidationError(f"eps shape {tuple(eps.shape)} != w0 shape {tuple(w0.shape)}")
    ab = sched.alpha_bar[t]
    return math.sqrt(ab) * w0 + math.sqrt(1.0 - ab) * eps


def forward_sample_batch(w0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Vectorized :func:`forward_sample` with one timestep per leading-batch item."""
    ab = torch.as_tensor(sched.alpha_bar, dtype=w0.dtype)[t]
    ab = ab.reshape(-1, *([1] * (w0.ndim - 1)))
    return ab.sqrt() * w0 + (1 - ab).sqrt() * eps


def reverse_step(w_t, w0_hat, t: int, sched: NoiseSchedule, eta: float = 0.0, noise=None, t_prev: int | None = None):
    """One ancestral step from ``t`` to ``t_prev`` (default ``t - 1``) given a clean estimate.

    ``w0_hat`` is clamped to [-3, 3]. With ``eta = 0`` the step is the posterior
    mean; otherwise ``eta * sqrt(posterior variance) * noise`` is added.
    """
    _check_t(t, sched)
    if not 0.0 <= eta <= 1.0:
        raise ValidationError(f"eta must be in [0, 1], got {eta}")
    if t_prev is None:
        t_prev = t - 1
    if not 0 <= t_prev < t:
        raise ValidationError(f"t_prev {t_prev} must lie in [0, {t})")
    ab_t = float(sched.alpha_bar[t])
    ab_prev = float(sched.alpha_bar[t_prev])
    alpha = ab_t / ab_prev
    beta = 1.0 - alpha
    w0_hat = w0_hat.clamp(-X0_CLAMP, X0_CLAMP) if isinstance(w0_hat, torch.Tensor) else np.clip(w0_hat, -X0_CLAMP, X0_CLAMP)
    if ab_t >= 1.0:
        # degenerate zero-noise step; the mean formula is 0/0
        return w0_hat
    c0 = math.sqrt(ab_prev) * beta / (1.0 - ab_t)
    ct = math.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab_t)
    out = c0 * w0_hat + ct * w_t
    if eta > 0.0:
        if noise is None:
            raise ValidationError("eta > 0 requires a noise sample")
        var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
        out = out + eta * math.sqrt(var) * noise
    return out


def strided_timesteps(T: int, steps: int) -> list[int]:
    """Descending, unique timesteps from T down to 1, uniformly strided."""
    if not 1 <= steps <= T:
        raise ValidationError(f"steps must be in [1, {T}], got {steps}")
    ts = np.round(np.linspace(T, 1, steps)).astype(int)
    return sorted(set(ts.tolist()), reverse=True)


# ---------------------------------------------------------------------------
# parameter trees


def param_tree(module: nn.Module) -> ParamTree:
    return {name: p.detach().clone() for name, p in sorted(module.named_parameters())}


def load_tree(module: nn.Module, params: ParamTree) -> None:
    with torch.no_grad():
        for name, p in module.named_parameters():
            p.copy_(params[name])


def tree_like(params: ParamTree, fill: float = 0.0) -> ParamTree:
    return {k: torch.full_like(v, fill) for k, v in params.items()}


def tree_size(params: ParamTree) -> int:
    return sum(v.numel() for v in params.values())


def tree_allfinite(params: ParamTree) -> bool:
    return all(bool(torch.isfinite(v).all()) for v in params.values())


@dataclass
class OptimizerState:
    m: ParamTree
    v: ParamTree
    step: int = 0
    lr: float = 1e-3
    lr0: float = 1e-3
    weight_decay: float = 0.01
    total_steps: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optimizer(params: ParamTree, lr: float = 1e-3, weight_decay: float = 0.01,
                   total_steps: int | None = None, **kw) -> OptimizerState:
    return OptimizerState(m=tree_like(params), v=tree_like(params), lr=lr, lr0=lr,
                          weight_decay=weight_decay, total_steps=total_steps, **kw)


def cosine_lr(lr0: float, step: int, total_steps: int | None) -> float:
    """Learning rate for the ``step``-th update (0-based); decays to 0 at ``total_steps``."""
    if not total_steps:
        return lr0
    frac = min(step, total_steps) / total_steps
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * frac))


def adamw_step(params: ParamTree, grads: ParamTree, state: OptimizerState) -> tuple[ParamTree, OptimizerState]:
    """Decoupled-weight-decay Adam update. Returns new trees; inputs are not modified."""
    if grads.keys() != params.keys():
        raise TrainingError(f"gradient tree keys differ from params: {sorted(set(grads) ^ set(params))}")
    for name, g in grads.items():
        if not bool(torch.isfinite(g).all()):
            raise TrainingError(f"non-finite gradient in parameter '{name}'")
    lr = cosine_lr(state.lr0, state.step, state.total_steps)
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** step
    bc2 = 1.0 - b2 ** step
    new_p, new_m, new_v = {}, {}, {}
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m = b1 * state.m[name] + (1 - b1) * g
            v = b2 * state.v[name] + (1 - b2) * g * g
            update = (m / bc1) / ((v / bc2).sqrt() + state.eps)
            new_p[name] = p - lr * state.weight_decay * p - lr * update
            new_m[name] = m
            new_v[name] = v
    new_state = OptimizerState(m=new_m, v=new_v, step=step, lr=lr, lr0=state.lr0,
                               weight_decay=state.weight_decay, total_steps=state.total_steps,
                               beta1=b1, beta2=b2, eps=state.eps)
    return new_p, new_state


def ema_update(ema: ParamTree, params: ParamTree, decay: float = 0.999) -> ParamTree:
    if not 0.0 <= decay <= 1.0:
        raise ValidationError(f"EMA decay must be in [0, 1], got {decay}")
    with torch.no_grad():
        return {k: decay * ema[k] + (1.0 - decay) * params[k] for k in ema}


class Trainer:
    """Couples an ``nn.Module`` with functional AdamW + EMA updates.

    The module owns the live parameters (so autograd works as usual); after every
    backward pass the gradients are pulled into a tree, stepped with
    :func:`adamw_step` and written back.
    """

    def __init__(self, module: nn.Module, lr: float, total_steps: int, weight_decay: float = 0.01,
                 ema_decay: float | None = None):
        self.module = module
        self.state = init_optimizer(param_tree(module), lr=lr, weight_decay=weight_decay, total_steps=total_steps)
        self.ema_decay = ema_decay
        self.ema = param_tree(module) if ema_decay is not None else None

    def step(self) -> None:
        params = {n: p.detach() for n, p in sorted(self.module.named_parameters())}
        grads = {n: (p.grad if p.grad is not None else torch.zeros_like(p))
                 for n, p in sorted(self.module.named_parameters())}
        new_params, self.state = adamw_step(params, grads, self.state)
        load_tree(self.module, new_params)
        self.module.zero_grad(set_to_none=True)
        if self.ema is not None:
            self.ema = ema_update(self.ema, new_params, self.ema_decay)


# ---------------------------------------------------------------------------
# SALP serialization

SALP_MAGIC = b"SALP"
SALP_VERSION = 1


def params_to_bytes(params: ParamTree) -> bytes:
    """Encode a tree as SALP; the trailing CRC32 covers every preceding byte."""
    parts = [SALP_MAGIC, struct.pack("<II", SALP_VERSION, len(params))]
    for name in sorted(params):
        arr = params[name].detach().cpu().numpy().astype("<f4")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise FormatError(f"entry '{name}' too large for SALP header")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def params_from_bytes(blob: bytes) -> ParamTree:
    if len(blob) < 16:
        raise FormatError(f"SALP blob too short ({len(blob)} bytes)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if body[:4] != SALP_MAGIC:
        raise FormatError(f"bad SALP magic {body[:4]!r}")
    version, count = struct.unpack_from("<II", body, 4)
    if version != SALP_VERSION:
        raise FormatError(f"unsupported SALP version {version}")
    if zlib.crc32(body) != crc:
        raise FormatError("SALP checksum mismatch")
    off = 12
    out: ParamTree = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", body, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", body, off)
            off += 4 * rank
            n = int(np.prod(dims, dtype=np.int64))
            if off + 4 * n > len(body):
                raise FormatError(f"entry '{name}' payload truncated")
            arr = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(dims)
            off += 4 * n
            out[name] = torch.from_numpy(arr.astype(np.float32))
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"malformed SALP entry table: {exc}") from exc
    if off != len(body):
        raise FormatError(f"SALP has {len(body) - off} trailing bytes")
    return out


def save_params(path, params: ParamTree) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path) -> ParamTree:
    return params_from_bytes(Path(path).read_bytes())
