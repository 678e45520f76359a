"""Mask-conditioned wavelet denoiser.

The network sees ``[fsa(w_t) | cond]`` where ``cond`` is the half-resolution
mask followed by neighbor-slice wavelet bands, and predicts clean coefficients.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch import nn
from torch.func import functional_call

from .diffusion import (
    NoiseSchedule,
    Trainer,
    cosine_schedule,
    forward_sample_batch,
    param_tree,
    reverse_step,
    strided_timesteps,
    tree_allfinite,
)
from .errors import ConfigError, DimensionError, SamplingError, ValidationError
from .wavelet import BANDS, DEFAULT_BASE_WEIGHTS, boundary_weight_map, downsample_mask, dwt2, idwt2, torch_band_moments

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DenoiserConfig:
    levels: int = 3
    base_channels: int = 32
    attention_levels: int = 1
    time_dim: int = 64
    neighbor_offsets: tuple[int, ...] = (-1, 1)
    neighbor_bands: tuple[str, ...] = ("LL",)
    groups: int = 8

    def __post_init__(self):
        if self.levels < 2:
            raise ConfigError("denoiser needs at least 2 levels")
        if not 0 <= self.attention_levels <= self.levels:
            raise ConfigError("attention_levels must lie in [0, levels]")
        bad = set(self.neighbor_bands) - set(BANDS)
        if bad:
            raise ConfigError(f"unknown neighbor bands {sorted(bad)}")

    @property
    def cond_channels(self) -> int:
        return 1 + len(self.neighbor_offsets) * len(self.neighbor_bands)

    def channels(self, level: int) -> int:
        return self.base_channels * min(2 ** level, 4)


@dataclass(frozen=True)
class LossWeights:
    lam_mu: float = 0.1
    lam_sigma: float = 0.1
    lam_hf: tuple[float, float, float] = (0.1, 0.1, 0.05)
    lam_edge: float = 0.1
    lam_sat: float = 1.0
    band_base: tuple[float, float, float, float] = DEFAULT_BASE_WEIGHTS
    beta: float = 2.0
    dilation: int = 2

    def __post_init__(self):
        vals = [self.lam_mu, self.lam_sigma, *self.lam_hf, self.lam_edge, self.lam_sat, *self.band_base, self.beta]
        if min(vals) < 0 or self.dilation < 0:
            raise ConfigError("loss weights must be nonnegative")


@dataclass(frozen=True)
class GuidanceScales:
    s_mask: float = 2.0
    s_nei0: float = 1.0
    p: float = 1.0

    def __post_init__(self):
        if self.s_mask < 0 or self.s_nei0 < 0 or self.p < 0:
            raise ConfigError("guidance scales and decay exponent must be nonnegative")

    def s_nei(self, t: int, T: int) -> float:
        return self.s_nei0 * (t / T) ** self.p


# ---------------------------------------------------------------------------
# FSA and conditioning


def fsa_modulate(w_t, mask_ds, gamma):
    """Per-band gate ``w_t[b] * (1 + mask * tanh(gamma[b]))``.

    ``w_t`` is ``(..., 4, h, w)``; ``mask_ds`` broadcasts against one band.
    """
    w_t, mask_ds, gamma = (torch.as_tensor(a) for a in (w_t, mask_ds, gamma))
    if w_t.shape[-3] != 4 or tuple(mask_ds.shape[-2:]) != tuple(w_t.shape[-2:]):
        raise DimensionError(f"fsa shapes incompatible: coeffs {tuple(w_t.shape)}, mask {tuple(mask_ds.shape)}")
    gate = 1 + mask_ds.unsqueeze(-3).to(w_t.dtype) * torch.tanh(gamma.to(w_t.dtype)).reshape(4, 1, 1)
    return w_t * gate


@dataclass
class CondStack:
    channels: np.ndarray  # (C, h, w)
    dropped_neighbors: bool = False
    dropped_all: bool = False


def _neighbor_channels(neighbors, bands) -> list[np.ndarray]:
    idx = [BANDS.index(b) for b in bands]
    out = []
    for n in neighbors:
        coeffs = dwt2(np.asarray(n, dtype=np.float64))
        out.extend(coeffs[i] for i in idx)
    return out


def build_condition(mask, neighbors, drop_neighbors: bool = False, drop_all: bool = False,
                    neighbor_bands=("LL",)) -> CondStack:
    """Conditioning stack ``[mask_ds, band(neighbor_0), band(neighbor_1), ...]``."""
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise ValidationError("conditioning mask must be binary")
    for n in neighbors:
        if np.shape(n) != mask.shape:
            raise DimensionError(f"neighbor shape {np.shape(n)} != mask shape {mask.shape}")
    chans = [downsample_mask(mask).astype(np.float64)] + _neighbor_channels(neighbors, neighbor_bands)
    stack = np.stack(chans)
    if drop_all:
        stack[:] = 0.0
    elif drop_neighbors:
        stack[1:] = 0.0
    return CondStack(stack, dropped_neighbors=drop_neighbors or drop_all, dropped_all=drop_all)


def neighbor_slices(volume: np.ndarray, z: int, offsets=(-1, 1)) -> list[np.ndarray]:
    """Axial neighbors at ``z + offset``; out-of-range offsets reuse the center slice."""
    zs = volume.shape[0]
    return [volume[z + o] if 0 <= z + o < zs else volume[z] for o in offsets]


# ---------------------------------------------------------------------------
# network


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.film = nn.Linear(tdim, 2 * cout)
        self.norm2 = nn.GroupNorm(min(groups, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.film(temb)[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class SelfAttention(nn.Module):
    def __init__(self, ch: int, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(min(groups, ch), ch)
        self.qkv = nn.Conv2d(ch, 3 * ch, 1)
        self.proj = nn.Conv2d(ch, ch, 1)

    def forward(self, x):
        n, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(n, 3, c, h * w).unbind(1)
        attn = torch.softmax(torch.einsum("nci,ncj->nij", q, k) / math.sqrt(c), dim=-1)
        out = torch.einsum("nij,ncj->nci", attn, v).reshape(n, c, h, w)
        return x + self.proj(out)


class Denoiser(nn.Module):
    """UNet over wavelet coefficients predicting the clean stack ``w0``."""

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.cfg = cfg
        tdim = cfg.time_dim * 4
        self.fsa_gamma = nn.Parameter(torch.zeros(4))
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_dim, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.inp = nn.Conv2d(4 + cfg.cond_channels, cfg.channels(0), 3, padding=1)
        attn_from = cfg.levels - cfg.attention_levels
        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        ch = cfg.channels(0)
        for lvl in range(cfg.levels):
            out = cfg.channels(lvl)
            self.down_blocks.append(ResBlock(ch, out, tdim, cfg.groups))
            self.down_attn.append(SelfAttention(out, cfg.groups) if lvl >= attn_from else nn.Identity())
            ch = out
            if lvl < cfg.levels - 1:
                self.downsamplers.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
        self.mid = ResBlock(ch, ch, tdim, cfg.groups)
        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        for lvl in reversed(range(cfg.levels)):
            out = cfg.channels(lvl)
            self.up_blocks.append(ResBlock(ch + out, out, tdim, cfg.groups))
            self.up_attn.append(SelfAttention(out, cfg.groups) if lvl >= attn_from else nn.Identity())
            ch = out
            if lvl > 0:
                self.upsamplers.append(nn.Conv2d(ch, cfg.channels(lvl - 1), 3, padding=1))
                ch = cfg.channels(lvl - 1)
        self.out_norm = nn.GroupNorm(min(cfg.groups, ch), ch)
        self.out = nn.Conv2d(ch, 4, 3, padding=1)

    def forward(self, w_t: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        size = w_t.shape[-1]
        if w_t.shape[-2] % 2 ** self.cfg.levels or size % 2 ** self.cfg.levels:
            raise ConfigError(f"wavelet grid {tuple(w_t.shape[-2:])} not divisible by 2^{self.cfg.levels}")
        if cond.shape[1] != self.cfg.cond_channels:
            raise DimensionError(f"expected {self.cfg.cond_channels} condition channels, got {cond.shape[1]}")
        w_mod = fsa_modulate(w_t, cond[:, 0], self.fsa_gamma)
        temb = self.time_mlp(timestep_embedding(t, self.cfg.time_dim).to(w_t.dtype))
        h = self.inp(torch.cat([w_mod, cond], dim=1))
        skips = []
        for lvl in range(self.cfg.levels):
            h = self.down_attn[lvl](self.down_blocks[lvl](h, temb))
            skips.append(h)
            if lvl < self.cfg.levels - 1:
                h = self.downsamplers[lvl](h)
        h = self.mid(h, temb)
        for i, lvl in enumerate(reversed(range(self.cfg.levels))):
            h = torch.cat([h, skips[lvl]], dim=1)
            h = self.up_attn[i](self.up_blocks[i](h, temb))
            if lvl > 0:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsamplers[i](h)
        return self.out(F.silu(self.out_norm(h)))


def build_denoiser(cfg: DenoiserConfig = DenoiserConfig(), seed: int = 0, dtype=torch.float32) -> Denoiser:
    torch.manual_seed(seed)
    return Denoiser(cfg).to(dtype)


def denoise(model: Denoiser, w_t, t, cond, params=None) -> torch.Tensor:
    """Predict ``w0`` from ``w_t``. ``params`` (a tree) overrides the module's own weights."""
    w_t = torch.as_tensor(w_t)
    squeeze = w_t.ndim == 3
    if squeeze:
        w_t = w_t[None]
    cond = torch.as_tensor(cond.channels if isinstance(cond, CondStack) else cond, dtype=w_t.dtype)
    if cond.ndim == 3:
        cond = cond[None]
    t = torch.as_tensor(t).reshape(-1).expand(w_t.shape[0])
    if params is None:
        out = model(w_t, t, cond)
    else:
        out = functional_call(model, params, (w_t, t, cond))
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# losses


def _t(x, like=None):
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if isinstance(like, torch.Tensor) else torch.float64
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _batched(x: torch.Tensor) -> torch.Tensor:
    return x if x.ndim == 4 else x[None]


def loss_wavelet(w0_hat, w0, weights) -> torch.Tensor:
    w0_hat = _t(w0_hat)
    w0, weights = _t(w0, w0_hat), _t(weights, w0_hat)
    if bool((weights < 0).any()):
        raise ValidationError("wavelet loss weights must be nonnegative")
    return (weights * (w0_hat - w0).abs()).mean()


def loss_ll_moments(w0_hat, w0, lam_mu: float, lam_sigma: float) -> torch.Tensor:
    w0_hat = _batched(_t(w0_hat))
    w0 = _batched(_t(w0, w0_hat))
    mu_p, ls_p = torch_band_moments(w0_hat[:, :1])
    mu_t, ls_t = torch_band_moments(w0[:, :1])
    per = lam_mu * (mu_p - mu_t) ** 2 + lam_sigma * (ls_p - ls_t) ** 2
    return per.mean()


def loss_hf_variance(w0_hat, w0, lam_b) -> torch.Tensor:
    w0_hat = _batched(_t(w0_hat))
    w0 = _batched(_t(w0, w0_hat))
    _, ls_p = torch_band_moments(w0_hat[:, 1:])
    _, ls_t = torch_band_moments(w0[:, 1:])
    lam = torch.as_tensor(lam_b, dtype=w0_hat.dtype)
    return (lam * (ls_p - ls_t) ** 2).sum(-1).mean()


_SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def sobel(x: torch.Tensor) -> torch.Tensor:
    """Sobel responses ``(N, 2, H, W)`` of ``(N, H, W)`` images, replicate-padded."""
    k = torch.stack([_SOBEL_X, _SOBEL_X.T])[:, None].to(x.dtype)
    return F.conv2d(F.pad(x[:, None], (1, 1, 1, 1), mode="replicate"), k)


def aux_region(mask, px: int = 4) -> np.ndarray:
    """Mask dilated by ``px`` pixels (square structuring element), per slice."""
    m = np.asarray(mask).astype(bool)
    if not m.any():
        return m
    square = np.ones((1,) * (m.ndim - 2) + (3, 3), dtype=bool)
    return ndimage.binary_dilation(m, structure=square, iterations=px)


def loss_aux(x_hat, x, mask, lam_edge: float, lam_sat: float, region=None) -> torch.Tensor:
    """Edge and saturation penalties over the mask dilated by 4 px; zero when the region is empty."""
    x_hat = _t(x_hat)
    x = _t(x, x_hat)
    if x_hat.ndim == 2:
        x_hat, x = x_hat[None], x[None]
        mask = np.asarray(mask)[None]
    if region is None:
        region = aux_region(mask)
    r = _t(region, x_hat).to(x_hat.dtype)
    if r.ndim == 2:
        r = r[None]
    area = r.flatten(1).sum(1)
    total = torch.zeros((), dtype=x_hat.dtype)
    if lam_edge:
        g = (sobel(x_hat) - sobel(x)).abs().sum(1)
        edge = (g * r).flatten(1).sum(1) / area.clamp_min(1)
        total = total + lam_edge * edge.mean()
    if lam_sat:
        sat = F.relu(x_hat.abs() - 1) ** 2
        total = total + lam_sat * ((sat * r).flatten(1).sum(1) / area.clamp_min(1)).mean()
    return total


@dataclass
class TrainBatch:
    w_t: torch.Tensor  # (N, 4, h, w)
    t: torch.Tensor  # (N,)
    cond: torch.Tensor  # (N, C, h, w)
    w0: torch.Tensor  # (N, 4, h, w)
    mask: np.ndarray  # (N, H, W) full resolution
    weight_map: torch.Tensor | None = None
    region: np.ndarray | None = None


def batch_weight_map(mask: np.ndarray, weights: LossWeights) -> np.ndarray:
    ds = downsample_mask(mask)
    return np.stack([boundary_weight_map(m, weights.band_base, weights.beta, weights.dilation) for m in ds])


def loss_terms(w0_hat: torch.Tensor, batch: TrainBatch, weights: LossWeights) -> dict[str, torch.Tensor]:
    W = batch.weight_map
    if W is None:
        W = torch.as_tensor(batch_weight_map(batch.mask, weights), dtype=w0_hat.dtype)
    region = batch.region if batch.region is not None else aux_region(batch.mask)
    x_hat = idwt2(w0_hat)
    x = idwt2(batch.w0)
    return {
        "wavelet": loss_wavelet(w0_hat, batch.w0, W.to(w0_hat.dtype)),
        "ll": loss_ll_moments(w0_hat, batch.w0, weights.lam_mu, weights.lam_sigma),
        "hf": loss_hf_variance(w0_hat, batch.w0, weights.lam_hf),
        "aux": loss_aux(x_hat, x, batch.mask, weights.lam_edge, weights.lam_sat, region=region),
    }


def total_loss(model: Denoiser, batch: TrainBatch, params=None, weights: LossWeights = LossWeights()) -> torch.Tensor:
    w0_hat = denoise(model, batch.w_t, batch.t, batch.cond, params)
    terms = loss_terms(w0_hat, batch, weights)
    return terms["wavelet"] + terms["ll"] + terms["hf"] + terms["aux"]


# ---------------------------------------------------------------------------
# guidance and sampling


def combine_guidance(w_uncond, w_mask, w_full, s_mask: float, s_nei: float):
    """``u + s_mask (m - u) + s_nei (mn - m)``.

    The mask term is pivoted on whichever branch ``s_mask`` is nearer:
    ``u + s_mask (m - u)`` for ``s_mask <= 0.5``, else ``m + (1 - s_mask)(u - m)``.
    Both are the same polynomial; the pivot keeps the correction coefficient
    small and makes the ``(0, 0)`` and ``(1, 0)`` reductions and equal-branch
    telescoping bit-exact.  float32 branches are combined in float64 and rounded
    once.
    """
    dtype = w_uncond.dtype
    u, m, mn = (a.to(torch.float64) if dtype == torch.float32 else a for a in (w_uncond, w_mask, w_full))
    if s_mask <= 0.5:
        base = u + s_mask * (m - u)
    else:
        base = m + (1.0 - s_mask) * (u - m)
    out = base + s_nei * (mn - m)
    return out.to(dtype)


def _guidance_conds(cond: torch.Tensor) -> torch.Tensor:
    uncond = torch.zeros_like(cond)
    mask_only = cond.clone()
    mask_only[:, 1:] = 0
    return torch.cat([uncond, mask_only, cond], dim=0)


def guided_denoise(model: Denoiser, w_t, t: int, cond, scales: GuidanceScales, T: int, params=None):
    """Three-branch (unconditional, mask, mask+neighbors) guided estimate of ``w0``."""
    w_t = torch.as_tensor(w_t)
    squeeze = w_t.ndim == 3
    if squeeze:
        w_t = w_t[None]
    cond = torch.as_tensor(cond.channels if isinstance(cond, CondStack) else cond, dtype=w_t.dtype)
    if cond.ndim == 3:
        cond = cond[None]
    n = w_t.shape[0]
    out = denoise(model, w_t.repeat(3, 1, 1, 1), torch.full((3 * n,), t), _guidance_conds(cond), params)
    u, m, mn = out[:n], out[n:2 * n], out[2 * n:]
    g = combine_guidance(u, m, mn, scales.s_mask, scales.s_nei(t, T))
    return g[0] if squeeze else g


@torch.no_grad()
def sample_slices(model: Denoiser, masks, neighbors, sched: NoiseSchedule, scales: GuidanceScales = GuidanceScales(),
                  steps: int = 50, seed: int = 0, params=None, eta: float = 0.0,
                  neighbor_bands=None, batch_size: int = 64) -> np.ndarray:
    """Sample ``(N, H, W)`` slices for ``N`` masks with per-item neighbor slices ``(N, S, H, W)``."""
    if params is not None and not tree_allfinite(params):
        raise SamplingError("denoiser parameters contain non-finite values")
    if params is None and not tree_allfinite(param_tree(model)):
        raise SamplingError("denoiser parameters contain non-finite values")
    masks = np.asarray(masks)
    neighbors = np.asarray(neighbors)
    if masks.ndim == 2:
        masks, neighbors = masks[None], neighbors[None]
    bands = neighbor_bands if neighbor_bands is not None else model.cfg.neighbor_bands
    dtype = next(model.parameters()).dtype
    ts = strided_timesteps(sched.T, steps)
    gen = torch.Generator().manual_seed(seed)
    n, H, W = masks.shape
    conds = torch.as_tensor(
        np.stack([build_condition(masks[i], list(neighbors[i]), neighbor_bands=bands).channels for i in range(n)]),
        dtype=dtype,
    )
    w = torch.randn((n, 4, H // 2, W // 2), generator=gen, dtype=torch.float64).to(dtype)
    w0_hat = w
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        w0_hat = torch.cat([
            guided_denoise(model, w[j:j + batch_size], t, conds[j:j + batch_size], scales, sched.T, params)
            for j in range(0, n, batch_size)
        ])
        noise = torch.randn(w.shape, generator=gen, dtype=torch.float64).to(dtype) if eta > 0 else None
        w = reverse_step(w, w0_hat, t, sched, eta=eta, noise=noise, t_prev=t_prev)
    if not bool(torch.isfinite(w0_hat).all()):
        raise SamplingError("sampler produced non-finite coefficients")
    x = idwt2(w0_hat.clamp(-3, 3)).clamp(-1, 1)
    return x.double().numpy()


def sample_slice(model: Denoiser, mask, neighbors, scales: GuidanceScales = GuidanceScales(), steps: int = 50,
                 seed: int = 0, sched: NoiseSchedule | None = None, params=None, eta: float = 0.0) -> np.ndarray:
    sched = sched or cosine_schedule(200)
    return sample_slices(model, np.asarray(mask)[None], np.asarray(neighbors)[None], sched, scales,
                         steps, seed, params, eta)[0]


# ---------------------------------------------------------------------------
# training


@dataclass
class SliceSet:
    """Training slices with their masks and axial neighbors, all full resolution."""

    x: np.ndarray  # (N, H, W)
    mask: np.ndarray  # (N, H, W) uint8
    neighbors: np.ndarray  # (N, S, H, W)

    def __len__(self):
        return len(self.x)

    @classmethod
    def from_volumes(cls, volumes, masks, offsets=(-1, 1)) -> "SliceSet":
        xs, ms, ns = [], [], []
        for vol, m in zip(volumes, masks):
            for z in range(vol.shape[0]):
                xs.append(vol[z])
                ms.append(m[z])
                ns.append(np.stack(neighbor_slices(vol, z, offsets)))
        return cls(np.stack(xs), np.stack(ms).astype(np.uint8), np.stack(ns))


@dataclass
class DiffusionTrainConfig:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.01
    ema_decay: float = 0.995
    T: int = 200
    p_drop_all: float = 0.1
    p_drop_neighbors: float = 0.1
    log_every: int = 250


def dropout_plan(n: int, p_all: float, p_nei: float, rng: np.random.Generator) -> np.ndarray:
    """Per-sample condition-dropout codes for one epoch: 0 keep, 1 drop neighbors, 2 drop all.

    Counts are ``round(p * n)`` exactly; positions are a random permutation.
    """
    n_all = int(round(p_all * n))
    n_nei = int(round(p_nei * n))
    if n_all + n_nei > n:
        raise ConfigError("dropout probabilities sum above 1")
    codes = np.zeros(n, dtype=np.int8)
    codes[:n_all] = 2
    codes[n_all:n_all + n_nei] = 1
    return codes[rng.permutation(n)]


@dataclass
class PreparedSlices:
    w0: torch.Tensor
    cond: torch.Tensor
    weight_map: torch.Tensor
    mask: np.ndarray
    region: np.ndarray


def prepare_slices(data: SliceSet, cfg: DenoiserConfig, weights: LossWeights, dtype=torch.float32) -> PreparedSlices:
    conds = np.stack([
        build_condition(data.mask[i], list(data.neighbors[i]), neighbor_bands=cfg.neighbor_bands).channels
        for i in range(len(data))
    ])
    return PreparedSlices(
        w0=torch.as_tensor(dwt2(data.x.astype(np.float64)), dtype=dtype),
        cond=torch.as_tensor(conds, dtype=dtype),
        weight_map=torch.as_tensor(batch_weight_map(data.mask, weights), dtype=dtype),
        mask=data.mask,
        region=np.stack([aux_region(m) for m in data.mask]),
    )


def make_batch(prep: PreparedSlices, idx: np.ndarray, codes: np.ndarray, sched: NoiseSchedule,
               gen: torch.Generator, rng: np.random.Generator) -> TrainBatch:
    cond = prep.cond[idx].clone()
    cond[torch.as_tensor(codes == 1), 1:] = 0
    cond[torch.as_tensor(codes == 2)] = 0
    w0 = prep.w0[idx]
    t = torch.as_tensor(rng.integers(1, sched.T + 1, size=len(idx)))
    eps = torch.randn(w0.shape, generator=gen, dtype=torch.float64).to(w0.dtype)
    w_t = forward_sample_batch(w0, t, eps, sched)
    return TrainBatch(w_t=w_t, t=t, cond=cond, w0=w0, mask=prep.mask[idx],
                      weight_map=prep.weight_map[idx], region=prep.region[idx])


@dataclass
class TrainResult:
    params: dict
    ema: dict
    history: list = field(default_factory=list)
    dropout_counts: dict = field(default_factory=dict)


def train_diffusion(model: Denoiser, data: SliceSet, cfg: DiffusionTrainConfig = DiffusionTrainConfig(),
                    weights: LossWeights = LossWeights(), seed: int = 0) -> TrainResult:
    """AdamW + cosine decay + EMA training with stratified condition dropout per epoch."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    sched = cosine_schedule(cfg.T)
    dtype = next(model.parameters()).dtype
    prep = prepare_slices(data, model.cfg, weights, dtype)
    trainer = Trainer(model, lr=cfg.lr, total_steps=cfg.steps, weight_decay=cfg.weight_decay, ema_decay=cfg.ema_decay)
    n = len(data)
    order = np.empty(0, dtype=int)
    codes = np.empty(0, dtype=np.int8)
    counts = {"keep": 0, "drop_neighbors": 0, "drop_all": 0}
    history = []
    running = 0.0
    for step in range(cfg.steps):
        if len(order) < cfg.batch_size:
            order = np.concatenate([order, rng.permutation(n)])
            codes = np.concatenate([codes, dropout_plan(n, cfg.p_drop_all, cfg.p_drop_neighbors, rng)])
        idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
        code, codes = codes[:cfg.batch_size], codes[cfg.batch_size:]
        for c, key in zip((0, 1, 2), ("keep", "drop_neighbors", "drop_all")):
            counts[key] += int((code == c).sum())
        batch = make_batch(prep, idx, code, sched, gen, rng)
        loss = total_loss(model, batch, None, weights)
        loss.backward()
        trainer.step()
        running += float(loss.detach())
        if (step + 1) % cfg.log_every == 0:
            history.append({"step": step + 1, "loss": running / cfg.log_every, "lr": trainer.state.lr})
            log.info("diffusion step %d loss %.5f", step + 1, running / cfg.log_every)
            running = 0.0
    return TrainResult(params=param_tree(model), ema=trainer.ema, history=history, dropout_counts=counts)
