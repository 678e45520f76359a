"""3D variational autoencoder over binary lesion-mask volumes."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch import nn
from torch.func import functional_call

from .diffusion import Trainer, param_tree, tree_allfinite
from .errors import DimensionError, GenerationError, PlacementError, TrainingError, ValidationError
from .phantoms import MaskVolume, placement_box

log = logging.getLogger(__name__)

CANONICAL_SIZE = (16, 32, 32)
LOGVAR_CLAMP = 10.0
_CUBE = np.ones((3, 3, 3), dtype=bool)


@dataclass(frozen=True)
class VAEConfig:
    latent_dim: int = 32
    size: tuple[int, int, int] = CANONICAL_SIZE
    channels: tuple[int, int, int] = (16, 32, 64)
    lam_kl: float = 1.0
    free_bits: float = 0.05
    lam_bnd: float = 0.05  # pairs with the voxel-summed BCE below


@dataclass
class LatentCode:
    mu: torch.Tensor
    log_var: torch.Tensor
    sample: torch.Tensor
    xi: torch.Tensor


class MaskVAE(nn.Module):
    def __init__(self, cfg: VAEConfig = VAEConfig()):
        super().__init__()
        self.cfg = cfg
        c1, c2, c3 = cfg.channels
        z, h, w = cfg.size
        self.feat_shape = (c3, z // 8, h // 8, w // 8)
        flat = int(np.prod(self.feat_shape))
        self.enc = nn.Sequential(
            nn.Conv3d(1, c1, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv3d(c1, c2, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv3d(c2, c3, 3, stride=2, padding=1), nn.SiLU(),
        )
        self.to_stats = nn.Linear(flat, 2 * cfg.latent_dim)
        self.from_latent = nn.Linear(cfg.latent_dim, flat)
        self.dec = nn.Sequential(
            nn.SiLU(),
            nn.ConvTranspose3d(c3, c2, 4, stride=2, padding=1), nn.SiLU(),
            nn.ConvTranspose3d(c2, c1, 4, stride=2, padding=1), nn.SiLU(),
            nn.ConvTranspose3d(c1, 1, 4, stride=2, padding=1),
        )

    def encode_stats(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.enc(x[:, None]).flatten(1)
        mu, log_var = self.to_stats(h).chunk(2, dim=1)
        return mu, log_var.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)

    def decode_logits(self, z: torch.Tensor) -> torch.Tensor:
        h = self.from_latent(z).reshape(-1, *self.feat_shape)
        return self.dec(h)[:, 0]

    def forward(self, x: torch.Tensor, xi: torch.Tensor | None = None, mode: str = "full"):
        if mode == "encode":
            return self.encode_stats(x)
        if mode == "decode":
            return self.decode_logits(x)
        mu, log_var = self.encode_stats(x)
        z = mu + torch.exp(0.5 * log_var) * xi
        return torch.sigmoid(self.decode_logits(z)), mu, log_var


def build_vae(cfg: VAEConfig = VAEConfig(), seed: int = 0, dtype=torch.float32) -> MaskVAE:
    torch.manual_seed(seed)
    return MaskVAE(cfg).to(dtype)


def _call(model: MaskVAE, params, mode: str, *args):
    if params is None:
        return model(*args, mode=mode)
    return functional_call(model, params, args, {"mode": mode})


def _volume_tensor(vol, model: MaskVAE) -> torch.Tensor:
    data = vol.data if isinstance(vol, MaskVolume) else vol
    x = torch.as_tensor(np.asarray(data), dtype=next(model.parameters()).dtype)
    if x.ndim == 3:
        x = x[None]
    if tuple(x.shape[1:]) != tuple(model.cfg.size):
        raise DimensionError(f"mask volume shape {tuple(x.shape[1:])} != canonical {model.cfg.size}")
    return x


def encode(model: MaskVAE, vol, params=None, xi: torch.Tensor | None = None, seed: int = 0) -> LatentCode:
    x = _volume_tensor(vol, model)
    mu, log_var = _call(model, params, "encode", x)
    if xi is None:
        xi = torch.randn(mu.shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64).to(mu.dtype)
    sample = mu + torch.exp(0.5 * log_var) * xi
    return LatentCode(mu, log_var, sample, xi)


def decode(model: MaskVAE, z, params=None) -> torch.Tensor:
    z = torch.as_tensor(z, dtype=next(model.parameters()).dtype)
    squeeze = z.ndim == 1
    if z.shape[-1] != model.cfg.latent_dim:
        raise ValidationError(f"latent size {z.shape[-1]} != {model.cfg.latent_dim}")
    probs = torch.sigmoid(_call(model, params, "decode", z[None] if squeeze else z))
    return probs[0] if squeeze else probs


def boundary_weights(target: np.ndarray) -> np.ndarray:
    """``1 + 4 * morphological_gradient`` per volume (3x3x3 cube, zero outside)."""
    t = np.asarray(target).astype(bool)
    if t.ndim == 3:
        t = t[None]
    out = np.empty(t.shape, dtype=np.float64)
    for i, v in enumerate(t):
        grad = ndimage.binary_dilation(v, _CUBE, border_value=0) & ~ndimage.binary_erosion(v, _CUBE, border_value=0)
        out[i] = 1.0 + 4.0 * grad
    return out


def soft_dice(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    inter = (pred * target).flatten(1).sum(1)
    denom = pred.flatten(1).sum(1) + target.flatten(1).sum(1)
    return 2 * inter / denom.clamp_min(1e-6)


def kl_per_dim(mu: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    return 0.5 * (mu ** 2 + torch.exp(log_var) - log_var - 1)


def vae_loss_terms(pred, target, code: LatentCode, lam_kl: float = 1.0, fb: float = 0.05, lam_bnd: float = 1.0,
                   weights=None) -> dict[str, torch.Tensor]:
    pred = torch.as_tensor(pred)
    if pred.ndim == 3:
        pred = pred[None]
    tgt_np = target.data if isinstance(target, MaskVolume) else np.asarray(target)
    tgt = torch.as_tensor(tgt_np, dtype=pred.dtype)
    if tgt.ndim == 3:
        tgt = tgt[None]
    if tgt.shape != pred.shape:
        raise DimensionError(f"prediction {tuple(pred.shape)} and target {tuple(tgt.shape)} differ")
    if weights is None:
        weights = boundary_weights(tgt_np)
    w = torch.as_tensor(weights, dtype=pred.dtype).reshape(pred.shape)
    p = pred.clamp(1e-7, 1 - 1e-7)
    bce = -(tgt * torch.log(p) + (1 - tgt) * torch.log(1 - p))
    mu, log_var = code.mu, code.log_var
    if mu.ndim == 1:
        mu, log_var = mu[None], log_var[None]
    kl = torch.clamp(kl_per_dim(mu, log_var), min=fb).sum(1)
    return {
        "dice": (1 - soft_dice(pred, tgt)).mean(),
        "bce": lam_bnd * (w * bce).flatten(1).sum(1).mean(),
        "kl": lam_kl * kl.mean(),
    }


def vae_loss(pred, target, code: LatentCode, lam_kl: float = 1.0, fb: float = 0.05, lam_bnd: float = 1.0,
             weights=None) -> torch.Tensor:
    """Soft-Dice + boundary-weighted BCE + free-bits KL (each latent dim clamped below at ``fb``)."""
    terms = vae_loss_terms(pred, target, code, lam_kl, fb, lam_bnd, weights)
    return terms["dice"] + terms["bce"] + terms["kl"]


# ---------------------------------------------------------------------------
# data preparation


def lesion_mask_volume(mask: np.ndarray, size=CANONICAL_SIZE) -> MaskVolume:
    """Center a subject's lesion in a canonical window at native resolution.

    The window is cropped/zero-padded around the bounding-box center of the
    positive voxels; voxels falling outside the window are dropped.
    """
    m = np.asarray(mask).astype(np.uint8)
    pos = np.argwhere(m)
    if len(pos) == 0:
        raise ValidationError("lesion mask volume is empty")
    center = (pos.min(0) + pos.max(0)) // 2
    out = np.zeros(size, dtype=np.uint8)
    src, dst = [], []
    for c, n_src, n_dst in zip(center, m.shape, size):
        start = int(c) - n_dst // 2
        s0, s1 = max(start, 0), min(start + n_dst, n_src)
        src.append(slice(s0, s1))
        dst.append(slice(s0 - start, s1 - start))
    out[tuple(dst)] = m[tuple(src)]
    return MaskVolume(out, provenance="real")


# ---------------------------------------------------------------------------
# training and sampling


@dataclass
class VAETrainConfig:
    steps: int = 1500
    batch_size: int = 16
    lr: float = 2e-3
    weight_decay: float = 0.01
    ema_decay: float | None = None
    log_every: int = 100


@dataclass
class VAETrainResult:
    params: dict
    history: list = field(default_factory=list)
    min_kl_term: float = float("inf")


def train_vae(model: MaskVAE, volumes: list[MaskVolume], cfg: VAETrainConfig = VAETrainConfig(),
              seed: int = 0) -> VAETrainResult:
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    dtype = next(model.parameters()).dtype
    data = np.stack([v.data for v in volumes])
    x_all = torch.as_tensor(data, dtype=dtype)
    w_all = torch.as_tensor(boundary_weights(data), dtype=dtype)
    trainer = Trainer(model, lr=cfg.lr, total_steps=cfg.steps, weight_decay=cfg.weight_decay, ema_decay=cfg.ema_decay)
    mc = model.cfg
    floor = mc.latent_dim * mc.free_bits * mc.lam_kl
    result = VAETrainResult(params={})
    order = np.empty(0, dtype=int)
    for step in range(cfg.steps):
        if len(order) < cfg.batch_size:
            order = np.concatenate([order, rng.permutation(len(data))])
        idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
        x = x_all[idx]
        xi = torch.randn((len(idx), mc.latent_dim), generator=gen, dtype=torch.float64).to(dtype)
        pred, mu, log_var = model(x, xi)
        code = LatentCode(mu, log_var, mu + torch.exp(0.5 * log_var) * xi, xi)
        terms = vae_loss_terms(pred, data[idx], code, mc.lam_kl, mc.free_bits, mc.lam_bnd, weights=w_all[idx])
        loss = terms["dice"] + terms["bce"] + terms["kl"]
        if not torch.isfinite(loss):
            raise TrainingError(f"VAE loss became non-finite at step {step}")
        kl_term = float(terms["kl"].detach())
        result.min_kl_term = min(result.min_kl_term, kl_term)
        if kl_term < floor - 1e-5:
            raise TrainingError(f"free-bits floor violated: KL term {kl_term} < {floor}")
        loss.backward()
        trainer.step()
        if (step + 1) % cfg.log_every == 0:
            result.history.append({"step": step + 1, "dice": float(terms["dice"].detach()), "bce": float(terms["bce"].detach()),
                                   "kl": kl_term})
            log.info("vae step %d dice %.4f bce %.4f kl %.3f", step + 1, *(result.history[-1][k]
                                                                         for k in ("dice", "bce", "kl")))
    result.params = trainer.ema if trainer.ema is not None else param_tree(model)
    return result


def hard_dice(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a).astype(bool), np.asarray(b).astype(bool)
    denom = a.sum() + b.sum()
    return 1.0 if denom == 0 else 2.0 * float((a & b).sum()) / float(denom)


@torch.no_grad()
def reconstruct(model: MaskVAE, volumes, params=None) -> np.ndarray:
    """Binarized ``decode(mu)`` for each volume."""
    x = torch.cat([_volume_tensor(v, model) for v in volumes])
    mu, _ = _call(model, params, "encode", x)
    return (decode(model, mu, params) > 0.5).numpy().astype(np.uint8)


@torch.no_grad()
def sample_masks(model: MaskVAE, n: int, seed: int = 0, params=None, max_retries: int = 10) -> list[MaskVolume]:
    """Decode prior samples, rejecting empty volumes (up to ``max_retries`` redraws each)."""
    if params is not None and not tree_allfinite(params):
        raise GenerationError("VAE parameters contain non-finite values")
    gen = torch.Generator().manual_seed(seed)
    dtype = next(model.parameters()).dtype
    out = []
    for i in range(n):
        for _ in range(max_retries + 1):
            z = torch.randn(model.cfg.latent_dim, generator=gen, dtype=torch.float64).to(dtype)
            vol = (decode(model, z, params) > 0.5).numpy().astype(np.uint8)
            if vol.any():
                out.append(MaskVolume(vol, provenance="vae-sampled"))
                break
        else:
            raise GenerationError(f"mask {i}: {max_retries + 1} consecutive empty decodes; VAE looks undertrained")
    return out


def slice_conditioning_masks(vol: MaskVolume, target_hw: tuple[int, int], placement=None, seed: int = 0,
                             scale: int | None = None) -> list[tuple[int, np.ndarray]]:
    """Project a mask volume into full-size 2D conditioning masks.

    Nonempty axial slices are nearest-neighbor upsampled by ``scale`` (default
    ``H // 64``, at least 1) and pasted, with one shared seeded offset, inside the
    placement box ``(row0, row1, col0, col1)``.
    """
    H, W = target_hw
    if H % 2 or W % 2:
        raise ValidationError(f"target size must be even, got {target_hw}")
    box = placement if placement is not None else placement_box(H, W)
    r0, r1, c0, c1 = box
    k = scale if scale is not None else max(1, H // 64)
    data = vol.data.astype(np.uint8)
    zs = [z for z in range(data.shape[0]) if data[z].any()]
    if not zs:
        return []
    up = data.repeat(k, axis=1).repeat(k, axis=2)
    pos = np.argwhere(up[zs].any(0))
    (y0, x0), (y1, x1) = pos.min(0), pos.max(0) + 1
    bh, bw = y1 - y0, x1 - x0
    if bh > r1 - r0 or bw > c1 - c0:
        raise PlacementError(f"mask footprint {bh}x{bw} exceeds placement region {r1 - r0}x{c1 - c0}")
    rng = np.random.default_rng(seed)
    r = int(rng.integers(r0, r1 - bh + 1))
    c = int(rng.integers(c0, c1 - bw + 1))
    out = []
    for z in zs:
        m = np.zeros((H, W), dtype=np.uint8)
        m[r:r + bh, c:c + bw] = up[z, y0:y1, x0:x1]
        out.append((z, m))
    return out
