"""Glue between phantoms, the mask VAE, the denoiser and the detector."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .detection import SweepConfig, positive_slices
from .diffusion import cosine_schedule
from .errors import GenerationError, PlacementError
from .mask_vae import MaskVAE, lesion_mask_volume, sample_masks, slice_conditioning_masks
from .model import Denoiser, GuidanceScales, SliceSet, neighbor_slices, sample_slices
from .phantoms import MaskVolume, PairedSample, PhantomSubject, gen_cohort, gen_subject, pair_synthetic, subject_seed

log = logging.getLogger(__name__)


def positive_subjects(n: int, seed: int, contrast: float = 0.35, shape=(12, 64, 64), tvr_mix=(1.0, 1.0, 1.0)):
    """``n`` lesion-bearing subjects with TVR bands assigned round-robin by the mix."""
    bands = [b for b, w in zip(("small", "middle", "large"), tvr_mix) if w > 0]
    return [gen_subject(subject_seed(seed, i), True, bands[i % len(bands)], contrast, shape) for i in range(n)]


def training_slices(subjects: list[PhantomSubject], offsets=(-1, 1)) -> SliceSet:
    return SliceSet.from_volumes([s.volume for s in subjects], [s.mask for s in subjects], offsets)


def lesion_volumes(subjects: list[PhantomSubject], size=(16, 32, 32)) -> list[MaskVolume]:
    return [lesion_mask_volume(s.mask, size) for s in subjects if s.label]


@dataclass
class ConditioningPlan:
    masks: np.ndarray  # (N, H, W) uint8
    neighbors: np.ndarray  # (N, S, H, W)
    hosts: list[int]  # host subject index per item
    z: list[int]


def conditioning_plan(mask_vols: list[MaskVolume], hosts: list[PhantomSubject], n: int, seed: int = 0,
                      offsets=(-1, 1)) -> ConditioningPlan:
    """Place sampled lesion volumes into lesion-free host subjects, slice by slice, until ``n`` items.

    The canonical mask window is centered on the host's axial extent; mask slices
    that fall outside the host are dropped.  Volumes that do not fit the
    placement region are skipped.
    """
    if not hosts:
        raise GenerationError("conditioning needs at least one host subject")
    zs, H, W = hosts[0].volume.shape
    masks, neigh, host_ids, z_ids = [], [], [], []
    vi = 0
    while len(masks) < n:
        if vi >= len(mask_vols):
            raise GenerationError(f"ran out of mask volumes after {len(masks)} of {n} conditioning slices")
        vol = mask_vols[vi]
        h = vi % len(hosts)
        shift = (vol.data.shape[0] - zs) // 2
        try:
            placed = slice_conditioning_masks(vol, (H, W), seed=subject_seed(seed, vi))
        except PlacementError as exc:
            log.warning("mask volume %d skipped: %s", vi, exc)
            vi += 1
            continue
        for z, m in placed:
            zh = z - shift
            if not 0 <= zh < zs or len(masks) >= n:
                continue
            masks.append(m)
            neigh.append(np.stack(neighbor_slices(hosts[h].volume, zh, offsets)))
            host_ids.append(h)
            z_ids.append(zh)
        vi += 1
    return ConditioningPlan(np.stack(masks), np.stack(neigh), host_ids, z_ids)


def real_conditioning(subjects: list[PhantomSubject], n: int, offsets=(-1, 1)):
    """First ``n`` lesion slices of real subjects: ``(slices, masks, neighbors)``."""
    xs, ms, ns = [], [], []
    for s in subjects:
        for z in range(s.volume.shape[0]):
            if s.mask[z].any() and len(xs) < n:
                xs.append(s.volume[z])
                ms.append(s.mask[z])
                ns.append(np.stack(neighbor_slices(s.volume, z, offsets)))
    if len(xs) < n:
        raise GenerationError(f"only {len(xs)} lesion slices available, {n} requested")
    return np.stack(xs), np.stack(ms), np.stack(ns)


def synthesize_pairs(model: Denoiser, params, plan: ConditioningPlan, T: int = 200,
                     scales: GuidanceScales = GuidanceScales(), steps: int = 50, seed: int = 0) -> list[PairedSample]:
    x = sample_slices(model, plan.masks, plan.neighbors, cosine_schedule(T), scales, steps, seed, params)
    return [pair_synthetic(s.astype(np.float32), m) for s, m in zip(x, plan.masks)]


def required_pool_size(sweep: SweepConfig, shape=(12, 64, 64)) -> int:
    """Largest ``dose * positive slices`` over the sweep's training cohorts."""
    from .detection import cell_seed

    need = 0
    for rep in range(sweep.repetitions):
        for seed_size in sweep.seed_sizes:
            n_train = seed_size * (1 + sweep.negatives_per_positive)
            train = gen_cohort(n_train, seed_size / n_train, cell_seed(sweep.base_seed, rep, 1, seed_size),
                               contrast=sweep.contrast, split="train", shape=shape)
            need = max(need, max(sweep.doses) * len(positive_slices(train.subjects)[0]))
    return need


def build_synthetic_pool(denoiser: Denoiser, denoiser_params, vae: MaskVAE, vae_params, n: int, seed: int = 0,
                         shape=(12, 64, 64), T: int = 200, scales: GuidanceScales = GuidanceScales(),
                         steps: int = 20, contrast: float = 0.35) -> list[PairedSample]:
    """VAE masks placed into lesion-free hosts, then guided sampling: ``n`` paired positives."""
    if n == 0:
        return []
    n_hosts = max(8, n // 16)
    hosts = [gen_subject(subject_seed(seed + 1, i), False, contrast=contrast, shape=shape) for i in range(n_hosts)]
    # each mask volume yields several slices; oversample volumes so the plan never runs dry
    vols = sample_masks(vae, n, seed, vae_params)
    plan = conditioning_plan(vols, hosts, n, seed)
    return synthesize_pairs(denoiser, denoiser_params, plan, T, scales, steps, seed)
