"""Mask-guided slice detector, subject aggregation, ranking metrics and the dose-response sweep."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from fractions import Fraction
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.func import functional_call

from .diffusion import Trainer, param_tree
from .errors import ConfigError, DimensionError, ValidationError
from .phantoms import PairedSample, PhantomSubject, TVR_BAND_NAMES, gen_cohort

log = logging.getLogger(__name__)

FOCAL_CLAMP = 1e-7


@dataclass(frozen=True)
class DetectorConfig:
    blocks: int = 3
    base_channels: int = 16
    mga: bool = True
    mask_guided: bool = True
    lam_attn: float = 0.5
    alpha: float = 0.25
    gamma: float = 2.0
    epochs: int = 4
    batch_size: int = 32
    lr: float = 2e-3
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.blocks < 2:
            raise ConfigError("detector needs at least 2 conv blocks (attention sits after the second)")
        if self.lam_attn < 0 or self.alpha < 0 or self.gamma < 0:
            raise ConfigError("lam_attn, alpha and gamma must be nonnegative")


class SliceDetector(nn.Module):
    """Small CNN with one mask-guided attention block at stride 4."""

    def __init__(self, cfg: DetectorConfig = DetectorConfig()):
        super().__init__()
        self.cfg = cfg
        chans = [cfg.base_channels * 2 ** i for i in range(cfg.blocks)]
        blocks, cin = [], 1
        for c in chans:
            blocks.append(nn.Sequential(
                nn.Conv2d(cin, c, 3, padding=1), nn.SiLU(),
                nn.Conv2d(c, c, 3, stride=2, padding=1), nn.SiLU(),
            ))
            cin = c
        self.blocks = nn.ModuleList(blocks)
        self.attn = nn.Conv2d(chans[1], 1, 1)
        self.head = nn.Linear(chans[-1], 1)

    @property
    def embed_dim(self) -> int:
        return self.cfg.base_channels * 2 ** (self.cfg.blocks - 1)

    def forward(self, x: torch.Tensor):
        h = x[:, None]
        attention = None
        for i, block in enumerate(self.blocks):
            h = block(h)
            if i == 1:
                attention = torch.sigmoid(self.attn(h))
                if self.cfg.mga:
                    h = h * (1 + attention)
        emb = h.mean(dim=(2, 3))
        return self.head(emb)[:, 0], attention[:, 0], emb


def build_detector(cfg: DetectorConfig = DetectorConfig(), dtype=torch.float32) -> SliceDetector:
    torch.manual_seed(cfg.seed)
    return SliceDetector(cfg).to(dtype)


def mga_forward(model: SliceDetector, slices, params=None):
    """Return ``(logits, attention, embeddings)`` for ``(N, H, W)`` or a single ``(H, W)`` slice."""
    x = torch.as_tensor(np.asarray(slices) if not isinstance(slices, torch.Tensor) else slices,
                        dtype=next(model.parameters()).dtype)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.ndim != 3 or x.shape[-1] % 4 or x.shape[-2] % 4:
        raise DimensionError(f"detector expects (N, H, W) slices with H, W divisible by 4, got {tuple(x.shape)}")
    out = model(x) if params is None else functional_call(model, params, (x,))
    if squeeze:
        return tuple(o[0] for o in out)
    return out


def focal_loss(p, y, alpha: float = 0.25, gamma: float = 2.0):
    """Binary focal loss on probabilities; ``p`` is clamped to [1e-7, 1 - 1e-7]."""
    p = torch.as_tensor(p, dtype=torch.float64) if not isinstance(p, torch.Tensor) else p
    y = torch.as_tensor(y, dtype=p.dtype)
    p = p.clamp(FOCAL_CLAMP, 1 - FOCAL_CLAMP)
    pos = -alpha * (1 - p) ** gamma * torch.log(p)
    neg = -(1 - alpha) * p ** gamma * torch.log(1 - p)
    return torch.where(y > 0.5, pos, neg)


def resize_mask(mask, factor: int = 4) -> np.ndarray:
    """Max-pool ``(..., H, W)`` masks by ``factor``."""
    m = np.asarray(mask)
    h, w = m.shape[-2:]
    return m.reshape(*m.shape[:-2], h // factor, factor, w // factor, factor).max(axis=(-3, -1))


def attention_alignment_loss(attention, mask, lam_attn: float = 0.5, resized: bool = False):
    """``lam_attn * mean((attention - maxpool4(mask))**2)``."""
    a = attention if isinstance(attention, torch.Tensor) else torch.as_tensor(np.asarray(attention), dtype=torch.float64)
    target = np.asarray(mask) if resized else resize_mask(mask)
    t = torch.as_tensor(target, dtype=a.dtype)
    if tuple(t.shape) != tuple(a.shape):
        raise DimensionError(f"attention {tuple(a.shape)} vs resized mask {tuple(t.shape)}")
    return lam_attn * ((a - t) ** 2).mean()


def detector_loss(model: SliceDetector, x, y, masks, cfg: DetectorConfig, params=None, has_mask=None):
    logits, attention, _ = mga_forward(model, x, params)
    loss = focal_loss(torch.sigmoid(logits), torch.as_tensor(y, dtype=logits.dtype), cfg.alpha, cfg.gamma).mean()
    if cfg.mask_guided and cfg.lam_attn > 0:
        sel = np.ones(len(y), dtype=bool) if has_mask is None else np.asarray(has_mask, dtype=bool)
        if sel.any():
            target = torch.as_tensor(resize_mask(np.asarray(masks)[sel]), dtype=logits.dtype)
            loss = loss + cfg.lam_attn * ((attention[torch.as_tensor(sel)] - target) ** 2).mean()
    return loss


# ---------------------------------------------------------------------------
# training


def positive_slices(subjects: list[PhantomSubject]) -> tuple[np.ndarray, np.ndarray]:
    xs, ms = [], []
    for s in subjects:
        if s.label:
            for z in np.nonzero(s.mask.reshape(s.mask.shape[0], -1).any(1))[0]:
                xs.append(s.volume[z])
                ms.append(s.mask[z])
    if not xs:
        return np.empty((0, 0, 0), np.float32), np.empty((0, 0, 0), np.uint8)
    return np.stack(xs), np.stack(ms)


def negative_slices(subjects: list[PhantomSubject]) -> np.ndarray:
    return np.concatenate([s.volume for s in subjects if not s.label])


def epoch_composition(n_real_pos: int, dose: int) -> dict[str, int]:
    n_syn = dose * n_real_pos
    return {"real": n_real_pos, "synthetic": n_syn, "negative": n_real_pos + n_syn}


@dataclass
class DetectorResult:
    params: dict
    composition: dict
    history: list = field(default_factory=list)


def train_detector(real: list[PhantomSubject], synthetic: list[PairedSample], dose: int,
                   cfg: DetectorConfig = DetectorConfig()) -> DetectorResult:
    """Train on all real positive slices, ``dose`` x as many synthetic pairs and as many negatives as both."""
    if dose < 0 or int(dose) != dose:
        raise ConfigError(f"dose must be a nonnegative integer, got {dose}")
    pos_x, pos_m = positive_slices(real)
    neg_x = negative_slices(real)
    comp = epoch_composition(len(pos_x), int(dose))
    if len(synthetic) < comp["synthetic"]:
        raise ConfigError(f"synthetic pool has {len(synthetic)} pairs, dose {dose} needs {comp['synthetic']} "
                          f"(shortfall {comp['synthetic'] - len(synthetic)})")
    syn = [s for s in synthetic[:comp["synthetic"]]]
    syn_x = np.stack([s.slice for s in syn]).astype(np.float32) if syn else np.empty((0, *pos_x.shape[1:]), np.float32)
    syn_m = np.stack([s.mask for s in syn]).astype(np.uint8) if syn else np.empty((0, *pos_x.shape[1:]), np.uint8)
    model = build_detector(cfg)
    rng = np.random.default_rng(cfg.seed)
    n_epoch = comp["real"] + comp["synthetic"] + comp["negative"]
    steps_per_epoch = math.ceil(n_epoch / cfg.batch_size)
    trainer = Trainer(model, lr=cfg.lr, total_steps=cfg.epochs * steps_per_epoch, weight_decay=cfg.weight_decay)
    history = []
    zero_mask = np.zeros(pos_x.shape[1:], dtype=np.uint8)
    for epoch in range(cfg.epochs):
        replace = comp["negative"] > len(neg_x)
        neg_idx = rng.choice(len(neg_x), size=comp["negative"], replace=replace)
        x = np.concatenate([pos_x, syn_x, neg_x[neg_idx]])
        m = np.concatenate([pos_m, syn_m, np.broadcast_to(zero_mask, (len(neg_idx), *zero_mask.shape))])
        y = np.concatenate([np.ones(len(pos_x) + len(syn_x)), np.zeros(len(neg_idx))])
        order = rng.permutation(len(x))
        total = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            loss = detector_loss(model, x[idx], y[idx], m[idx], cfg)
            loss.backward()
            trainer.step()
            total += float(loss.detach()) * len(idx)
        history.append({"epoch": epoch + 1, "loss": total / len(x)})
    return DetectorResult(param_tree(model), comp, history)


# ---------------------------------------------------------------------------
# subject aggregation


def noisy_or_top3(slice_probs) -> float:
    p = np.sort(np.asarray(slice_probs, dtype=np.float64))[::-1][:3]
    return float(1.0 - np.prod(1.0 - p))


class GatedAttentionPool(nn.Module):
    """Gated attention pooling over per-slice feature vectors."""

    def __init__(self, dim: int, hidden: int = 32):
        super().__init__()
        self.v = nn.Linear(dim, hidden)
        self.u = nn.Linear(dim, hidden)
        self.w = nn.Linear(hidden, 1)
        self.head = nn.Linear(dim, 1)

    def weights(self, feats: torch.Tensor) -> torch.Tensor:
        score = self.w(torch.tanh(self.v(feats)) * torch.sigmoid(self.u(feats)))[..., 0]
        return torch.softmax(score, dim=-1)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        a = self.weights(feats)
        pooled = (a[..., None] * feats).sum(-2)
        return self.head(pooled)[..., 0]


def aggregate_subject(slice_probs, features=None, pool: GatedAttentionPool | None = None) -> float:
    """Subject probability: gated pooling when ``pool`` is given, else noisy-or over the top-3 slices."""
    probs = np.asarray(slice_probs, dtype=np.float64)
    if probs.size == 0:
        raise ValidationError("cannot aggregate an empty slice list")
    if pool is None:
        return noisy_or_top3(probs)
    with torch.no_grad():
        f = torch.as_tensor(np.asarray(features), dtype=next(pool.parameters()).dtype)
        return float(torch.sigmoid(pool(f)))


def _subject_features(model: SliceDetector, params, subjects: list[PhantomSubject]):
    vols = np.stack([s.volume for s in subjects])
    n, z = vols.shape[:2]
    with torch.no_grad():
        logits, _, emb = mga_forward(model, vols.reshape(n * z, *vols.shape[2:]), params)
    feats = torch.cat([emb, logits[:, None]], dim=1).reshape(n, z, -1)
    return torch.sigmoid(logits).reshape(n, z).double().numpy(), feats


def train_pool(feats: torch.Tensor, labels: np.ndarray, seed: int, steps: int = 300, lr: float = 5e-3) -> GatedAttentionPool:
    """Fit the pool on frozen slice features with class-balanced subject sampling."""
    torch.manual_seed(seed)
    pool = GatedAttentionPool(feats.shape[-1]).to(feats.dtype)
    trainer = Trainer(pool, lr=lr, total_steps=steps)
    y = torch.as_tensor(labels, dtype=feats.dtype)
    pos_w = 0.5 / max(float(y.sum()), 1.0)
    neg_w = 0.5 / max(float((1 - y).sum()), 1.0)
    w = torch.where(y > 0.5, pos_w, neg_w)
    for _ in range(steps):
        logits = pool(feats)
        loss = (w * F.binary_cross_entropy_with_logits(logits, y, reduction="none")).sum()
        loss.backward()
        trainer.step()
    return pool


def subject_scores(model: SliceDetector, params, subjects: list[PhantomSubject],
                   pool: GatedAttentionPool | None = None) -> np.ndarray:
    probs, feats = _subject_features(model, params, subjects)
    if pool is None:
        return np.array([noisy_or_top3(p) for p in probs])
    with torch.no_grad():
        return torch.sigmoid(pool(feats)).double().numpy()


# ---------------------------------------------------------------------------
# metrics


def _check_labels(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape or s.ndim != 1:
        raise ValidationError("scores and labels must be equal-length 1D sequences")
    if not np.isin(y, (0, 1)).all():
        raise ValidationError("labels must be 0/1")
    if y.sum() == 0 or y.sum() == len(y):
        raise ValidationError("metrics need at least one positive and one negative label")
    return s, y


def auroc(scores, labels) -> float:
    """Mann-Whitney statistic; tied positive/negative pairs count one half."""
    s, y = _check_labels(scores, labels)
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s), dtype=np.float64)
    s_sorted = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s_sorted[j + 1] == s_sorted[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Step-wise average precision over descending unique thresholds (tied scores form one group)."""
    s, y = _check_labels(scores, labels)
    n_pos = int(y.sum())
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    ap = Fraction(0)  # exact accumulation, rounded once
    tp = fp = 0
    i = 0
    while i < len(s):
        j = i
        while j < len(s) and s_sorted[j] == s_sorted[i]:
            j += 1
        d_tp = int(y_sorted[i:j].sum())
        tp += d_tp
        fp += (j - i) - d_tp
        if d_tp:
            ap += Fraction(d_tp * tp, n_pos * (tp + fp))
        i = j
    return float(ap)


# ---------------------------------------------------------------------------
# sweep


@dataclass(frozen=True)
class SweepConfig:
    seed_sizes: tuple[int, ...] = (25, 50)
    prevalences: tuple[float, ...] = (0.01, 0.02, 0.03, 0.04, 0.05)
    doses: tuple[int, ...] = (0, 1, 2, 4, 8, 10)
    mask_guided: bool = True
    repetitions: int = 1
    base_seed: int = 0
    negatives_per_positive: int = 4
    n_test: int = 200
    aggregator: str = "gated"
    contrast: float = 0.35

    def __post_init__(self):
        if any(d < 0 or int(d) != d for d in self.doses):
            raise ConfigError("doses must be nonnegative integers")
        if any(not 0 < p < 1 for p in self.prevalences):
            raise ConfigError("prevalences must lie in (0, 1)")
        if self.aggregator not in ("gated", "noisy_or"):
            raise ConfigError(f"unknown aggregator '{self.aggregator}'")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")


REPORT_HEADER = ("seed_size", "prevalence", "dose", "rep", "auprc", "auroc", "delta_auprc", "is_optimum")
REPORT_VERSION = 1


@dataclass(frozen=True)
class ReportRow:
    seed_size: int
    prevalence: float
    dose: int
    rep: int
    auprc: float
    auroc: float
    delta_auprc: float
    is_optimum: int


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.6f}"


def _r6(v: float) -> float:
    return float("nan") if math.isnan(v) else float(f"{v:.6f}")


@dataclass
class DoseResponseReport:
    rows: list[ReportRow]
    metadata: dict = field(default_factory=dict)
    version: int = REPORT_VERSION

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(REPORT_HEADER) + "\n")
        for r in self.rows:
            buf.write(",".join([str(r.seed_size), _fmt(r.prevalence), str(r.dose), str(r.rep), _fmt(r.auprc),
                                _fmt(r.auroc), _fmt(r.delta_auprc), str(r.is_optimum)]) + "\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "DoseResponseReport":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if tuple(header) != REPORT_HEADER:
            raise ValidationError(f"unexpected report header {header}")
        rows = [ReportRow(int(a), float(b), int(c), int(d), float(e), float(f), float(g), int(h))
                for a, b, c, d, e, f, g, h in reader]
        return cls(rows)

    def summary(self) -> list[dict]:
        """Mean/std over repetitions per (seed size, prevalence, dose) with one optimum per group."""
        cells: dict[tuple, list[ReportRow]] = {}
        for r in self.rows:
            cells.setdefault((r.seed_size, r.prevalence, r.dose), []).append(r)
        out = []
        for (seed, prev, dose), rs in sorted(cells.items()):
            a = np.array([r.auprc for r in rs])
            b = np.array([r.auroc for r in rs])
            d = np.array([r.delta_auprc for r in rs])
            ok = ~np.isnan(a)
            out.append({
                "seed_size": seed, "prevalence": prev, "dose": dose, "n_reps": int(ok.sum()),
                "auprc_mean": float(a[ok].mean()) if ok.any() else float("nan"),
                "auprc_std": float(a[ok].std()) if ok.any() else float("nan"),
                "auroc_mean": float(b[ok].mean()) if ok.any() else float("nan"),
                "auroc_std": float(b[ok].std()) if ok.any() else float("nan"),
                "delta_auprc_mean": float(d[ok].mean()) if ok.any() else float("nan"),
            })
        _mark_optimum(out, key=lambda c: (c["seed_size"], c["prevalence"]), value="auprc_mean")
        return out


def _mark_optimum(items: list[dict], key, value: str) -> None:
    groups: dict = {}
    for it in items:
        groups.setdefault(key(it), []).append(it)
    for members in groups.values():
        valid = [m for m in members if not math.isnan(m[value])]
        best = max(valid, key=lambda m: (m[value], -m["dose"])) if valid else None
        for m in members:
            m["is_optimum"] = int(m is best)


def _finalize_rows(cells: list[dict]) -> list[ReportRow]:
    by_group: dict = {}
    for c in cells:
        by_group.setdefault((c["seed_size"], c["prevalence"], c["rep"]), []).append(c)
    for members in by_group.values():
        base = next((m["auprc"] for m in members if m["dose"] == 0), float("nan"))
        for m in members:
            m["delta_auprc"] = m["auprc"] - base
    _mark_optimum(cells, key=lambda c: (c["seed_size"], c["prevalence"], c["rep"]), value="auprc")
    cells.sort(key=lambda c: (c["rep"], c["seed_size"], c["prevalence"], c["dose"]))
    return [ReportRow(c["seed_size"], _r6(c["prevalence"]), c["dose"], c["rep"], _r6(c["auprc"]), _r6(c["auroc"]),
                      _r6(c["delta_auprc"]), c["is_optimum"]) for c in cells]


def cell_seed(base_seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(base_seed), *map(int, keys)]).generate_state(1, dtype=np.uint32)[0])


def dose_response_sweep(sweep: SweepConfig, synthetic_pool: list[PairedSample],
                        detector: DetectorConfig = DetectorConfig(), shape=(12, 64, 64)) -> DoseResponseReport:
    """Train one detector per (rep, seed size, dose) and score it on each prevalence-controlled test cohort.

    Training cohorts and test cohorts are regenerated from derived seeds, so the
    report is a pure function of ``(sweep, pool, detector)``.
    """
    det_cfg = DetectorConfig(**{**asdict(detector), "mga": sweep.mask_guided, "mask_guided": sweep.mask_guided})
    cells = []
    failures = []
    for rep in range(sweep.repetitions):
        tests = {}
        for prev in sweep.prevalences:
            tests[prev] = gen_cohort(sweep.n_test, prev, cell_seed(sweep.base_seed, rep, 2, int(round(prev * 1e6))),
                                     contrast=sweep.contrast, split="test", shape=shape)
        for seed_size in sweep.seed_sizes:
            n_train = seed_size * (1 + sweep.negatives_per_positive)
            train = gen_cohort(n_train, seed_size / n_train, cell_seed(sweep.base_seed, rep, 1, seed_size),
                               contrast=sweep.contrast, split="train", shape=shape)
            labels = np.array([s.label for s in train.subjects])
            for dose in sweep.doses:
                seed = cell_seed(sweep.base_seed, rep, 3, seed_size, dose)
                perm = np.random.default_rng(seed).permutation(len(synthetic_pool))
                pool_draw = [synthetic_pool[i] for i in perm]
                try:
                    cfg = DetectorConfig(**{**asdict(det_cfg), "seed": seed})
                    res = train_detector(train.subjects, pool_draw, dose, cfg)
                    model = build_detector(cfg)
                    agg = None
                    if sweep.aggregator == "gated":
                        _, feats = _subject_features(model, res.params, train.subjects)
                        agg = train_pool(feats, labels, seed)
                    for prev in sweep.prevalences:
                        test = tests[prev]
                        y = np.array([s.label for s in test.subjects])
                        scores = subject_scores(model, res.params, test.subjects, agg)
                        cells.append({"seed_size": seed_size, "prevalence": prev, "dose": dose, "rep": rep,
                                      "auprc": auprc(scores, y), "auroc": auroc(scores, y)})
                    log.info("sweep rep %d seed %d dose %d done", rep, seed_size, dose)
                except Exception as exc:  # recorded, never silently dropped
                    failures.append({"rep": rep, "seed_size": seed_size, "dose": dose, "error": repr(exc)})
                    log.error("sweep cell rep %d seed %d dose %d failed: %r", rep, seed_size, dose, exc)
                    for prev in sweep.prevalences:
                        cells.append({"seed_size": seed_size, "prevalence": prev, "dose": dose, "rep": rep,
                                      "auprc": float("nan"), "auroc": float("nan")})
    report = DoseResponseReport(_finalize_rows(cells))
    report.metadata = {
        "format_version": REPORT_VERSION,
        "aggregator": sweep.aggregator,
        "checkpoint": "final",
        "mask_guided": sweep.mask_guided,
        "sweep": asdict(sweep),
        "detector": asdict(det_cfg),
        "failed_cells": failures,
    }
    report.metadata["findings"] = dose_findings(report)
    return report


def dose_findings(report: DoseResponseReport) -> dict:
    """Directional summary: does some dose > 0 beat dose 0 on mean AUPRC, and where is the optimum."""
    summary = report.summary()
    groups = {}
    for c in summary:
        groups.setdefault(f"seed={c['seed_size']},prev={c['prevalence']:.4f}", []).append(c)
    out = {}
    for name, cs in sorted(groups.items()):
        base = next((c["auprc_mean"] for c in cs if c["dose"] == 0), float("nan"))
        best = next((c for c in cs if c["is_optimum"]), None)
        out[name] = {
            "auprc_dose0": base,
            "optimum_dose": best["dose"] if best else None,
            "best_auprc": best["auprc_mean"] if best else float("nan"),
            "augmentation_beats_baseline": bool(best and best["dose"] > 0 and best["auprc_mean"] > base),
        }
    return out


def write_report(report: DoseResponseReport, csv_path, meta_path=None) -> None:
    with open(csv_path, "w", newline="\n") as fh:
        fh.write(report.to_csv())
    if meta_path is not None:
        doc = {"metadata": report.metadata, "summary": report.summary()}
        with open(meta_path, "w", newline="\n") as fh:
            fh.write(json.dumps(doc, sort_keys=True, indent=2, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(type(o))


def tvr_stratified_eval(model: SliceDetector, params, baseline_params, test: list[PhantomSubject],
                        pool=None, baseline_pool=None) -> dict[str, dict | None]:
    """Per TVR band: each band's positives pooled with all negatives, treatment minus baseline."""
    labels = np.array([s.label for s in test])
    bands = np.array([s.tvr_band if s.label else "" for s in test])
    treat = subject_scores(model, params, test, pool)
    base = subject_scores(model, baseline_params, test, baseline_pool)
    out: dict[str, dict | None] = {}
    for band in TVR_BAND_NAMES:
        sel = (labels == 0) | (bands == band)
        n_pos = int((bands == band).sum())
        if n_pos == 0 or not (labels == 0).any():
            out[band] = None
            continue
        y = labels[sel]
        t_pr, t_roc = auprc(treat[sel], y), auroc(treat[sel], y)
        b_pr, b_roc = auprc(base[sel], y), auroc(base[sel], y)
        out[band] = {"n_pos": n_pos, "auprc": t_pr, "auroc": t_roc, "baseline_auprc": b_pr, "baseline_auroc": b_roc,
                     "delta_auprc": t_pr - b_pr, "delta_auroc": t_roc - b_roc}
    return out
