"""Realism and frequency analytics: MS-SSIM, a wavelet-feature Frechet distance, band reports."""
from __future__ import annotations

import csv
import io

import numpy as np
from scipy import signal

from .errors import NumericalError, ValidationError
from .wavelet import LOG_EPS, dwt2

MS_SSIM_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
HIST_BINS = 64
FEATURE_DIM = 80


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_cs(a: np.ndarray, b: np.ndarray, window: np.ndarray, data_range: float, k1: float, k2: float):
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    def filt(x):
        return signal.convolve2d(x, window, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    s_aa = filt(a * a) - mu_a * mu_a
    s_bb = filt(b * b) - mu_b * mu_b
    s_ab = filt(a * b) - mu_a * mu_b
    cs = (2 * s_ab + c2) / (s_aa + s_bb + c2)
    lum = (2 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    return float((lum * cs).mean()), float(cs.mean())


def max_ms_ssim_scales(h: int, w: int, win: int = 11) -> int:
    n = 0
    while min(h, w) >= win * 2 ** n:
        n += 1
    return n


def ms_ssim(a, b, scales: int = 3, data_range: float = 2.0, k1: float = 0.01, k2: float = 0.03,
            win: int = 11, sigma: float = 1.5) -> float:
    """Multi-scale SSIM of two slices in [-1, 1] (shifted by +1 before scoring).

    Per-scale contrast terms (and the final SSIM) are clipped at zero before
    exponentiation so the product stays real.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValidationError(f"ms_ssim needs two equally shaped 2D images, got {a.shape} and {b.shape}")
    if not 1 <= scales <= len(MS_SSIM_WEIGHTS):
        raise ValidationError(f"scales must be in [1, {len(MS_SSIM_WEIGHTS)}]")
    if min(a.shape) < win * 2 ** (scales - 1):
        raise ValidationError(f"image {a.shape} too small for {scales} scales; "
                              f"maximum feasible is {max_ms_ssim_scales(*a.shape, win)}")
    weights = MS_SSIM_WEIGHTS[:scales] / MS_SSIM_WEIGHTS[:scales].sum()
    window = gaussian_window(win, sigma)
    x, y = a + 1.0, b + 1.0
    result = 1.0
    for j in range(scales):
        ssim, cs = _ssim_cs(x, y, window, data_range, k1, k2)
        term = ssim if j == scales - 1 else cs
        result *= max(term, 0.0) ** weights[j]
        if j < scales - 1:
            h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
            x = x[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
            y = y[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
    return float(result)


# ---------------------------------------------------------------------------
# Frechet proxy


def slice_features(x) -> np.ndarray:
    """80 features: mean and log-std of 4 bands over two Haar levels, plus the level-2 LL pooled to 8x8."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape
    if h % 32 or w % 32:
        raise ValidationError(f"feature extractor needs sides divisible by 32, got {x.shape}")
    c1 = dwt2(x)
    c2 = dwt2(c1[0])
    stats = []
    for c in (c1, c2):
        flat = c.reshape(4, -1)
        stats.append(flat.mean(1))
        stats.append(np.log(flat.std(1) + LOG_EPS))
    ll = c2[0]
    bh, bw = ll.shape[0] // 8, ll.shape[1] // 8
    grid = ll.reshape(8, bh, 8, bw).mean(axis=(1, 3))
    return np.concatenate([*stats, grid.ravel()])


def feature_matrix(slices) -> np.ndarray:
    return np.stack([slice_features(s) for s in slices])


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(feats_a, feats_b, reg: float = 1e-6) -> float:
    """Squared Frechet distance between Gaussian fits of two feature sets (rows are samples)."""
    fa = np.asarray(feats_a, dtype=np.float64)
    fb = np.asarray(feats_b, dtype=np.float64)
    if fa.ndim != 2 or fb.ndim != 2 or fa.shape[1] != fb.shape[1]:
        raise ValidationError(f"feature sets must be (n, d) with equal d, got {fa.shape} and {fb.shape}")
    d = fa.shape[1]
    if min(len(fa), len(fb)) < d + 1:
        raise ValidationError(f"need at least {d + 1} samples per set, got {len(fa)} and {len(fb)}")
    mu_a, mu_b = fa.mean(0), fb.mean(0)
    cov_a = np.cov(fa, rowvar=False) + reg * np.eye(d)
    cov_b = np.cov(fb, rowvar=False) + reg * np.eye(d)
    root_a = _psd_sqrt(cov_a)
    prod = root_a @ cov_b @ root_a
    vals = np.linalg.eigvalsh((prod + prod.T) / 2)
    if vals.min() < -1e-6:
        raise NumericalError(f"covariance product has eigenvalue {vals.min():.3e} < -1e-6")
    tr_sqrt = np.sqrt(np.clip(vals, 0, None)).sum()
    d2 = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_sqrt)
    return max(d2, 0.0)


def frechet_proxy(set_a, set_b) -> float:
    """Frechet distance over :func:`slice_features` (a wavelet-statistic stand-in for Inception features)."""
    if min(len(set_a), len(set_b)) < FEATURE_DIM + 1:
        raise ValidationError(f"frechet_proxy needs >= {FEATURE_DIM + 1} slices per set, "
                              f"got {len(set_a)} and {len(set_b)}")
    return frechet_distance(feature_matrix(set_a), feature_matrix(set_b))


# ---------------------------------------------------------------------------
# band report

BAND_REPORT_COLUMNS = (
    ["slice", "ll_std", "lh_var", "hl_var", "hh_var", "roi_pixels", "roi_empty"]
    + [f"hist_{i:02d}" for i in range(HIST_BINS)]
)
_NUMERIC = BAND_REPORT_COLUMNS[1:5]


def band_report(slices, masks=None) -> list[dict]:
    """Per-slice LL std, detail-band variances and a 64-bin ROI histogram, then ``mean`` and ``std`` rows."""
    xs = np.asarray(slices, dtype=np.float64)
    if xs.ndim == 2:
        xs = xs[None]
    if masks is not None:
        ms = np.asarray(masks)
        if ms.ndim == 2:
            ms = ms[None]
        if ms.shape != xs.shape:
            raise ValidationError(f"mask stack {ms.shape} does not match slices {xs.shape}")
    else:
        ms = np.zeros(xs.shape, dtype=np.uint8)
    rows = []
    for i, (x, m) in enumerate(zip(xs, ms)):
        c = dwt2(x).reshape(4, -1)
        c = c - c[:, :1]  # shift-invariant stats; constant bands give exact zeros
        roi = np.clip(x[m.astype(bool)], -1.0, 1.0)
        hist, _ = np.histogram(roi, bins=HIST_BINS, range=(-1.0, 1.0))
        row = {"slice": str(i), "ll_std": float(c[0].std()), "lh_var": float(c[1].var()),
               "hl_var": float(c[2].var()), "hh_var": float(c[3].var()), "roi_pixels": int(roi.size),
               "roi_empty": int(roi.size == 0)}
        row.update({f"hist_{k:02d}": int(v) for k, v in enumerate(hist)})
        rows.append(row)
    for name, fn in (("mean", np.mean), ("std", np.std)):
        agg = {"slice": name}
        for col in BAND_REPORT_COLUMNS[1:]:
            agg[col] = float(fn([r[col] for r in rows]))
        rows.append(agg)
    return rows


def _cell(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def band_report_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    buf.write(",".join(BAND_REPORT_COLUMNS) + "\n")
    for r in rows:
        buf.write(",".join(_cell(r[c]) for c in BAND_REPORT_COLUMNS) + "\n")
    return buf.getvalue()


def read_band_report(text: str) -> list[dict]:
    reader = csv.DictReader(io.StringIO(text))
    out = []
    for raw in reader:
        summary = raw["slice"] in ("mean", "std")
        row = {"slice": raw["slice"]}
        for col in BAND_REPORT_COLUMNS[1:]:
            if col in _NUMERIC or summary:
                row[col] = float(raw[col])
            else:
                row[col] = int(raw[col])
        out.append(row)
    return out


def ll_std_per_slice(slices) -> np.ndarray:
    xs = np.asarray(slices, dtype=np.float64)
    ll = dwt2(xs)[:, 0].reshape(len(xs), -1)
    return (ll - ll[:, :1]).std(axis=1)
