import numpy as np
import pytest
from scipy import linalg

from salient.errors import ValidationError
from salient.metrics import (
    BAND_REPORT_COLUMNS,
    FEATURE_DIM,
    band_report,
    band_report_csv,
    frechet_distance,
    frechet_proxy,
    ll_std_per_slice,
    max_ms_ssim_scales,
    ms_ssim,
    read_band_report,
    slice_features,
)
from salient.phantoms import gen_subject


@pytest.fixture(scope="module")
def phantom():
    s = gen_subject(21, True, "large")
    return s.volume[6].astype(np.float64)


def test_ms_ssim_identity_and_symmetry(phantom, rng):
    other = np.clip(phantom + rng.normal(0, 0.1, phantom.shape), -1, 1)
    assert abs(ms_ssim(phantom, phantom) - 1.0) < 1e-9
    assert abs(ms_ssim(phantom, other) - ms_ssim(other, phantom)) < 1e-9


def test_ms_ssim_monotone_in_noise(phantom, rng):
    noise = rng.normal(0, 1, phantom.shape)
    scores = [ms_ssim(phantom, phantom + s * noise) for s in (0.05, 0.1, 0.2)]
    assert scores[0] > scores[1] > scores[2]


def test_ms_ssim_scale_limits(phantom):
    assert max_ms_ssim_scales(64, 64) == 3
    with pytest.raises(ValidationError, match="maximum feasible is 3"):
        ms_ssim(phantom, phantom, scales=4)
    with pytest.raises(ValidationError):
        ms_ssim(phantom, phantom[:32])
    assert abs(ms_ssim(phantom[:11, :11], phantom[:11, :11], scales=1) - 1.0) < 1e-9


def test_ms_ssim_single_scale_matches_direct_formula(rng):
    # one scale with a window covering the whole image reduces to global SSIM over a Gaussian-weighted patch
    a = rng.uniform(-1, 1, (11, 11))
    b = rng.uniform(-1, 1, (11, 11))
    g = np.exp(-((np.arange(11) - 5) ** 2) / (2 * 1.5 ** 2))
    w = np.outer(g, g)
    w /= w.sum()
    x, y = a + 1, b + 1
    mx, my = (w * x).sum(), (w * y).sum()
    vx, vy = (w * x * x).sum() - mx ** 2, (w * y * y).sum() - my ** 2
    cxy = (w * x * y).sum() - mx * my
    c1, c2 = (0.01 * 2) ** 2, (0.03 * 2) ** 2
    expected = (2 * mx * my + c1) * (2 * cxy + c2) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
    assert abs(ms_ssim(a, b, scales=1) - max(expected, 0.0)) < 1e-12


def test_features_shape_and_determinism(phantom):
    f = slice_features(phantom)
    assert f.shape == (FEATURE_DIM,) and np.isfinite(f).all()
    assert np.array_equal(f, slice_features(phantom.copy()))
    with pytest.raises(ValidationError):
        slice_features(np.zeros((48, 64)))


def test_frechet_closed_form_mean_shift(rng):
    vals = []
    for _ in range(10):
        a = rng.normal(size=(2000, 2))
        b = rng.normal(size=(2000, 2))
        b[:, 0] += 1.0
        vals.append(frechet_distance(a, b))
    assert abs(np.mean(vals) - 1.0) < 0.1


def test_frechet_matches_scipy_sqrtm(rng):
    a = rng.normal(size=(300, 5)) @ rng.normal(size=(5, 5))
    b = rng.normal(size=(300, 5)) @ rng.normal(size=(5, 5)) + 0.3
    ca = np.cov(a, rowvar=False) + 1e-6 * np.eye(5)
    cb = np.cov(b, rowvar=False) + 1e-6 * np.eye(5)
    ref = ((a.mean(0) - b.mean(0)) ** 2).sum() + np.trace(ca + cb - 2 * linalg.sqrtm(ca @ cb).real)
    assert abs(frechet_distance(a, b) - ref) < 1e-6 * max(1.0, ref)


def test_frechet_identity_symmetry_validation(rng):
    a = rng.normal(size=(50, 3))
    b = rng.normal(size=(60, 3)) * 2
    assert frechet_distance(a, a) < 1e-6
    assert abs(frechet_distance(a, b) - frechet_distance(b, a)) < 1e-6
    assert frechet_distance(a, b) >= 0
    with pytest.raises(ValidationError):
        frechet_distance(a[:3], b)
    with pytest.raises(ValidationError):
        frechet_distance(a, b[:, :2])


def test_frechet_proxy_on_slices(rng):
    base = [gen_subject(i, False, shape=(1, 32, 32)).volume[0] for i in range(90)]
    assert frechet_proxy(base, base) < 1e-6
    noise = [rng.uniform(-1, 1, (32, 32)) for _ in range(90)]
    ab, ba = frechet_proxy(base, noise), frechet_proxy(noise, base)
    assert ab > 0 and abs(ab - ba) < 1e-6 * max(1.0, ab)
    with pytest.raises(ValidationError):
        frechet_proxy(base[:80], noise)


def test_band_report_constant_and_empty():
    rows = band_report(np.full((3, 16, 16), 0.25))
    per = rows[:-2]
    assert [r["slice"] for r in rows[-2:]] == ["mean", "std"]
    assert all(r["ll_std"] == 0 and r["lh_var"] == 0 for r in per)
    assert all(r["roi_empty"] == 1 and all(r[f"hist_{k:02d}"] == 0 for k in range(64)) for r in per)


def test_band_report_hist_conservation(rng):
    x = rng.uniform(-1, 1, (4, 16, 16))
    m = (rng.uniform(size=x.shape) > 0.6).astype(np.uint8)
    rows = band_report(x, m)
    for i, r in enumerate(rows[:-2]):
        assert sum(r[f"hist_{k:02d}"] for k in range(64)) == r["roi_pixels"] == m[i].sum()
        assert r["roi_empty"] == 0
    with pytest.raises(ValidationError):
        band_report(x, m[:, :8])


def test_band_report_csv_roundtrip(rng):
    x = rng.uniform(-1, 1, (3, 16, 16))
    m = (x > 0.5).astype(np.uint8)
    rows = band_report(x, m)
    text = band_report_csv(rows)
    assert text.splitlines()[0].split(",") == BAND_REPORT_COLUMNS
    back = read_band_report(text)
    assert back == rows
    assert band_report_csv(back) == text


def test_ll_std_matches_report(rng):
    x = rng.uniform(-1, 1, (3, 16, 16))
    rows = band_report(x)
    assert np.allclose(ll_std_per_slice(x), [r["ll_std"] for r in rows[:-2]], atol=1e-15)
