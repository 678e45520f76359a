"""Procedural CT-like phantoms, cohort manifests and the SALV volume format."""
from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import FormatError, GenerationError, ValidationError

DEFAULT_SHAPE = (12, 64, 64)
DEFAULT_CONTRAST = 0.35
TVR_BANDS = {"small": (0.001, 0.003), "middle": (0.003, 0.01), "large": (0.01, 0.03)}
TVR_BAND_NAMES = tuple(TVR_BANDS)

# Placement box for lesions, in normalized coordinates (y down, x right, both in [-1, 1]).
_PLACEMENT_Y = (-0.42, 0.32)
_PLACEMENT_X = (-0.25, 0.25)


def placement_box(h: int, w: int) -> tuple[int, int, int, int]:
    """Mediastinal placement region as ``(row0, row1, col0, col1)``, half-open."""

    def to_px(v, n):
        return int(round((v + 1) / 2 * n))

    return to_px(_PLACEMENT_Y[0], h), to_px(_PLACEMENT_Y[1], h), to_px(_PLACEMENT_X[0], w), to_px(_PLACEMENT_X[1], w)


@dataclass
class MaskVolume:
    data: np.ndarray
    provenance: str = "real"

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValidationError(f"mask volume must be 3D, got shape {self.data.shape}")
        if not np.isin(self.data, (0, 1)).all():
            raise ValidationError("mask volume must be binary")
        self.data = self.data.astype(np.uint8)
        if self.provenance not in ("real", "vae-sampled"):
            raise ValidationError(f"unknown mask provenance '{self.provenance}'")


@dataclass
class PhantomSubject:
    volume: np.ndarray  # float32 (Z, H, W) in [-1, 1]
    mask: np.ndarray  # uint8 (Z, H, W)
    contrast: float = 0.0
    tvr_band: str | None = None
    seed: int | None = None
    label: int = field(init=False)
    tvr: float = field(init=False)

    def __post_init__(self):
        if self.volume.shape != self.mask.shape:
            raise ValidationError(f"volume {self.volume.shape} and mask {self.mask.shape} differ")
        self.mask = self.mask.astype(np.uint8)
        positives = int(self.mask.sum())
        self.label = int(positives > 0)
        self.tvr = positives / self.mask.size


# ---------------------------------------------------------------------------
# generation


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _background(rng: np.random.Generator, shape) -> np.ndarray:
    Z, H, W = shape
    yy, xx = np.meshgrid(np.linspace(-1, 1, H), np.linspace(-1, 1, W), indexing="ij")
    phase = rng.uniform(0, 2 * np.pi, size=6)
    amp = rng.uniform(0.01, 0.04, size=6)
    body_r = rng.uniform(0.82, 0.9), rng.uniform(0.68, 0.76)
    lung = rng.uniform(-0.7, -0.6), rng.uniform(-0.8, -0.72)
    med = rng.uniform(0.1, 0.2)
    vol = np.empty(shape, dtype=np.float64)
    for z in range(Z):
        d = amp * np.sin(2 * np.pi * z / (2.5 * Z) + phase)
        s = np.full((H, W), -1.0)
        s[_ellipse(yy, xx, 0.02 + d[0], 0.0, body_r[1] + d[1], body_r[0] + d[1])] = 0.0
        for side in (-1, 1):
            s[_ellipse(yy, xx, -0.05 + d[2], side * (0.55 + d[3]), 0.45 + d[4], 0.25)] = lung[0]
        s[_ellipse(yy, xx, -0.05, 0.0, 0.48 + d[4], 0.24 + d[5])] = med
        s[_ellipse(yy, xx, 0.58 + d[2], 0.0, 0.12, 0.12 + d[5])] = 0.7
        vol[z] = s
    body = vol > -0.95
    vol = ndimage.gaussian_filter(vol, sigma=(0.0, 0.8, 0.8))
    tex = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=(1.0, 1.2, 1.2))
    tex *= 0.04 / tex.std()
    vol += tex * body
    # lungs get a faint extra texture band
    vol += 0.5 * tex * (vol < lung[1] + 0.15)
    return vol


def _lesion_shape(rng: np.random.Generator, shape, box, target: int, lo: int, hi: int) -> np.ndarray:
    Z, H, W = shape
    r0, r1, c0, c1 = box
    n_blobs = int(rng.integers(2, 5))
    zc = rng.uniform(Z * 0.3, Z * 0.7)
    yc = rng.uniform(r0 + 0.35 * (r1 - r0), r1 - 0.35 * (r1 - r0))
    xc = rng.uniform(c0 + 0.4 * (c1 - c0), c1 - 0.4 * (c1 - c0))
    offs = rng.normal(0, 1.0, size=(n_blobs, 3)) * (0.6, 1.5, 1.2)
    radii = rng.uniform(0.6, 1.0, size=(n_blobs, 3)) * (0.55, 1.0, 0.85)
    zz, yy, xx = np.meshgrid(np.arange(Z), np.arange(H), np.arange(W), indexing="ij")
    inside = np.zeros(shape, dtype=bool)
    inside[:, r0:r1, c0:c1] = True

    def build(k: float) -> np.ndarray:
        u = np.zeros(shape, dtype=bool)
        for o, r in zip(offs, radii):
            rz, ry, rx = np.maximum(r * k, 0.5)
            u |= (((zz - zc - o[0] * k * 0.3) / rz) ** 2 + ((yy - yc - o[1] * k * 0.3) / ry) ** 2
                  + ((xx - xc - o[2] * k * 0.3) / rx) ** 2) <= 1.0
        m = ndimage.gaussian_filter(u.astype(np.float64), 0.8) > 0.5
        return m & inside

    lo_k, hi_k = 0.5, 20.0
    best = None
    for _ in range(40):
        k = 0.5 * (lo_k + hi_k)
        m = build(k)
        count = int(m.sum())
        if lo <= count <= hi and (best is None or abs(count - target) < abs(int(best.sum()) - target)):
            best = m
        if count < target:
            lo_k = k
        else:
            hi_k = k
    if best is None:
        raise GenerationError(f"lesion cannot fit placement region at {lo}-{hi} voxels")
    return best


def gen_subject(seed: int, positive: bool, tvr_band: str = "middle", contrast: float = DEFAULT_CONTRAST,
                shape=DEFAULT_SHAPE) -> PhantomSubject:
    """Generate one phantom; a positive subject carries one lesion inside the placement box."""
    if not 0.1 <= contrast <= 0.8:
        raise ValidationError(f"contrast must be in [0.1, 0.8], got {contrast}")
    if positive and tvr_band not in TVR_BANDS:
        raise ValidationError(f"unknown TVR band '{tvr_band}'")
    rng = np.random.default_rng(seed)
    vol = _background(rng, shape)
    mask = np.zeros(shape, dtype=np.uint8)
    if positive:
        n = int(np.prod(shape))
        f_lo, f_hi = TVR_BANDS[tvr_band]
        lo, hi = int(np.ceil(f_lo * n)), int(np.floor(f_hi * n))
        target = int(rng.uniform(lo + 0.1 * (hi - lo), hi - 0.1 * (hi - lo)))
        lesion = _lesion_shape(rng, shape, placement_box(*shape[1:]), target, lo, hi)
        profile = ndimage.gaussian_filter(lesion.astype(np.float64), 0.7)
        profile = np.where(lesion, np.clip(profile / max(profile.max(), 1e-9) * 1.4, 0.0, 1.0), 0.0)
        vol += contrast * profile
        mask = lesion.astype(np.uint8)
    vol = np.clip(vol, -1.0, 1.0).astype(np.float32)
    return PhantomSubject(vol, mask, contrast=float(contrast) if positive else 0.0,
                          tvr_band=tvr_band if positive else None, seed=int(seed))


# ---------------------------------------------------------------------------
# SALV format

SALV_MAGIC = b"SALV"
SALV_VERSION = 1
_HAS_INTENSITY = 0b01
_HAS_MASK = 0b10
_SALV_HEADER = struct.Struct("<4sIBIII")


def volume_to_bytes(volume: np.ndarray | None = None, mask: np.ndarray | None = None) -> bytes:
    if volume is None and mask is None:
        raise ValidationError("SALV needs an intensity volume, a mask, or both")
    shape = (volume if volume is not None else mask).shape
    if len(shape) != 3:
        raise ValidationError(f"SALV volumes are 3D, got shape {shape}")
    flags = 0
    payload = b""
    if volume is not None:
        flags |= _HAS_INTENSITY
        payload += np.ascontiguousarray(volume, dtype="<f4").tobytes()
    if mask is not None:
        if mask.shape != shape:
            raise ValidationError(f"mask shape {mask.shape} != volume shape {shape}")
        flags |= _HAS_MASK
        payload += np.ascontiguousarray(mask, dtype=np.uint8).tobytes()
    header = _SALV_HEADER.pack(SALV_MAGIC, SALV_VERSION, flags, *shape)
    return header + payload + struct.pack("<I", zlib.crc32(payload))


@dataclass
class SalvRecord:
    intensity: np.ndarray | None
    mask: np.ndarray | None

    @property
    def shape(self):
        return (self.intensity if self.intensity is not None else self.mask).shape


def volume_from_bytes(blob: bytes) -> SalvRecord:
    if len(blob) < _SALV_HEADER.size + 4:
        raise FormatError(f"SALV file too short ({len(blob)} bytes)")
    magic, version, flags, Z, H, W = _SALV_HEADER.unpack_from(blob, 0)
    if magic != SALV_MAGIC:
        raise FormatError(f"bad SALV magic {magic!r}")
    if version != SALV_VERSION:
        raise FormatError(f"unsupported SALV version {version}")
    if flags & ~(_HAS_INTENSITY | _HAS_MASK) or not flags:
        raise FormatError(f"invalid SALV flags 0x{flags:02x}")
    n = Z * H * W
    expected = (4 * n if flags & _HAS_INTENSITY else 0) + (n if flags & _HAS_MASK else 0)
    payload = blob[_SALV_HEADER.size:-4]
    if len(payload) != expected:
        raise FormatError(f"SALV payload length {len(payload)} != expected {expected} for dims {Z}x{H}x{W}")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise FormatError("SALV CRC mismatch")
    off = 0
    intensity = mask = None
    if flags & _HAS_INTENSITY:
        intensity = np.frombuffer(payload, dtype="<f4", count=n).reshape(Z, H, W).astype(np.float32)
        off = 4 * n
    if flags & _HAS_MASK:
        mask = np.frombuffer(payload, dtype=np.uint8, count=n, offset=off).reshape(Z, H, W).copy()
        if not np.isin(mask, (0, 1)).all():
            raise FormatError("SALV mask payload is not binary")
    return SalvRecord(intensity, mask)


def write_volume(path, volume: np.ndarray | None = None, mask: np.ndarray | None = None) -> None:
    Path(path).write_bytes(volume_to_bytes(volume, mask))


def read_volume(path) -> SalvRecord:
    return volume_from_bytes(Path(path).read_bytes())


def write_subject(path, subject: PhantomSubject) -> None:
    write_volume(path, subject.volume, subject.mask)


def read_subject(path, contrast: float = 0.0, tvr_band: str | None = None) -> PhantomSubject:
    rec = read_volume(path)
    if rec.intensity is None or rec.mask is None:
        raise FormatError(f"{path}: subject files need both intensity and mask payloads")
    return PhantomSubject(rec.intensity, rec.mask, contrast=contrast, tvr_band=tvr_band)


def write_mask_volume(path, vol: MaskVolume) -> None:
    write_volume(path, None, vol.data)


def read_mask_volume(path, provenance: str = "vae-sampled") -> MaskVolume:
    rec = read_volume(path)
    if rec.mask is None:
        raise FormatError(f"{path}: no mask payload")
    return MaskVolume(rec.mask, provenance=provenance)


# ---------------------------------------------------------------------------
# cohorts


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def subject_seed(cohort_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(cohort_seed), int(index)]).generate_state(1, dtype=np.uint32)[0])


def n_positives(n_subjects: int, prevalence: float) -> int:
    # round half up, not banker's rounding
    return int(np.floor(n_subjects * prevalence + 0.5))


def _band_counts(n_pos: int, mix) -> list[int]:
    mix = np.asarray(mix, dtype=np.float64)
    if mix.shape != (3,) or (mix < 0).any() or mix.sum() <= 0:
        raise ValidationError(f"tvr mix must be 3 nonnegative weights, got {mix}")
    raw = mix / mix.sum() * n_pos
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n_pos - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


@dataclass
class SubjectEntry:
    id: str
    path: str
    label: int
    tvr: float
    split: str
    tvr_band: str | None
    contrast: float
    seed: int


@dataclass
class CohortManifest:
    subjects: list[SubjectEntry]
    prevalence: float
    seed: int
    config_hash: str
    config: dict

    @property
    def n_positive(self) -> int:
        return sum(e.label for e in self.subjects)

    def to_json(self) -> str:
        doc = {
            "version": 1,
            "prevalence": self.prevalence,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "config": self.config,
            "subjects": [vars(e) for e in self.subjects],
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "CohortManifest":
        doc = json.loads(text)
        return cls(
            subjects=[SubjectEntry(**e) for e in doc["subjects"]],
            prevalence=doc["prevalence"],
            seed=doc["seed"],
            config_hash=doc["config_hash"],
            config=doc["config"],
        )


@dataclass
class Cohort:
    manifest: CohortManifest
    subjects: list[PhantomSubject]
    root: Path | None = None


def gen_cohort(n_subjects: int, prevalence: float, seed: int, tvr_mix=(1.0, 1.0, 1.0),
               contrast: float = DEFAULT_CONTRAST, out_dir=None, split: str = "train",
               shape=DEFAULT_SHAPE, id_prefix: str = "") -> Cohort:
    """Generate a cohort with exactly ``round(n * prevalence)`` positives.

    When ``out_dir`` is given, subjects are written as SALV files under
    ``out_dir/subjects`` next to ``out_dir/manifest.json``.
    """
    if not 0 < prevalence < 1:
        raise ValidationError(f"prevalence must lie in (0, 1), got {prevalence}")
    n_pos = n_positives(n_subjects, prevalence)
    if n_pos < 1:
        raise ValidationError(f"{n_subjects} subjects at prevalence {prevalence} round to zero positives")
    cfg = {
        "n_subjects": int(n_subjects),
        "prevalence": float(prevalence),
        "seed": int(seed),
        "tvr_mix": [float(v) for v in tvr_mix],
        "contrast": float(contrast),
        "split": split,
        "shape": list(shape),
    }
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5A11]))
    positive_idx = rng.permutation(n_subjects)[:n_pos]
    bands = [b for b, c in zip(TVR_BAND_NAMES, _band_counts(n_pos, tvr_mix)) for _ in range(c)]
    bands = [bands[i] for i in rng.permutation(n_pos)]
    band_of = dict(zip(sorted(positive_idx.tolist()), bands))
    root = Path(out_dir) if out_dir is not None else None
    if root is not None:
        (root / "subjects").mkdir(parents=True, exist_ok=True)
    entries, subjects = [], []
    for i in range(n_subjects):
        sid = f"{id_prefix}{split}-{i:04d}"
        s_seed = subject_seed(seed, i)
        band = band_of.get(i)
        subj = gen_subject(s_seed, band is not None, band or "middle", contrast, shape)
        rel = f"subjects/{sid}.salv"
        if root is not None:
            write_subject(root / rel, subj)
        subjects.append(subj)
        entries.append(SubjectEntry(sid, rel, subj.label, subj.tvr, split, subj.tvr_band, subj.contrast, s_seed))
    manifest = CohortManifest(entries, float(prevalence), int(seed), config_hash(cfg), cfg)
    if root is not None:
        (root / "manifest.json").write_text(manifest.to_json(), newline="\n")
    return Cohort(manifest, subjects, root)


def load_cohort(manifest_path) -> Cohort:
    path = Path(manifest_path)
    manifest = CohortManifest.from_json(path.read_text())
    subjects = [read_subject(path.parent / e.path, e.contrast, e.tvr_band) for e in manifest.subjects]
    for e, s in zip(manifest.subjects, subjects):
        if s.label != e.label or abs(s.tvr - e.tvr) > 1e-9:
            raise FormatError(f"subject {e.id}: manifest label/tvr disagree with stored mask")
    return Cohort(manifest, subjects, path.parent)


# ---------------------------------------------------------------------------
# pairing


@dataclass
class PairedSample:
    slice: np.ndarray
    mask: np.ndarray
    label: int
    provenance: str = "oracle-identity"


def pair_synthetic(slice_: np.ndarray, cond_mask: np.ndarray) -> PairedSample:
    """Pair a generated slice with its conditioning mask, which is exact ground truth here."""
    slice_ = np.asarray(slice_)
    cond_mask = np.asarray(cond_mask)
    if slice_.shape != cond_mask.shape:
        raise ValidationError(f"slice {slice_.shape} and mask {cond_mask.shape} differ")
    if not np.isin(cond_mask, (0, 1)).all():
        raise ValidationError("conditioning mask must be binary")
    return PairedSample(slice_, cond_mask.astype(np.uint8), int(cond_mask.any()))
