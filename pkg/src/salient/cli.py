"""Command-line entry point: ``salient <subcommand> [--config PATH] [--seed N] [--out DIR]``."""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .errors import ConfigError, FormatError, SalientError

log = logging.getLogger("salient")

SUBCOMMANDS = ("gen-phantoms", "train-vae", "gen-masks", "train-diffusion", "sample", "train-detector", "sweep",
               "analyze", "verify")


def _seed(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (unknown keys are rejected)")
    common.add_argument("--seed", type=_seed, default=0)
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="salient", description="Wavelet diffusion lesion synthesis on phantoms.")
    p.add_argument("--version", action="version", version=f"salient {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="{" + ",".join(SUBCOMMANDS) + "}")

    sub.add_parser("gen-phantoms", parents=[common], help="generate a phantom cohort")
    s = sub.add_parser("train-vae", parents=[common], help="train the mask VAE")
    s.add_argument("--cohort", help="cohort manifest; default generates positives from config")
    s = sub.add_parser("gen-masks", parents=[common], help="sample lesion mask volumes")
    s.add_argument("--vae", required=True, help="VAE parameters (.salp)")
    s.add_argument("--n", type=int, default=64)
    s = sub.add_parser("train-diffusion", parents=[common], help="train the wavelet denoiser")
    s.add_argument("--cohort", help="cohort manifest; default generates positives from config")
    s = sub.add_parser("sample", parents=[common], help="generate synthetic slices")
    s.add_argument("--denoiser", required=True, help="denoiser parameters (.salp)")
    s.add_argument("--masks", help="directory of .salv mask volumes; default uses real phantom lesion masks")
    s.add_argument("--n", type=int, help="number of slices (default analysis.n_samples)")
    s.add_argument("--steps", type=int, help="sampler steps (default diffusion.sample_steps)")
    s = sub.add_parser("train-detector", parents=[common], help="train the slice detector")
    s.add_argument("--cohort", help="cohort manifest; default generates one from config")
    s.add_argument("--pool", help="synthetic pairs (.salv from `sample`)")
    s.add_argument("--dose", type=int, default=0)
    s = sub.add_parser("sweep", parents=[common], help="dose-response sweep")
    s.add_argument("--pool", help="synthetic pairs (.salv); required when any dose is > 0")
    s = sub.add_parser("analyze", parents=[common], help="realism and band statistics")
    s.add_argument("--synthetic", required=True, help="synthetic slices (.salv)")
    s.add_argument("--real", help="real slices (.salv); default draws phantom lesion slices")
    s = sub.add_parser("verify", parents=[common], help="run the invariant suite")
    s.add_argument("--full", action="store_true", help="include short training smokes")
    return p


# ---------------------------------------------------------------------------
# helpers


def _torch_setup(seed: int):
    import torch

    torch.manual_seed(seed % 2 ** 63)
    return torch


def _lesion_subjects(cfg: RunConfig, seed: int, cohort: str | None):
    from .phantoms import load_cohort
    from .pipeline import positive_subjects

    if cohort:
        subs = [s for s in load_cohort(cohort).subjects if s.label]
        if not subs:
            raise FormatError(f"cohort {cohort} has no positive subjects")
        return subs
    d = cfg.data
    return positive_subjects(d.n_train_positive, seed, d.contrast, d.shape, d.tvr_mix)


def _read_pool(path):
    from .phantoms import pair_synthetic, read_volume

    rec = read_volume(path)
    if rec.intensity is None or rec.mask is None:
        raise FormatError(f"{path}: synthetic pool needs both intensity and mask payloads")
    return [pair_synthetic(x, m) for x, m in zip(rec.intensity, rec.mask)]


def _seed32(seed: int) -> int:
    return int(np.random.SeedSequence(seed).generate_state(1, dtype=np.uint32)[0])


# ---------------------------------------------------------------------------
# subcommands; each returns a list of written artifact paths


def cmd_gen_phantoms(cfg: RunConfig, args, out: Path) -> list[Path]:
    from .phantoms import gen_cohort

    d = cfg.data
    c = gen_cohort(d.n_subjects, d.prevalence, args.seed, d.tvr_mix, d.contrast, out / "cohort", shape=d.shape)
    return [out / "cohort" / "manifest.json"] + [out / "cohort" / e.path for e in c.manifest.subjects]


def cmd_train_vae(cfg: RunConfig, args, out: Path) -> list[Path]:
    from .diffusion import save_params
    from .mask_vae import build_vae, train_vae
    from .pipeline import lesion_volumes

    _torch_setup(args.seed)
    vols = lesion_volumes(_lesion_subjects(cfg, args.seed, args.cohort), cfg.vae.model.size)
    model = build_vae(cfg.vae.model, seed=_seed32(args.seed))
    res = train_vae(model, vols, cfg.vae.train, seed=_seed32(args.seed))
    save_params(out / "vae.salp", res.params)
    hist = {"history": res.history, "min_kl_term": res.min_kl_term}
    (out / "vae_history.json").write_text(json.dumps(hist, indent=2) + "\n")
    return [out / "vae.salp", out / "vae_history.json"]


def cmd_gen_masks(cfg: RunConfig, args, out: Path) -> list[Path]:
    from .diffusion import load_params
    from .mask_vae import build_vae, sample_masks
    from .phantoms import write_mask_volume

    model = build_vae(cfg.vae.model)
    vols = sample_masks(model, args.n, _seed32(args.seed), load_params(args.vae))
    (out / "masks").mkdir(parents=True, exist_ok=True)
    paths = []
    for i, v in enumerate(vols):
        p = out / "masks" / f"mask_{i:04d}.salv"
        write_mask_volume(p, v)
        paths.append(p)
    return paths


def cmd_train_diffusion(cfg: RunConfig, args, out: Path) -> list[Path]:
    from .diffusion import save_params
    from .model import build_denoiser, train_diffusion
    from .pipeline import training_slices

    _torch_setup(args.seed)
    dc = cfg.diffusion
    data = training_slices(_lesion_subjects(cfg, args.seed, args.cohort), dc.model.neighbor_offsets)
    model = build_denoiser(dc.model, seed=_seed32(args.seed))
    res = train_diffusion(model, data, dc.train, dc.loss, seed=_seed32(args.seed))
    save_params(out / "denoiser.salp", res.params)
    save_params(out / "denoiser_ema.salp", res.ema)
    (out / "diffusion_history.json").write_text(
        json.dumps({"history": res.history, "dropout_counts": res.dropout_counts}, indent=2) + "\n")
    return [out / "denoiser.salp", out / "denoiser_ema.salp", out / "diffusion_history.json"]


def cmd_sample(cfg: RunConfig, args, out: Path) -> list[Path]:
    from .diffusion import cosine_schedule, load_params
    from .model import build_denoiser, sample_slices
    from .phantoms import gen_subject, read_mask_volume, subject_seed, write_volume
    from .pipeline import conditioning_plan, positive_subjects, real_conditioning

    dc, d = cfg.diffusion, cfg.data
    n = args.n or cfg.analysis.n_samples
    seed = _seed32(args.seed)
    if args.masks:
        files = sorted(Path(args.masks).glob("*.salv"))
        if not files:
            raise FormatError(f"no .salv mask volumes in {args.masks}")
        vols = [read_mask_volume(f) for f in files]
        hosts = [gen_subject(subject_seed(seed + 1, i), False, contrast=d.contrast, shape=d.shape)
                 for i in range(max(8, n // 16))]
        plan = conditioning_plan(vols, hosts, n, seed, dc.model.neighbor_offsets)
        masks, neighbors = plan.masks, plan.neighbors
    else:
        held = positive_subjects(max(8, n // 3), seed + 7, d.contrast, d.shape, d.tvr_mix)
        _, masks, neighbors = real_conditioning(held, n, dc.model.neighbor_offsets)
    model = build_denoiser(dc.model)
    x = sample_slices(model, masks, neighbors, cosine_schedule(dc.train.T), dc.guidance,
                      args.steps or dc.sample_steps, seed, load_params(args.denoiser), dc.eta)
    write_volume(out / "samples.salv", x.astype(np.float32), masks.astype(np.uint8))
    return [out / "samples.salv"]


def cmd_train_detector(cfg: RunConfig, args, out: Path) -> list[Path]:
    from dataclasses import replace

    from .detection import train_detector
    from .diffusion import save_params
    from .phantoms import gen_cohort, load_cohort

    _torch_setup(args.seed)
    d = cfg.data
    cohort = load_cohort(args.cohort) if args.cohort else gen_cohort(d.n_subjects, d.prevalence, args.seed,
                                                                      d.tvr_mix, d.contrast, shape=d.shape)
    pool = _read_pool(args.pool) if args.pool else []
    det = replace(cfg.detector, seed=_seed32(args.seed))
    res = train_detector(cohort.subjects, pool, args.dose, det)
    save_params(out / "detector.salp", res.params)
    (out / "detector_history.json").write_text(
        json.dumps({"composition": res.composition, "history": res.history, "checkpoint": "final"}, indent=2) + "\n")
    return [out / "detector.salp", out / "detector_history.json"]


def cmd_sweep(cfg: RunConfig, args, out: Path) -> list[Path]:
    from dataclasses import replace

    from .detection import dose_response_sweep, write_report

    _torch_setup(args.seed)
    sweep = replace(cfg.sweep.protocol, base_seed=args.seed)
    if args.pool:
        pool = _read_pool(args.pool)
    elif max(sweep.doses) > 0:
        raise ConfigError("sweep with doses > 0 needs --pool (synthetic pairs from `salient sample`)")
    else:
        pool = []
    report = dose_response_sweep(sweep, pool, cfg.detector, shape=cfg.data.shape)
    write_report(report, out / "report.csv", out / "report.json")
    return [out / "report.csv", out / "report.json"]


def cmd_analyze(cfg: RunConfig, args, out: Path) -> list[Path]:
    from .metrics import band_report, band_report_csv, frechet_proxy, ll_std_per_slice, ms_ssim
    from .phantoms import read_volume
    from .pipeline import positive_subjects, real_conditioning

    syn = read_volume(args.synthetic)
    if syn.intensity is None:
        raise FormatError(f"{args.synthetic} has no intensity payload")
    n = len(syn.intensity)
    if args.real:
        real = read_volume(args.real)
        if real.intensity is None:
            raise FormatError(f"{args.real} has no intensity payload")
        rx, rm = real.intensity, real.mask
    else:
        d = cfg.data
        rx, rm, _ = real_conditioning(positive_subjects(max(8, n // 3), args.seed + 11, d.contrast, d.shape,
                                                        d.tvr_mix), n)
    k = min(n, len(rx))
    scales = cfg.analysis.ms_ssim_scales
    ssim = [ms_ssim(a, b, scales) for a, b in zip(syn.intensity[:k], rx[:k])]
    result = {
        "feature_space": "wavelet-statistic proxy (not Inception features)",
        "n_synthetic": n, "n_real": int(len(rx)),
        "ms_ssim_mean": float(np.mean(ssim)), "ms_ssim_scales": scales,
        "frechet_proxy": frechet_proxy(list(syn.intensity), list(rx)),
        "ll_std_mean_synthetic": float(ll_std_per_slice(syn.intensity).mean()),
        "ll_std_mean_real": float(ll_std_per_slice(rx).mean()),
    }
    (out / "analysis.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    (out / "band_report_synthetic.csv").write_text(band_report_csv(band_report(syn.intensity, syn.mask)))
    (out / "band_report_real.csv").write_text(band_report_csv(band_report(rx, rm)))
    return [out / "analysis.json", out / "band_report_synthetic.csv", out / "band_report_real.csv"]


class VerifyFailed(SalientError):
    exit_code = 4


def cmd_verify(cfg: RunConfig, args, out: Path) -> list[Path]:
    from .verify import run_all

    _torch_setup(args.seed)
    results = run_all(full=args.full)
    doc = [{"module": r.module, "check": r.name, "ok": r.ok, "detail": r.detail, "seconds": round(r.seconds, 3)}
           for r in results]
    (out / "verify.json").write_text(json.dumps(doc, indent=2) + "\n")
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.module}.{r.name}: {r.detail}")
    failed = [f"{r.module}.{r.name}" for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        raise VerifyFailed(f"verify: {len(failed)} check(s) failed: {', '.join(failed)}")
    return [out / "verify.json"]


HANDLERS = {
    "gen-phantoms": cmd_gen_phantoms, "train-vae": cmd_train_vae, "gen-masks": cmd_gen_masks,
    "train-diffusion": cmd_train_diffusion, "sample": cmd_sample, "train-detector": cmd_train_detector,
    "sweep": cmd_sweep, "analyze": cmd_analyze, "verify": cmd_verify,
}


def _versions() -> dict:
    import scipy
    import torch

    return {"salient": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "torch": torch.__version__}


def _write_manifest(out: Path, doc: dict) -> None:
    try:
        (out / "run_manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        log.error("could not write run manifest: %s", exc)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: usage errors exit 2, --help/--version exit 0
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    out = Path(args.out)
    start = time.time()
    manifest = {"command": args.command, "argv": list(sys.argv[1:] if argv is None else argv), "seed": args.seed,
                "start": datetime.fromtimestamp(start, timezone.utc).isoformat(), "versions": _versions(),
                "config_hash": None, "artifact_paths": []}
    code = 0
    try:
        cfg = load_config(args.config)
        manifest["config_hash"] = cfg.hash
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved.json").write_text(cfg.to_json())
        paths = HANDLERS[args.command](cfg, args, out)
        manifest["artifact_paths"] = [str(p) for p in paths] + [str(out / "config.resolved.json")]
    except SalientError as exc:
        code = exc.exit_code
        print(f"salient {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
    except OSError as exc:
        code = 3
        print(f"salient {args.command}: I/O error: {exc}", file=sys.stderr)
    manifest.update(duration_s=round(time.time() - start, 3), exit_code=code, status="ok" if code == 0 else "error")
    if out.is_dir():
        _write_manifest(out, manifest)
    return code


if __name__ == "__main__":
    sys.exit(main())
