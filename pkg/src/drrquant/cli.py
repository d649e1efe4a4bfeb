"""Command-line entry point.

Exit codes: 0 success, 2 invalid input or manifest, 3 runtime failure on a case.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from .drr import DrrConfig, generate_drr
from .errors import (
    CaseError,
    DrrQuantError,
    GeometryError,
    IntegrityError,
    InvariantError,
    ParseError,
    UnsupportedFormatError,
    UnsupportedSpecError,
    UsageError,
    ValidationError,
)
from .maskproj import CutoffConfig, binarize_map, calibrate_cutoff, parse_grid, project_mask
from .phantom import PhantomSpec, generate_phantom
from .quant import poa, pov
from .report import render_report, run_evaluate, validate_manifest
from .volume_io import load_mask2d, load_mask3d, load_volume, save_image2d, save_volume

log = logging.getLogger("drrquant")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3
_INVALID = (
    ValidationError, UsageError, ParseError, IntegrityError, UnsupportedFormatError,
    InvariantError, GeometryError, UnsupportedSpecError, FileNotFoundError,
)


def _emit(obj):
    sys.stdout.write(json.dumps(obj, indent=2) + "\n")


def cmd_phantom_gen(args):
    spec = PhantomSpec.from_json(args.spec)
    volume, lung, lesion, truth = generate_phantom(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_volume(volume, out / "ct.mha")
    save_volume(lung, out / "lung.mha")
    save_volume(lesion, out / "lesion.mha")
    (out / "truth.json").write_text(json.dumps(truth.to_dict(), indent=2) + "\n")
    _emit(truth.to_dict())


def cmd_drr_generate(args):
    cfg = DrrConfig.from_dict(json.loads(Path(args.config).read_text())) if args.config else DrrConfig()
    volume = load_volume(args.ct, args.axes)
    t0 = time.perf_counter()
    drr = generate_drr(volume, cfg)
    log.info("DRR generated in %.3f s", time.perf_counter() - t0)
    save_image2d(drr, args.out, cfg.output_window, {"config": cfg.to_dict(), "source": str(args.ct)})


def cmd_mask_project(args):
    mask = load_mask3d(args.mask, args.axes)
    volume = load_volume(args.ct, args.axes) if args.ct else None
    img = project_mask(mask, args.mode, volume)
    if args.cutoff is not None:
        save_image2d(binarize_map(img, CutoffConfig(args.mode, args.cutoff)), args.out)
    else:
        save_image2d(img, args.out)


def _calibration_dataset(manifest):
    axes = manifest.config.axes
    for c in manifest.cases:
        yield load_volume(c.ct_path, axes), load_mask3d(c.lung3d_path, axes), load_mask3d(c.lesion3d_path, axes)


def cmd_calibrate(args):
    manifest = validate_manifest(args.manifest)
    result = calibrate_cutoff(
        _calibration_dataset(manifest), args.mode, parse_grid(args.grid),
        manifest.config.lung_cutoff, manifest.config.drr.attenuation,
    )
    text = json.dumps(result.to_dict(), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(json.dumps({"best_cutoff": result.best_cutoff, "best_mae": result.best_mae}) + "\n")


def cmd_quant_pov(args):
    value = pov(load_mask3d(args.lung, args.axes), load_mask3d(args.lesion, args.axes))
    _emit({"case_id": args.case_id, "pov_ct": value, "poa_by_method": {}})


def cmd_quant_poa(args):
    value = poa(load_mask2d(args.lung), load_mask2d(args.lesion))
    _emit({"case_id": args.case_id, "pov_ct": None, "poa_by_method": {args.method: value}})


def cmd_evaluate(args):
    manifest = validate_manifest(args.manifest)
    if args.calibration:
        calib = json.loads(Path(args.calibration).read_text())
        lesion = CutoffConfig(calib["mode"], float(calib["best_cutoff"]))
        manifest = replace(manifest, config=replace(manifest.config, lesion_cutoff=lesion))
    formats = [f.strip() for f in args.format.split(",") if f.strip()]
    bad = [f for f in formats if f not in ("md", "json", "csv")]
    if bad:
        raise UsageError(f"unknown report format(s): {', '.join(bad)}")
    out = Path(args.out)
    report = run_evaluate(
        manifest,
        skip_bad_cases=args.skip_bad_cases,
        workers=args.workers,
        artifacts_dir=out / "artifacts" if args.artifacts else None,
        seed=args.seed,
    )
    for path in render_report(report, out, formats):
        log.info("wrote %s", path)
    if report.skipped:
        log.warning("%d case(s) skipped", len(report.skipped))


def build_parser():
    p = argparse.ArgumentParser(prog="drrquant", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="synthetic phantoms").add_subparsers(dest="action", required=True)
    g = ph.add_parser("gen", help="voxelize a phantom spec")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_phantom_gen)

    dr = sub.add_parser("drr", help="digitally reconstructed radiographs").add_subparsers(dest="action", required=True)
    g = dr.add_parser("generate", help="project, resample and normalize a CT volume")
    g.add_argument("--ct", required=True)
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--axes", default="xyz", help="canonical name of each stored axis, fastest first")
    g.set_defaults(func=cmd_drr_generate)

    mk = sub.add_parser("mask", help="3D mask projection").add_subparsers(dest="action", required=True)
    g = mk.add_parser("project", help="thickness or intensity projection, optionally binarized")
    g.add_argument("--mode", choices=["thickness", "intensity"], required=True)
    g.add_argument("--ct")
    g.add_argument("--mask", required=True)
    g.add_argument("--cutoff", type=float)
    g.add_argument("--out", required=True)
    g.add_argument("--axes", default="xyz")
    g.set_defaults(func=cmd_mask_project)

    g = sub.add_parser("calibrate", help="grid search of the lesion cutoff")
    g.add_argument("--manifest", required=True)
    g.add_argument("--mode", choices=["thickness", "intensity"], required=True)
    g.add_argument("--grid", required=True, help="lo:hi:step")
    g.add_argument("--out")
    g.set_defaults(func=cmd_calibrate)

    q = sub.add_parser("quant", help="severity measures").add_subparsers(dest="action", required=True)
    g = q.add_parser("pov", help="volume opacity percentage from 3D masks")
    g.add_argument("--lung", required=True)
    g.add_argument("--lesion", required=True)
    g.add_argument("--case-id", default="")
    g.add_argument("--axes", default="xyz")
    g.set_defaults(func=cmd_quant_pov)
    g = q.add_parser("poa", help="area opacity percentage from 2D masks")
    g.add_argument("--lung", required=True)
    g.add_argument("--lesion", required=True)
    g.add_argument("--case-id", default="")
    g.add_argument("--method", default="ground-truth-drr")
    g.set_defaults(func=cmd_quant_poa)

    g = sub.add_parser("evaluate", help="run the full pipeline over a manifest")
    g.add_argument("--manifest", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.add_argument("--format", default="md,json,csv")
    g.add_argument("--skip-bad-cases", action="store_true")
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--calibration", help="calibration JSON whose best cutoff replaces the lesion cutoff")
    g.add_argument("--artifacts", action="store_true", help="also write per-case DRR and 2D masks")
    g.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except CaseError as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME
    except _INVALID as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    except (DrrQuantError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
