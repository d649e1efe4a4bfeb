"""Manifest-driven evaluation and table rendering (distribution, agreement, paired tests)."""
from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .drr import DrrConfig, generate_drr
from .errors import CaseError, DegenerateError, DrrQuantError, UndefinedStatisticError, ValidationError
from .grids import require_same_geometry
from .maskproj import LUNG_CUTOFF, CutoffConfig, binarize_map, project_mask, thickness_projection
from .quant import (
    DEFAULT_PROBABILITY_THRESHOLD,
    SeverityRecord,
    combine_readers,
    ensemble_average,
    method_sort_key,
    poa,
    pov,
    probability_to_mask,
)
from .stats import DEFAULT_RESAMPLES, bootstrap, mae_stat, paired_t_one_tailed, pearson
from .volume_io import load_image2d, load_mask2d, load_mask3d, load_volume, read_geometry, save_image2d

log = logging.getLogger(__name__)

DEFAULT_SEED = 17
METHOD_LABELS = {
    "ground-truth-drr": "Ground-truth DRR",
    "reader-avg": "Reader Avg.",
    "reader-inter": "Reader Inter.",
    "reader-union": "Reader Union",
    "cnn-single": "Single CNN",
    "cnn-ensemble": "Ensemble CNN",
}


def method_label(name):
    if name in METHOD_LABELS:
        return METHOD_LABELS[name]
    if name.startswith("reader-"):
        return "Reader " + name[7:]
    return name


# -- manifest -------------------------------------------------------------------------

@dataclass(frozen=True)
class CaseEntry:
    case_id: str
    ct_path: Path
    lung3d_path: Path
    lesion3d_path: Path
    lung2d_path: Path | None = None
    reader_mask_paths: tuple[Path, ...] = ()
    probability_map_paths: tuple[Path, ...] = ()


@dataclass(frozen=True)
class EvalConfig:
    drr: DrrConfig = field(default_factory=DrrConfig)
    lung_cutoff: CutoffConfig = LUNG_CUTOFF
    lesion_cutoff: CutoffConfig = CutoffConfig("thickness", 38.0)
    probability_threshold: float = DEFAULT_PROBABILITY_THRESHOLD
    axes: str = "xyz"
    system_modality: str = "CXR"
    seed: int = DEFAULT_SEED
    n_resamples: int = DEFAULT_RESAMPLES

    @classmethod
    def from_dict(cls, d):
        stats = d.get("stats", {})
        return cls(
            drr=DrrConfig.from_dict(d.get("drr", {})),
            lung_cutoff=CutoffConfig.from_dict(d["lung_cutoff"]) if "lung_cutoff" in d else LUNG_CUTOFF,
            lesion_cutoff=CutoffConfig.from_dict(d["lesion_cutoff"]) if "lesion_cutoff" in d else CutoffConfig("thickness", 38.0),
            probability_threshold=float(d.get("probability_threshold", DEFAULT_PROBABILITY_THRESHOLD)),
            axes=d.get("axes", "xyz"),
            system_modality=d.get("system_modality", "CXR"),
            seed=int(stats.get("seed", DEFAULT_SEED)),
            n_resamples=int(stats.get("n_resamples", DEFAULT_RESAMPLES)),
        )

    def to_dict(self):
        return {
            "drr": self.drr.to_dict(),
            "lung_cutoff": self.lung_cutoff.to_dict(),
            "lesion_cutoff": self.lesion_cutoff.to_dict(),
            "probability_threshold": self.probability_threshold,
            "axes": self.axes,
            "system_modality": self.system_modality,
            "stats": {"seed": self.seed, "n_resamples": self.n_resamples},
        }


@dataclass(frozen=True)
class Manifest:
    cases: tuple[CaseEntry, ...]
    config: EvalConfig
    base_dir: Path = Path(".")


def manifest_schema():
    return json.loads(resources.files("drrquant").joinpath("manifest.schema.json").read_text())


def _schema_error(err: jsonschema.ValidationError, raw):
    path = list(err.absolute_path)
    case_id = None
    if len(path) >= 2 and path[0] == "cases" and isinstance(path[1], int):
        entry = raw["cases"][path[1]]
        case_id = entry.get("case_id") if isinstance(entry, dict) else None
        fld = ".".join(str(p) for p in path[2:]) or None
        if err.validator == "required":
            fld = err.message.split("'")[1]
    else:
        fld = ".".join(str(p) for p in path) or None
    return ValidationError(err.message, case_id=case_id, field=fld)


def validate_manifest(path) -> Manifest:
    """Schema-check a manifest, resolve its paths and verify 3D geometry per case."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ValidationError(f"manifest {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"manifest is not valid JSON: {exc}") from None
    errors = sorted(jsonschema.Draft202012Validator(manifest_schema()).iter_errors(raw), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        raise _schema_error(errors[0], raw)

    try:
        config = EvalConfig.from_dict(raw.get("config", {}))
    except DrrQuantError as exc:
        raise ValidationError(str(exc), field="config") from None

    base = path.parent
    seen = set()
    cases = []
    for c in raw["cases"]:
        cid = c["case_id"]
        if cid in seen:
            raise ValidationError(f"duplicate case_id {cid!r}", case_id=cid, field="case_id")
        seen.add(cid)

        def resolve(p, fld):
            full = (base / p).resolve()
            if not full.is_file():
                raise ValidationError(f"file not found: {full}", case_id=cid, field=fld)
            return full

        entry = CaseEntry(
            case_id=cid,
            ct_path=resolve(c["ct_path"], "ct_path"),
            lung3d_path=resolve(c["lung3d_path"], "lung3d_path"),
            lesion3d_path=resolve(c["lesion3d_path"], "lesion3d_path"),
            lung2d_path=resolve(c["lung2d_path"], "lung2d_path") if "lung2d_path" in c else None,
            reader_mask_paths=tuple(resolve(p, f"reader_mask_paths[{i}]") for i, p in enumerate(c.get("reader_mask_paths", []))),
            probability_map_paths=tuple(
                resolve(p, f"probability_map_paths[{i}]") for i, p in enumerate(c.get("probability_map_paths", []))
            ),
        )
        try:
            ct_geom = read_geometry(entry.ct_path, config.axes)
            for fld in ("lung3d_path", "lesion3d_path"):
                geom = read_geometry(getattr(entry, fld), config.axes)
                if geom != ct_geom:
                    raise ValidationError(f"geometry {geom} differs from CT {ct_geom}", case_id=cid, field=fld)
        except ValidationError:
            raise
        except DrrQuantError as exc:
            raise ValidationError(str(exc), case_id=cid) from None
        cases.append(entry)
    return Manifest(tuple(cases), config, base)


# -- evaluation ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    records: list[SeverityRecord]
    agreement: dict
    ttests: list[dict]
    distribution: dict
    config: dict
    skipped: list[dict] = field(default_factory=list)
    log: list[str] = field(default_factory=list)

    @property
    def methods(self):
        return sorted(self.agreement, key=method_sort_key)

    def to_dict(self):
        return {
            "version": __version__,
            "config": self.config,
            "records": [r.to_dict() for r in self.records],
            "distribution": self.distribution,
            "agreement": self.agreement,
            "ttests": self.ttests,
            "skipped": self.skipped,
            "log": self.log,
        }

    @classmethod
    def from_dict(cls, d):
        records = [SeverityRecord(r["case_id"], r["pov_ct"], dict(r["poa_by_method"])) for r in d["records"]]
        return cls(records, d["agreement"], d["ttests"], d["distribution"], d["config"], d.get("skipped", []), d.get("log", []))

    def to_json(self):
        return json.dumps(_json_safe(self.to_dict()), indent=2, allow_nan=False) + "\n"


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def load_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


def _evaluate_case(entry: CaseEntry, cfg: EvalConfig, artifacts_dir: Path | None):
    v = load_volume(entry.ct_path, cfg.axes)
    lung = load_mask3d(entry.lung3d_path, cfg.axes)
    lesion = load_mask3d(entry.lesion3d_path, cfg.axes)
    require_same_geometry(v, lung, "CT and lung mask")
    require_same_geometry(v, lesion, "CT and lesion mask")

    record = SeverityRecord(entry.case_id, pov(lung, lesion))
    drr = generate_drr(v, cfg.drr)

    lung2d = binarize_map(thickness_projection(lung), cfg.lung_cutoff)
    lesion2d = binarize_map(project_mask(lesion, cfg.lesion_cutoff.mode, v, cfg.drr.attenuation), cfg.lesion_cutoff)
    record.poa_by_method["ground-truth-drr"] = poa(lung2d, lesion2d)

    eval_lung = load_mask2d(entry.lung2d_path) if entry.lung2d_path else lung2d

    readers = [load_mask2d(p) for p in entry.reader_mask_paths]
    for i, m in enumerate(readers, start=1):
        record.poa_by_method[f"reader-{i}"] = poa(eval_lung, m)
    if len(readers) >= 2:
        record.poa_by_method["reader-avg"] = combine_readers(readers, "avg", eval_lung)
        record.poa_by_method["reader-inter"] = poa(eval_lung, combine_readers(readers, "inter"))
        record.poa_by_method["reader-union"] = poa(eval_lung, combine_readers(readers, "union"))

    maps = [load_image2d(p) for p in entry.probability_map_paths]
    if maps:
        thr = cfg.probability_threshold
        record.poa_by_method["cnn-single"] = poa(eval_lung, probability_to_mask(maps[0], eval_lung, thr))
        if len(maps) >= 2:
            record.poa_by_method["cnn-ensemble"] = poa(eval_lung, probability_to_mask(ensemble_average(maps), eval_lung, thr))

    if artifacts_dir is not None:
        artifacts_dir.mkdir(parents=True, exist_ok=True)
        save_image2d(drr, artifacts_dir / f"{entry.case_id}_drr.png", cfg.drr.output_window, {"config": cfg.drr.to_dict()})
        save_image2d(lung2d, artifacts_dir / f"{entry.case_id}_lung2d.png")
        save_image2d(lesion2d, artifacts_dir / f"{entry.case_id}_lesion2d.png")
    # re-validate ranges after filling in methods
    SeverityRecord(record.case_id, record.pov_ct, record.poa_by_method)
    return record


def _summary(values):
    a = np.asarray(values, dtype=np.float64)
    n = len(a)
    if n == 0:
        return {"n": 0, "min": None, "max": None, "mean": None, "std": None}
    mean = math.fsum(a) / n
    std = math.sqrt(math.fsum((a - mean) ** 2) / (n - 1)) if n > 1 else 0.0
    return {"n": n, "min": float(a.min()), "max": float(a.max()), "mean": mean, "std": std}


def _agreement(pairs, cfg: EvalConfig):
    out = {"n": len(pairs), "mae": None, "pearson": None, "notes": []}
    out["mae"] = bootstrap(mae_stat, pairs, cfg.n_resamples, cfg.seed).to_dict()
    try:
        out["pearson"] = bootstrap(pearson, pairs, cfg.n_resamples, cfg.seed).to_dict()
    except (UndefinedStatisticError, DegenerateError) as exc:
        out["notes"].append(f"pearson undefined: {exc}")
    return out


class _LogCollector(logging.Handler):
    def __init__(self):
        super().__init__(logging.WARNING)
        self.messages = []

    def emit(self, record):
        self.messages.append(f"{record.levelname}: {record.getMessage()}")


def run_evaluate(m: Manifest, skip_bad_cases: bool = False, workers: int = 1,
                 artifacts_dir=None, seed: int | None = None) -> EvalReport:
    """Run the per-case pipeline over ``m`` and aggregate agreement statistics.

    Per-case work may run on ``workers`` threads; records are merged in
    manifest order so the report does not depend on scheduling.
    """
    cfg = m.config
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    artifacts_dir = Path(artifacts_dir) if artifacts_dir is not None else None

    collector = _LogCollector()
    pkg_log = logging.getLogger("drrquant")
    pkg_log.addHandler(collector)
    try:
        def run(entry):
            try:
                return _evaluate_case(entry, cfg, artifacts_dir), None
            except (DrrQuantError, OSError, ValueError) as exc:
                if not skip_bad_cases:
                    raise CaseError(entry.case_id, exc) from exc
                return None, {"case_id": entry.case_id, "error": f"{type(exc).__name__}: {exc}"}

        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                outcomes = list(pool.map(run, m.cases))
        else:
            outcomes = [run(e) for e in m.cases]
    finally:
        pkg_log.removeHandler(collector)

    records = [r for r, _ in outcomes if r is not None]
    skipped = [s for _, s in outcomes if s is not None]

    methods = sorted({k for r in records for k in r.poa_by_method}, key=method_sort_key)
    agreement = {}
    for name in methods:
        pairs = [(r.poa_by_method[name], r.pov_ct) for r in records if name in r.poa_by_method]
        agreement[name] = _agreement(pairs, cfg)

    ttests = []
    for a, b in itertools.combinations(methods, 2):
        both = [r for r in records if a in r.poa_by_method and b in r.poa_by_method]
        row = {"a": a, "b": b, "n": len(both)}
        if len(both) < 2:
            row.update(t=None, p_one_tailed=None, df=None, flag="too-few-cases")
        else:
            err_a = [abs(r.poa_by_method[a] - r.pov_ct) for r in both]
            err_b = [abs(r.poa_by_method[b] - r.pov_ct) for r in both]
            row.update(paired_t_one_tailed(err_a, err_b).to_dict())
        ttests.append(row)

    distribution = {
        "pov_ct": _summary([r.pov_ct for r in records]),
        "ground-truth-drr": _summary([r.poa_by_method["ground-truth-drr"] for r in records]),
    }
    return EvalReport(records, agreement, ttests, distribution, cfg.to_dict(), skipped, sorted(collector.messages))


# -- rendering -------------------------------------------------------------------------------

def fmt_percent_ci(b):
    if b is None:
        return "n/a"
    return f"{b['point']:.2f}% ({b['lo']:.2f}% to {b['hi']:.2f}%)"


def fmt_ratio_ci(b):
    if b is None:
        return "n/a"
    return f"{b['point']:.2f} ({b['lo']:.2f} to {b['hi']:.2f})"


def fmt_t(t):
    if t is None:
        return "n/a"
    if isinstance(t, str) or math.isinf(t):
        return str(t) if isinstance(t, str) else ("inf" if t > 0 else "-inf")
    return f"{t:.2f}"


def fmt_p(p):
    if p is None:
        return "n/a"
    star = "*" if p < 0.05 else ""
    if p < 0.005:
        return f"<0.01{star}"
    return f"{p:.2f}{star}"


def modality(name, cfg):
    return "DRR" if name == "ground-truth-drr" else cfg.get("system_modality", "CXR")


def _md_table(header, rows):
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    return "\n".join(lines)


def _num(v, digits=2):
    return "n/a" if v is None else f"{v:.{digits}f}"


def render_markdown(r: EvalReport) -> str:
    cfg = r.config
    out = [
        "# POa / POv agreement report",
        "",
        f"- cases evaluated: {len(r.records)}",
        f"- cases skipped: {len(r.skipped)}",
        f"- bootstrap: {cfg['stats']['n_resamples']} resamples, seed {cfg['stats']['seed']}",
        f"- lung cutoff: {cfg['lung_cutoff']['mode']} >= {cfg['lung_cutoff']['cutoff']}",
        f"- lesion cutoff: {cfg['lesion_cutoff']['mode']} >= {cfg['lesion_cutoff']['cutoff']}",
        "",
        "## Distribution of POv and DRR POa (%)",
        "",
    ]
    rows = []
    for key, label, mod in (("pov_ct", "Ground-truth POv", "CT"), ("ground-truth-drr", "DRR POa", "DRR")):
        s = r.distribution.get(key, {})
        rows.append([label, mod, s.get("n", 0), _num(s.get("min")), _num(s.get("max")), _num(s.get("mean")), _num(s.get("std"))])
    out += [_md_table(["Measure", "Modality", "n", "min", "max", "mean", "standard deviation"], rows), ""]

    out += ["## Agreement with CT POv", ""]
    rows = [
        [method_label(m), modality(m, cfg), r.agreement[m]["n"], fmt_percent_ci(r.agreement[m]["mae"]), fmt_ratio_ci(r.agreement[m]["pearson"])]
        for m in r.methods
    ]
    out += [_md_table(["Description", "Modality", "n", "95% Bootstrap MAE", "95% Bootstrap Pearson"], rows), ""]

    out += ["## Paired comparisons of absolute errors (one-tailed, first > second)", ""]
    rows = [
        [f"{method_label(t['a'])} vs. {method_label(t['b'])}", t["n"], fmt_t(t["t"]), fmt_p(t["p_one_tailed"]), t["flag"] or ""]
        for t in r.ttests
    ]
    out += [_md_table(["Comparison", "n", "t-score", "p-value", "flag"], rows), ""]

    out += ["## Per-case severity (%)", ""]
    methods = r.methods
    rows = [
        [rec.case_id, _num(rec.pov_ct)] + [_num(rec.poa_by_method.get(m)) for m in methods] for rec in r.records
    ]
    out += [_md_table(["Case", "POv (CT)"] + [method_label(m) for m in methods], rows), ""]

    if r.skipped:
        out += ["## Skipped cases", ""]
        out += [_md_table(["Case", "Error"], [[s["case_id"], s["error"]] for s in r.skipped]), ""]
    if r.log:
        out += ["## Log", ""] + [f"- {line}" for line in r.log] + [""]
    return "\n".join(out)


def _csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def render_csv(r: EvalReport) -> dict[str, str]:
    """One CSV per table, keyed by file name."""
    tables = {}
    rows = []
    for key in ("pov_ct", "ground-truth-drr"):
        s = r.distribution.get(key, {})
        rows.append([key] + [_cell(s.get(k)) for k in ("n", "min", "max", "mean", "std")])
    tables["distribution.csv"] = _csv(["measure", "n", "min", "max", "mean", "std"], rows)

    rows = []
    for m in r.methods:
        a = r.agreement[m]
        mae_b, p_b = a["mae"] or {}, a["pearson"] or {}
        rows.append([m, modality(m, r.config), a["n"]] + [_cell(mae_b.get(k)) for k in ("point", "lo", "hi")]
                    + [_cell(p_b.get(k)) for k in ("point", "lo", "hi")])
    tables["agreement.csv"] = _csv(
        ["method", "modality", "n", "mae", "mae_lo", "mae_hi", "pearson", "pearson_lo", "pearson_hi"], rows
    )

    rows = [[t["a"], t["b"], t["n"], _cell(t["t"]), _cell(t["p_one_tailed"]), _cell(t["df"]), t["flag"] or ""] for t in r.ttests]
    tables["ttests.csv"] = _csv(["a", "b", "n", "t", "p_one_tailed", "df", "flag"], rows)

    methods = r.methods
    rows = [[rec.case_id, _cell(rec.pov_ct)] + [_cell(rec.poa_by_method.get(m)) for m in methods] for rec in r.records]
    tables["cases.csv"] = _csv(["case_id", "pov_ct"] + methods, rows)
    return tables


def render_report(r: EvalReport, out_dir, formats=("json", "csv", "md")) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        if fmt == "json":
            p = out_dir / "report.json"
            p.write_text(r.to_json())
            written.append(p)
        elif fmt == "md":
            p = out_dir / "report.md"
            p.write_text(render_markdown(r))
            written.append(p)
        elif fmt == "csv":
            for name, text in render_csv(r).items():
                p = out_dir / name
                p.write_text(text)
                written.append(p)
        else:
            raise ValueError(f"unknown report format {fmt!r}")
    return written
