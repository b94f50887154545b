"""Experiment grid: preprocessing cache, per-cell training runs and reports.

Output tree::

    <out>/cache/manifest.jsonl, sources.json, slices/*.npz
    <out>/cells/<run_id>/checkpoint.pt(.json), history.jsonl, dice_records.csv, done.json
    <out>/reports/<architecture>.txt, <architecture>.csv, <architecture>_comparisons.csv
"""

from __future__ import annotations

import csv
import dataclasses
import fnmatch
import hashlib
import itertools
import json
import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .data import (
    FRACTIONS,
    PhantomConfig,
    SliceSample,
    list_subjects,
    load_acdc_subject,
    make_splits,
    preprocess_volume,
    subsample_training,
    write_synthetic_dataset,
)
from .evaluation import (
    NUM_COMPARISONS,
    ComparisonResult,
    DiceRecord,
    aggregate,
    bonferroni_decide,
    compare,
    evaluate_model,
    read_records,
    write_comparisons,
    write_records,
)
from .networks import ARCHITECTURES, VARIANTS, BackboneConfig, FusionSpec, build_model, load_checkpoint, save_checkpoint
from .training import TrainConfig, TrainHistory, train

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    dataset_root: Path = Path("data")
    dataset_kind: str = "acdc"
    architectures: tuple[str, ...] = ARCHITECTURES
    variants: tuple[str, ...] = VARIANTS
    fractions: tuple[float, ...] = FRACTIONS
    repeats: int = 3
    seed: int = 0
    output: Path = Path("runs")
    z_scope: str = "slice"
    synthetic_subjects: int = 6
    synthetic_slices: int = 8
    jobs: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        self.dataset_root, self.output = Path(self.dataset_root), Path(self.output)
        if self.dataset_kind not in ("acdc", "synthetic"):
            raise ConfigError(f"dataset kind must be acdc or synthetic, got {self.dataset_kind!r}")
        for name, allowed in (("architectures", ARCHITECTURES), ("variants", VARIANTS)):
            values = getattr(self, name)
            if not values:
                raise ConfigError(f"{name} must not be empty")
            unknown = set(values) - set(allowed)
            if unknown:
                raise ConfigError(f"unknown {name}: {sorted(unknown)}")
        if not self.fractions or any(not 0 < f <= 1 for f in self.fractions):
            raise ConfigError("fractions must be a nonempty selection from (0, 1]")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if self.z_scope not in ("slice", "volume"):
            raise ConfigError("z_scope must be slice or volume")


# ---------------------------------------------------------------- config file

_SECTIONS = {"train": TrainConfig, "backbone": BackboneConfig}


def _parse_value(raw: str, typ: str):
    # dataclass field types are strings under postponed annotations
    raw = raw.strip()
    if typ.startswith("tuple"):
        items = [x.strip() for x in raw.split(",") if x.strip()]
        return tuple(float(x) for x in items) if "float" in typ else tuple(items)
    if typ == "int":
        return int(raw)
    if typ == "float":
        return float(raw)
    return raw


def _field_types(cls) -> dict[str, str]:
    return {f.name: f.type if isinstance(f.type, str) else f.type.__name__ for f in dataclasses.fields(cls)}


def load_config(path=None, **overrides) -> ExperimentConfig:
    """Read a flat ``key = value`` file; nested fields use dotted names.

    Example::

        dataset_root = data/acdc
        architectures = unet, encoder_decoder
        fractions = 1.0, 0.25
        train.learning_rate = 0.0001
        backbone.base_channels = 16
    """
    top, nested = {}, {name: {} for name in _SECTIONS}
    top_types = _field_types(ExperimentConfig)
    if path is not None:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key = key.strip()
            section, dot, name = key.partition(".")
            if dot:
                if section not in _SECTIONS:
                    raise ConfigError(f"{path}:{lineno}: unknown section {section!r}")
                types = _field_types(_SECTIONS[section])
                if name not in types:
                    raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
                nested[section][name] = _parse_value(value, types[name])
            else:
                if key not in top_types or key in _SECTIONS:
                    raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
                top[key] = _parse_value(value, top_types[key])
    for key, value in overrides.items():
        if value is None:
            continue
        section, dot, name = key.partition(".")
        if dot:
            nested[section][name] = value
        else:
            top[key] = value
    try:
        return ExperimentConfig(
            **top,
            train=TrainConfig(**nested["train"]),
            backbone=BackboneConfig(**nested["backbone"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in _SECTIONS:
            for sub in dataclasses.fields(value):
                lines.append(f"{f.name}.{sub.name} = {getattr(value, sub.name)}")
        elif isinstance(value, tuple):
            lines.append(f"{f.name} = {', '.join(map(str, value))}")
        else:
            lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------- preprocessing cache

def _hash_dir(path: Path, extra: str) -> str:
    h = hashlib.sha256(extra.encode())
    for p in sorted(path.iterdir()):
        if p.is_file():
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _slice_file(cache: Path, s) -> Path:
    return cache / "slices" / f"{s.subject_id}_{s.phase}_{s.slice_index:03d}.npz"


def ensure_synthetic(cfg: ExperimentConfig):
    if not cfg.dataset_root.exists() or not list_subjects(cfg.dataset_root):
        write_synthetic_dataset(
            cfg.dataset_root, cfg.synthetic_subjects, cfg.seed, PhantomConfig(n_slices=cfg.synthetic_slices)
        )


def prepare_data(cfg: ExperimentConfig) -> dict:
    """Build or refresh ``<out>/cache``; returns a summary of the run.

    Subjects whose source files and preprocessing settings hash to the value
    stored in ``sources.json`` are skipped.
    """
    if cfg.dataset_kind == "synthetic":
        ensure_synthetic(cfg)
    if not cfg.dataset_root.exists():
        raise DataError(f"dataset root {cfg.dataset_root} does not exist")
    subjects = list_subjects(cfg.dataset_root)
    if not subjects:
        raise DataError(f"no subjects under {cfg.dataset_root}")
    cache = cfg.output / "cache"
    (cache / "slices").mkdir(parents=True, exist_ok=True)
    sources_path = cache / "sources.json"
    sources = json.loads(sources_path.read_text()) if sources_path.exists() else {}
    manifest = {}
    if (cache / "manifest.jsonl").exists():
        for line in (cache / "manifest.jsonl").read_text().splitlines():
            rec = json.loads(line)
            manifest.setdefault(rec["subject_id"], []).append(rec)

    settings = f"z_scope={cfg.z_scope}"
    summary = {"processed": [], "skipped": [], "errors": {}}
    for subject_dir in subjects:
        sid = subject_dir.name
        digest = _hash_dir(subject_dir, settings)
        if sources.get(sid) == digest and sid in manifest:
            summary["skipped"].append(sid)
            continue
        try:
            volumes = load_acdc_subject(subject_dir)
        except Exception as exc:  # report and continue with the next subject
            summary["errors"][sid] = f"{type(exc).__name__}: {exc}"
            log.error("subject %s: %s", sid, exc)
            sources.pop(sid, None)
            manifest.pop(sid, None)
            continue
        records = []
        for v in volumes:
            for s in preprocess_volume(v, z_scope=cfg.z_scope):
                np.savez(_slice_file(cache, s), image=s.image, labels=s.labels, z=s.z)
                records.append({
                    "subject_id": s.subject_id, "phase": s.phase, "slice_index": s.slice_index,
                    "z": [float(x) for x in s.z], "file": _slice_file(cache, s).name,
                })
        manifest[sid] = records
        sources[sid] = digest
        summary["processed"].append(sid)

    present = {p.name for p in subjects}
    manifest = {k: v for k, v in manifest.items() if k in present}
    if not manifest:
        raise DataError("no subject could be preprocessed")
    with open(cache / "manifest.jsonl", "w") as f:
        for sid in sorted(manifest):
            for rec in manifest[sid]:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
    sources_path.write_text(json.dumps({k: sources[k] for k in sorted(manifest)}, indent=2, sort_keys=True))
    (cache / "errors.json").write_text(json.dumps(summary["errors"], indent=2, sort_keys=True))
    return summary


def load_cache(output) -> list[SliceSample]:
    cache = Path(output) / "cache"
    path = cache / "manifest.jsonl"
    if not path.exists():
        raise DataError(f"no preprocessing cache at {cache}; run prepare-data first")
    out = []
    for line in path.read_text().splitlines():
        rec = json.loads(line)
        with np.load(cache / "slices" / rec["file"]) as data:
            out.append(SliceSample(
                rec["subject_id"], rec["phase"], rec["slice_index"],
                data["image"], data["labels"], data["z"],
            ))
    return out


# ------------------------------------------------------------------ grid cells

@dataclass(frozen=True)
class Cell:
    architecture: str
    variant: str
    fraction: float
    repeat: int

    @property
    def run_id(self) -> str:
        return f"{self.architecture}.{self.variant}.f{self.fraction:g}.r{self.repeat}"

    @property
    def fusion(self) -> FusionSpec:
        return FusionSpec.from_variant(self.architecture, self.variant)

    def seed(self, global_seed: int) -> int:
        key = f"{global_seed}|{self.architecture}|{self.variant}|{self.fraction!r}|{self.repeat}"
        return int.from_bytes(hashlib.sha256(key.encode()).digest()[:4], "little") & 0x7FFFFFFF

    def as_dict(self) -> dict:
        return {"architecture": self.architecture, "variant": self.variant,
                "fraction": self.fraction, "repeat": self.repeat, "run_id": self.run_id}


def grid_cells(cfg: ExperimentConfig) -> list[Cell]:
    return [
        Cell(a, v, f, r)
        for a, f, v, r in itertools.product(cfg.architectures, cfg.fractions, cfg.variants, range(cfg.repeats))
    ]


def filter_cells(cells, expression: Optional[str]) -> list[Cell]:
    """Select cells with ``key=pattern`` terms joined by ``,`` (all must match).

    Keys are ``arch``, ``variant``, ``fraction``, ``repeat`` and ``id``;
    patterns are shell globs and may list alternatives with ``|``.
    """
    if not expression:
        return list(cells)
    terms = []
    for term in expression.split(","):
        key, sep, pattern = term.strip().partition("=")
        if not sep or key not in ("arch", "variant", "fraction", "repeat", "id"):
            raise ConfigError(f"bad cell filter term {term!r}")
        terms.append((key, pattern.split("|")))

    def value(cell, key):
        return {
            "arch": cell.architecture, "variant": cell.variant,
            "fraction": f"{cell.fraction:g}", "repeat": str(cell.repeat), "id": cell.run_id,
        }[key]

    return [c for c in cells if all(any(fnmatch.fnmatchcase(value(c, k), p) for p in pats) for k, pats in terms)]


def cell_dir(cfg: ExperimentConfig, cell: Cell) -> Path:
    return cfg.output / "cells" / cell.run_id


def is_complete(cfg, cell) -> bool:
    return (cell_dir(cfg, cell) / "done.json").exists()


def split_for(cfg: ExperimentConfig, slices, cell: Cell):
    """Train/val/test slices of a cell; every variant of a row shares them."""
    subjects = sorted({s.subject_id for s in slices})
    plan = make_splits(subjects, repeats=cfg.repeats, seed=cfg.seed)[cell.repeat]
    plan = subsample_training(plan, cell.fraction, seed=cfg.seed)
    pick = lambda ids: [s for s in slices if s.subject_id in set(ids)]  # noqa: E731
    return plan, pick(plan.effective_train_subjects), pick(plan.val_subjects), pick(plan.test_subjects)


def _atomic_write(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def run_cell(cfg: ExperimentConfig, cell: Cell, slices=None, progress=print) -> list[DiceRecord]:
    """Train and evaluate one cell, writing its artifacts.

    ``done.json`` is written last, so a directory without it is incomplete.
    """
    slices = load_cache(cfg.output) if slices is None else slices
    out = cell_dir(cfg, cell)
    out.mkdir(parents=True, exist_ok=True)
    seed = cell.seed(cfg.seed)
    plan, train_s, val_s, test_s = split_for(cfg, slices, cell)

    torch.manual_seed(seed)
    model = build_model(cfg.backbone, cell.fusion)
    tcfg = dataclasses.replace(cfg.train, seed=seed)
    prefix = cell.run_id
    _, history = train(model, train_s, val_s, tcfg, dump_dir=out,
                       progress=(lambda line: progress(f"[{prefix}] {line}")) if progress else None)
    history.write(out / "history.jsonl")
    save_checkpoint(model, out / "checkpoint.pt", seed=seed, epoch=history.best_epoch, run_id=cell.run_id)
    records = evaluate_model(model, test_s)
    write_records(records, out / "dice_records.csv")
    done = {
        **cell.as_dict(), "seed": seed, "best_epoch": history.best_epoch,
        "stopped_epoch": history.stopped_epoch, "train_subjects": list(plan.effective_train_subjects),
        "test_subjects": list(plan.test_subjects),
    }
    _atomic_write(out / "done.json", json.dumps(done, indent=2, sort_keys=True))
    return records


def _run_cell_job(cfg, cell):
    torch.set_num_threads(1)
    try:
        run_cell(cfg, cell)
        return cell, None
    except Exception:
        return cell, traceback.format_exc()


def run_grid(cfg: ExperimentConfig, cells=None, jobs: Optional[int] = None, progress=print) -> dict:
    """Run every incomplete cell; returns ``{"completed", "skipped", "failed"}``."""
    cells = grid_cells(cfg) if cells is None else cells
    summary = {"completed": [], "skipped": [], "failed": {}}
    todo = []
    for cell in cells:
        if is_complete(cfg, cell):
            summary["skipped"].append(cell.run_id)
        else:
            todo.append(cell)
    jobs = cfg.jobs if jobs is None else jobs

    def record(cell, err):
        if err is None:
            summary["completed"].append(cell.run_id)
        else:
            summary["failed"][cell.run_id] = err
            (cell_dir(cfg, cell)).mkdir(parents=True, exist_ok=True)
            (cell_dir(cfg, cell) / "error.txt").write_text(err)
            log.error("cell %s failed:\n%s", cell.run_id, err)

    if jobs <= 1:
        slices = load_cache(cfg.output) if todo else []
        for cell in todo:
            try:
                run_cell(cfg, cell, slices, progress=progress)
                record(cell, None)
            except Exception:
                record(cell, traceback.format_exc())
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for cell, err in pool.map(_run_cell_job, [cfg] * len(todo), todo):
                record(cell, err)
    return summary


def evaluate_cell(cfg: ExperimentConfig, cell: Cell, slices=None) -> list[DiceRecord]:
    """Re-evaluate a finished cell's checkpoint and rewrite its Dice records."""
    slices = load_cache(cfg.output) if slices is None else slices
    model, _ = load_checkpoint(cell_dir(cfg, cell) / "checkpoint.pt")
    _, _, _, test_s = split_for(cfg, slices, cell)
    records = evaluate_model(model, test_s)
    write_records(records, cell_dir(cfg, cell) / "dice_records.csv")
    return records


# --------------------------------------------------------------------- reports

COLUMN_GROUPS = (("", 1), ("Concatenation (raw)", 3), ("Concatenation (MLP)", 3), ("FiLM", 2))
COLUMN_LABELS = ("Baseline", "Early", "Middle", "Late", "Early", "Middle", "Late", "Decoder", "Late")


@dataclass
class TableCell:
    variant: str
    mean: Optional[float] = None
    std: Optional[float] = None
    n: int = 0
    t_statistic: Optional[float] = None
    p_value: Optional[float] = None
    significant: bool = False
    best: bool = False


def collect_results(results_dir) -> dict:
    """``{(architecture, fraction, variant): {(repeat, subject, phase): record}}``."""
    results = {}
    for done in sorted(Path(results_dir, "cells").glob("*/done.json")):
        meta = json.loads(done.read_text())
        key = (meta["architecture"], float(meta["fraction"]), meta["variant"])
        recs = read_records(done.parent / "dice_records.csv")
        bucket = results.setdefault(key, {})
        for r in recs:
            bucket[(int(meta["repeat"]), r.subject_id, r.phase)] = r
    return results


def build_table(results: dict, architecture: str, fractions=None, variants=VARIANTS) -> dict:
    fractions = fractions or sorted({k[1] for k in results if k[0] == architecture}, reverse=True)
    table = {}
    for frac in fractions:
        row = []
        baseline = results.get((architecture, frac, "baseline"))
        if baseline is None:
            log.warning("%s fraction %g: no baseline, significance markers omitted", architecture, frac)
        for variant in variants:
            recs = results.get((architecture, frac, variant))
            cell = TableCell(variant)
            if recs:
                cell.mean, cell.std = aggregate(list(recs.values()))
                cell.n = len(recs)
                if baseline is not None and variant != "baseline":
                    keys = sorted(set(recs) & set(baseline))
                    if len(keys) >= 2:
                        res = compare(variant, "baseline", [recs[k].mean_dice for k in keys],
                                      [baseline[k].mean_dice for k in keys], NUM_COMPARISONS)
                        cell.t_statistic, cell.p_value, cell.significant = res.t_statistic, res.p_value, res.significant
            row.append(cell)
        done = [c for c in row if c.mean is not None]
        if done:
            # first maximal column wins ties
            max(done, key=lambda c: c.mean).best = True
        table[frac] = row
    return table


def _fmt(x: float) -> str:
    s = f"{x:.3f}"
    return s[1:] if s.startswith("0") else s


def format_table(table: dict, architecture: str) -> str:
    """Aligned text table; ``[x]`` marks the best cell, ``*`` significance."""
    header1 = ["Fraction"] + [g for g, n in COLUMN_GROUPS for _ in range(n)]
    header2 = [""] + list(COLUMN_LABELS)
    rows = []
    for frac, row in table.items():
        cells = [f"{100 * frac:g}%"]
        for c in row:
            if c.mean is None:
                cells.append("—")
                continue
            mean = _fmt(c.mean)
            if c.best:
                mean = f"[{mean}]"
            cells.append(f"{mean}{'*' if c.significant else ''} ±{_fmt(c.std)}")
        rows.append(cells)
    widths = [max(len(r[i]) for r in [header1, header2] + rows) for i in range(len(header2))]
    line = lambda cells: " | ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()  # noqa: E731
    sep = "-+-".join("-" * w for w in widths)
    out = [f"{architecture}", line(header1), line(header2), sep] + [line(r) for r in rows]
    return "\n".join(out) + "\n"


def write_table_csv(table: dict, architecture: str, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["architecture", "fraction", "variant", "n", "mean", "std", "t_statistic", "p_value",
                    "significant", "best"])
        for frac, row in table.items():
            for c in row:
                fmt = lambda x: "" if x is None else repr(float(x))  # noqa: E731
                w.writerow([architecture, repr(frac), c.variant, c.n, fmt(c.mean), fmt(c.std),
                            fmt(c.t_statistic), fmt(c.p_value), int(c.significant), int(c.best)])


def report(results_dir, architectures=ARCHITECTURES, fractions=None) -> dict:
    """Write one table per architecture under ``<results_dir>/reports``."""
    results = collect_results(results_dir)
    out = Path(results_dir) / "reports"
    out.mkdir(parents=True, exist_ok=True)
    tables = {}
    for arch in architectures:
        if not any(k[0] == arch for k in results):
            continue
        table = build_table(results, arch, fractions)
        tables[arch] = table
        (out / f"{arch}.txt").write_text(format_table(table, arch))
        write_table_csv(table, arch, out / f"{arch}.csv")
        comps = []
        for frac, row in table.items():
            for c in row:
                if c.p_value is not None:
                    comps.append(ComparisonResult(f"{c.variant}@{frac:g}", "baseline", c.t_statistic, c.p_value,
                                                  **bonferroni_decide(c.p_value)))
        write_comparisons(comps, out / f"{arch}_comparisons.csv")
    return tables
