"""Config resolution, run directories, and the campaigns behind each CLI command.

Every command resolves one JSON config (defaults, then the file, then dotted
overrides), validates it before touching the disk, and writes into a fresh
``runs/<name>/`` directory whose ``manifest.json`` lists every artifact.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .attribution import PAPER_ROSTER, get_method, method_group, method_label
from .data import Dataset, GroundTruth, SyntheticSpec, generate, load_dataset, load_idx, normalize, save_dataset, train_eval_split
from .errors import ConfigError, FormatError, NumericFault
from .models import Model, ModelConfig, TrainConfig, accuracy, finetune_in_domain, train
from .patches import Baseline, PatchGrid
from .plotting import plot_ranking
from . import protocols

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
WORKERS_ENV = "IDSDS_WORKERS"
STABILITY_AXES = ("seeds", "num_patches", "baselines")


# config


def default_model_entry() -> dict:
    mc = ModelConfig("cnn", depth=4, use_batchnorm=True).to_dict()
    for k in ("input_shape", "num_classes"):
        mc.pop(k)
    return {
        "name": "cnn",
        "model": mc,
        "train": TrainConfig(epochs=10, lr=0.05, lr_decay_every=7).to_dict(),
        "finetune": TrainConfig(epochs=4, lr=0.01, lr_decay_every=100, seed=1).to_dict(),
        "weights": None,
        "finetuned_weights": None,
    }


def default_config() -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "name": "run",
        "runs_dir": "runs",
        "seed": 0,
        "data": {
            "source": "synthetic",
            "synthetic": SyntheticSpec(image_size=32, num_images=2300).to_dict(),
            "path": None,
            "images": None,
            "labels": None,
            "mean": [0.5, 0.5, 0.5],
            "std": [0.25, 0.25, 0.25],
            "n_eval": 300,
            "eval_limit": 100,
        },
        "grid": {"num_patches": 16},
        "baseline": {"kind": "zero"},
        "models": [default_model_entry()],
        "methods": list(PAPER_ROSTER),
        "softmax_mode": "pre",
        "ids": {"steps": 32, "unit": "pixel"},
        "stability": {"axis": "seeds", "values": [1, 2]},
    }


def _merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(text: str) -> tuple[str, Any]:
    """``a.b.c=value``; the value is read as JSON and falls back to a plain string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key.path=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def set_dotted(cfg: dict, path: str, value: Any) -> None:
    node: Any = cfg
    parts = path.split(".")
    for p in parts[:-1]:
        if isinstance(node, list):
            node = node[_list_index(p, node, path)]
        else:
            if p not in node or not isinstance(node[p], (dict, list)):
                raise ConfigError(f"override path {path!r}: {p!r} is not a config section")
            node = node[p]
    last = parts[-1]
    if isinstance(node, list):
        node[_list_index(last, node, path)] = value
    else:
        node[last] = value


def _list_index(p: str, node: list, path: str) -> int:
    try:
        i = int(p)
    except ValueError:
        raise ConfigError(f"override path {path!r}: {p!r} must index a list") from None
    if not 0 <= i < len(node):
        raise ConfigError(f"override path {path!r}: index {i} out of range")
    return i


def resolve_config(raw: dict | None = None, overrides: Sequence[str] = ()) -> dict:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}; expected {SCHEMA_VERSION}")
    cfg = _merge(default_config(), raw)
    for text in overrides:
        set_dotted(cfg, *parse_override(text))
    cfg["models"] = [_merge(default_model_entry(), m) for m in cfg["models"]]
    validate_config(cfg)
    return cfg


def load_config(path: str | Path | None, overrides: Sequence[str] = ()) -> dict:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return resolve_config(raw, overrides)


def validate_config(cfg: dict) -> None:
    if not isinstance(cfg["name"], str) or not cfg["name"] or "/" in cfg["name"]:
        raise ConfigError(f"run name must be a non-empty string without '/', got {cfg['name']!r}")
    if not cfg["methods"]:
        raise ConfigError("method roster is empty")
    ids = []
    for m in cfg["methods"]:
        ids.append(get_method(m).id)
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate methods in roster: {ids}")
    if cfg["softmax_mode"] not in ("pre", "post"):
        raise ConfigError(f"softmax_mode must be 'pre' or 'post', got {cfg['softmax_mode']!r}")
    Baseline.from_dict(cfg["baseline"])
    np_ = cfg["grid"]["num_patches"]
    if not isinstance(np_, int) or np_ < 1 or int(round(np_**0.5)) ** 2 != np_:
        raise ConfigError(f"grid.num_patches must be a perfect square, got {np_}")
    data = cfg["data"]
    if data["source"] not in ("synthetic", "directory", "idx"):
        raise ConfigError(f"data.source must be synthetic, directory or idx, got {data['source']!r}")
    if data["source"] == "synthetic":
        SyntheticSpec.from_dict(data["synthetic"])
    if data["source"] == "directory" and not data["path"]:
        raise ConfigError("data.source=directory needs data.path")
    if data["source"] == "idx" and not (data["images"] and data["labels"]):
        raise ConfigError("data.source=idx needs data.images and data.labels")
    if not cfg["models"]:
        raise ConfigError("at least one model entry is required")
    names = [m["name"] for m in cfg["models"]]
    if len(set(names)) != len(names) or not all(isinstance(n, str) and n and "/" not in n for n in names):
        raise ConfigError(f"model names must be unique non-empty strings, got {names}")
    for m in cfg["models"]:
        ModelConfig.from_dict({**m["model"], "input_shape": (3, 64, 64), "num_classes": 2})
        TrainConfig.from_dict(m["train"])
        if m["finetune"] is not None:
            TrainConfig.from_dict(m["finetune"])
    if cfg["ids"]["unit"] not in ("pixel", "patch") or int(cfg["ids"]["steps"]) < 2:
        raise ConfigError("ids.unit must be pixel or patch and ids.steps >= 2")
    st = cfg["stability"]
    if st["axis"] not in STABILITY_AXES:
        raise ConfigError(f"stability.axis must be one of {STABILITY_AXES}, got {st['axis']!r}")
    if len(st["values"]) < 1:
        raise ConfigError("stability.values must not be empty")


def config_hash(cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k not in ("name", "runs_dir")}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be >= 1, got {n}")
    return n


# run directories


def timestamp() -> str:
    """UTC time, pinned by SOURCE_DATE_EPOCH when set so manifests can be reproduced."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return t.strftime("%Y-%m-%dT%H:%M:%SZ")


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=True) + "\n"


class RunDir:
    """A run directory that is created once and never rewritten after completion.

    An unfinished run with the same command and config hash may be resumed;
    cells already recorded as done are not recomputed.
    """

    def __init__(self, cfg: dict, command: str, resume: bool = False):
        self.path = Path(cfg["runs_dir"]) / cfg["name"]
        self.command = command
        self.cfg = cfg
        self.hash = config_hash(cfg)
        manifest_path = self.path / "manifest.json"
        if self.path.exists():
            old = json.loads(manifest_path.read_text()) if manifest_path.exists() else None
            if not resume or old is None:
                raise ConfigError(f"run directory {self.path} already exists; pick a new run name")
            if old["status"] == "complete":
                raise ConfigError(f"run {self.path} is complete; pick a new run name")
            if old["command"] != command or old["config_sha256"] != self.hash:
                raise ConfigError(f"run {self.path} was started by a different command or config")
            self.manifest = old
        else:
            self.path.mkdir(parents=True)
            self.manifest = {
                "run": cfg["name"],
                "command": command,
                "schema_version": SCHEMA_VERSION,
                "created": timestamp(),
                "finished": None,
                "status": "running",
                "config": cfg,
                "config_sha256": self.hash,
                "inputs": {},
                "artifacts": {},
                "cells": {},
            }
            self.flush()

    def flush(self) -> None:
        tmp = self.path / "manifest.json.tmp"
        tmp.write_text(dumps_json(self.manifest))
        tmp.replace(self.path / "manifest.json")

    def rel(self, name: str) -> Path:
        return self.path / name

    def write_text(self, name: str, text: str) -> Path:
        p = self.path / name
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text)
        self.manifest["artifacts"][name] = file_sha256(p)
        return p

    def record_file(self, name: str) -> None:
        self.manifest["artifacts"][name] = file_sha256(self.path / name)

    def record_input(self, path: str | Path) -> None:
        self.manifest["inputs"][str(path)] = file_sha256(path)

    def cell_done(self, key: str) -> dict | None:
        rec = self.manifest["cells"].get(key)
        if rec and rec["status"] == "ok":
            return json.loads((self.path / rec["file"]).read_text())
        return None

    def record_cell(self, key: str, status: str, payload: dict | None, message: str = "") -> None:
        rec = {"status": status, "message": message, "file": None}
        if payload is not None:
            name = f"cells/{key}.json"
            self.write_text(name, dumps_json(payload))
            rec["file"] = name
        self.manifest["cells"][key] = rec
        self.flush()

    def finish(self, status: str) -> None:
        self.manifest["status"] = status
        self.manifest["finished"] = timestamp()
        self.flush()


@dataclass
class RunResult:
    status: str
    path: Path | None
    failures: list[tuple[str, str]] = field(default_factory=list)
    outputs: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "complete"


# data and models


def load_data(cfg: dict, run: RunDir | None = None) -> tuple[Dataset, Dataset, GroundTruth | None]:
    """Full training set and the (possibly truncated) evaluation set."""
    d = cfg["data"]
    gt = None
    if d["source"] == "synthetic":
        ds, gt = generate(SyntheticSpec.from_dict(d["synthetic"]))
    elif d["source"] == "directory":
        path = Path(d["path"])
        if not path.is_dir():
            raise ConfigError(f"data directory {path} does not exist")
        ds, gt = load_dataset(path)
        if run:
            for f in sorted(path.iterdir()):
                run.record_input(f)
    else:
        for p in (d["images"], d["labels"]):
            if not Path(p).exists():
                raise ConfigError(f"idx file {p} does not exist")
            if run:
                run.record_input(p)
        ds = normalize(load_idx(d["images"], d["labels"]), d["mean"], d["std"])
    tr, ev = train_eval_split(ds, int(d["n_eval"]))
    limit = d.get("eval_limit")
    return tr, ev if limit is None else ev.head(int(limit)), gt


def num_classes_of(cfg: dict, ds: Dataset) -> int:
    if cfg["data"]["source"] == "synthetic":
        return int(cfg["data"]["synthetic"]["num_classes"])
    return int(ds.labels.max()) + 1


def model_config_for(entry: dict, image_shape, num_classes: int) -> ModelConfig:
    return ModelConfig.from_dict({**entry["model"], "input_shape": list(image_shape), "num_classes": num_classes})


def grid_for(cfg: dict, image_shape, num_patches: int | None = None) -> PatchGrid:
    _, h, w = image_shape
    return PatchGrid.for_image(num_patches or cfg["grid"]["num_patches"], h, w)


@dataclass
class PreparedModel:
    name: str
    base: Model
    finetuned: Model | None
    history: dict


def _obtain(run: RunDir | None, rel: str, make: Callable[[], tuple[Model, list]], manifest: dict) -> tuple[Model, list]:
    """Load ``rel`` from the run directory when resuming, otherwise build and save it."""
    if run is not None and rel in run.manifest["artifacts"] and run.rel(rel).exists():
        return Model.load(run.rel(rel)), []
    model, history = make()
    if run is not None:
        run.rel(rel).parent.mkdir(parents=True, exist_ok=True)
        model.save(run.rel(rel), manifest)
        run.record_file(rel)
        run.record_file(rel[: -len(".atb")] + ".json")
        run.flush()
    return model, history


def prepare_models(
    cfg: dict,
    train_ds: Dataset,
    run: RunDir | None = None,
    need_finetuned: bool = True,
    grid: PatchGrid | None = None,
    baseline: Baseline | None = None,
    finetune_seed: int | None = None,
    suffix: str = "",
    bases: dict[str, tuple[Model, list]] | None = None,
) -> list[PreparedModel]:
    """Train (or load) each configured model and its deletion-fine-tuned copy.

    ``bases`` memoizes base models across calls that only vary the fine-tuning.
    """
    grid = grid or grid_for(cfg, train_ds.image_shape)
    baseline = baseline or Baseline.from_dict(cfg["baseline"])
    n_classes = num_classes_of(cfg, train_ds)
    out = []
    for entry in cfg["models"]:
        mc = model_config_for(entry, train_ds.image_shape, n_classes)
        tc = TrainConfig.from_dict(entry["train"])
        hist: dict = {}

        def make_base():
            if entry["weights"]:
                if run:
                    run.record_input(entry["weights"])
                return Model.load(entry["weights"]), []
            res = train(mc, tc, train_ds)
            return res.model, res.history

        if bases is not None and entry["name"] in bases:
            base, hist["train"] = bases[entry["name"]]
        else:
            base, hist["train"] = _obtain(run, f"models/{entry['name']}.atb", make_base, {"train": tc.to_dict()})
            if bases is not None:
                bases[entry["name"]] = (base, hist["train"])
        ft = None
        if need_finetuned:
            if entry["finetuned_weights"] and finetune_seed is None and suffix == "":
                if run:
                    run.record_input(entry["finetuned_weights"])
                ft = Model.load(entry["finetuned_weights"])
            else:
                if entry["finetune"] is None:
                    raise ConfigError(f"model {entry['name']!r} has no finetune settings")
                fc = TrainConfig.from_dict(entry["finetune"])
                if finetune_seed is not None:
                    fc = TrainConfig.from_dict({**fc.to_dict(), "seed": int(finetune_seed)})

                def make_ft():
                    res = finetune_in_domain(base, fc, train_ds, grid, baseline)
                    return res.model, res.history

                meta = {"finetune": fc.to_dict(), "grid": grid.num_patches, "baseline": baseline.to_dict()}
                ft, hist["finetune"] = _obtain(run, f"models/{entry['name']}-ft{suffix}.atb", make_ft, meta)
        out.append(PreparedModel(entry["name"], base, ft, hist))
    return out


# cells


def _run_cells(run: RunDir, jobs: list[tuple[str, Callable, tuple]]) -> tuple[dict[str, dict], list[tuple[str, str]]]:
    """Evaluate independent cells, serially or in a process pool; results keyed by cell name."""
    results: dict[str, dict] = {}
    failures: list[tuple[str, str]] = []
    pending = []
    for key, fn, args in jobs:
        done = run.cell_done(key)
        if done is not None:
            results[key] = done
        else:
            pending.append((key, fn, args))
    n_workers = min(worker_count(), max(1, len(pending)))

    def settle(key, get):
        try:
            payload = get()
        except (ConfigError, NumericFault, FormatError, FloatingPointError, ValueError) as exc:
            log.error("cell %s failed: %s", key, exc)
            failures.append((key, f"{type(exc).__name__}: {exc}"))
            run.record_cell(key, "failed", None, f"{type(exc).__name__}: {exc}")
            return
        results[key] = payload
        run.record_cell(key, "ok", payload)

    if n_workers == 1:
        for key, fn, args in pending:
            settle(key, lambda: fn(*args))
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            futures = [(key, pool.submit(fn, *args)) for key, fn, args in pending]
            for key, fut in futures:
                settle(key, fut.result)
    return results, failures


def _idsds_cell(model, eval_ds, method, grid, baseline, softmax_mode, seed, protocol) -> dict:
    reports = protocols.single_deletion_scores(model, eval_ds, [method], grid, baseline, softmax_mode, seed, protocol)
    return next(iter(reports.values())).to_dict()


def _ids_cell(model, eval_ds, method, grid, baseline, steps, mode, softmax_mode, seed) -> dict:
    return protocols.ids(model, eval_ds, method, grid, baseline, steps, mode, "descending", softmax_mode, seed).to_dict()


def _cell_key(*parts: str) -> str:
    return "__".join(parts)


# tables


def fmt_score(v: float | None) -> str:
    return "" if v is None or not np.isfinite(v) else f"{v:.6f}"


def ranking_rows(scores: dict[str, dict[str, float | None]], methods: Sequence[str]) -> list[dict]:
    """One row per method with a score per column and their mean, sorted by mean (desc)."""
    cols = list(scores)
    rows = []
    for m in methods:
        vals = [scores[c].get(m) for c in cols]
        finite = [v for v in vals if v is not None and np.isfinite(v)]
        rows.append(
            {
                "method": m,
                "label": method_label(m),
                "group": method_group(m),
                **{c: v for c, v in zip(cols, vals)},
                "mean": float(np.mean(finite)) if finite else None,
            }
        )
    rows.sort(key=lambda r: (-(r["mean"] if r["mean"] is not None else -np.inf), r["method"]))
    for i, r in enumerate(rows):
        r["rank"] = i + 1
    return rows


def ranking_csv(rows: list[dict], cols: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "method", "label", "group", *cols, "mean"])
    for r in rows:
        w.writerow([r["rank"], r["method"], r["label"], r["group"], *[fmt_score(r[c]) for c in cols], fmt_score(r["mean"])])
    return buf.getvalue()


COMPARE_COLUMNS = ("IDSDS", "SDS", "IDS(fixed)", "IDS(updated)")


def comparison_table(rows: dict[str, dict[str, float | None]], methods: Sequence[str]) -> str:
    """Protocol-comparison table with three-decimal scores, one row per method."""
    width = max(12, *(len(method_label(m)) for m in methods)) + 2
    head = "Method".ljust(width) + "".join(c.rjust(14) for c in COMPARE_COLUMNS)
    lines = [head, "-" * len(head)]
    for m in methods:
        cells = []
        for c in COMPARE_COLUMNS:
            v = rows[m].get(c)
            cells.append(("n/a" if v is None or not np.isfinite(v) else f"{v:.3f}").rjust(14))
        lines.append(method_label(m).ljust(width) + "".join(cells))
    return "\n".join(lines) + "\n"


def comparison_csv(rows: dict[str, dict[str, float | None]], methods: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "label", "group", *COMPARE_COLUMNS])
    for m in methods:
        w.writerow([m, method_label(m), method_group(m), *[fmt_score(rows[m].get(c)) for c in COMPARE_COLUMNS]])
    return buf.getvalue()


def status_table(manifest: dict) -> str:
    """Per-cell status lines of a campaign manifest."""
    lines = [f"{'cell':<48} status"]
    for key in sorted(manifest["cells"]):
        rec = manifest["cells"][key]
        lines.append(f"{key:<48} {rec['status']}{' (' + rec['message'] + ')' if rec['message'] else ''}")
    return "\n".join(lines) + "\n"


def _finish(run: RunDir, failures, outputs) -> RunResult:
    status = "partial" if failures else "complete"
    run.finish(status)
    return RunResult(status, run.path, failures, outputs)


# commands


def run_gen_data(cfg: dict, resume: bool = False) -> RunResult:
    if cfg["data"]["source"] != "synthetic":
        raise ConfigError("gen-data needs data.source=synthetic")
    run = RunDir(cfg, "gen-data", resume)
    ds, gt = generate(SyntheticSpec.from_dict(cfg["data"]["synthetic"]))
    paths = save_dataset(ds, gt, run.rel("data"))
    for p in paths.values():
        run.record_file(str(Path(p).relative_to(run.path)))
    summary = {"num_images": len(ds), "image_shape": list(ds.image_shape), "class_counts": np.bincount(ds.labels).tolist()}
    run.write_text("report.json", dumps_json(summary))
    return _finish(run, [], {"data": str(run.rel("data"))})


def _accuracy_report(prepared: list[PreparedModel], eval_ds: Dataset, grid: PatchGrid, baseline: Baseline) -> dict:
    out = {}
    for pm in prepared:
        entry = {"sha256": pm.base.content_hash(), "accuracy": accuracy(pm.base, eval_ds), "history": pm.history}
        ca = protocols.corrupted_accuracy(pm.base, eval_ds, grid, baseline)
        entry["corrupted"] = {"uncorrupted": ca.uncorrupted, "worst_patch": ca.worst_patch}
        if pm.finetuned is not None:
            cf = protocols.corrupted_accuracy(pm.finetuned, eval_ds, grid, baseline)
            entry["finetuned"] = {
                "sha256": pm.finetuned.content_hash(),
                "accuracy": accuracy(pm.finetuned, eval_ds),
                "corrupted": {"uncorrupted": cf.uncorrupted, "worst_patch": cf.worst_patch},
            }
        out[pm.name] = entry
    return out


def _run_training(cfg: dict, command: str, resume: bool) -> RunResult:
    run = RunDir(cfg, command, resume)
    tr, ev, _ = load_data(cfg, run)
    grid = grid_for(cfg, tr.image_shape)
    baseline = Baseline.from_dict(cfg["baseline"])
    prepared = prepare_models(cfg, tr, run, need_finetuned=(command == "finetune"), grid=grid, baseline=baseline)
    run.write_text("report.json", dumps_json({"models": _accuracy_report(prepared, ev, grid, baseline)}))
    return _finish(run, [], {p.name: str(run.rel(f"models/{p.name}.atb")) for p in prepared})


def run_train(cfg: dict, resume: bool = False) -> RunResult:
    return _run_training(cfg, "train", resume)


def run_finetune(cfg: dict, resume: bool = False) -> RunResult:
    return _run_training(cfg, "finetune", resume)


def run_eval(cfg: dict, resume: bool = False) -> RunResult:
    """IDSDS for every (model, method) cell; writes report.json, ranking.csv and plot.svg."""
    run = RunDir(cfg, "eval", resume)
    tr, ev, _ = load_data(cfg, run)
    grid = grid_for(cfg, tr.image_shape)
    baseline = Baseline.from_dict(cfg["baseline"])
    prepared = prepare_models(cfg, tr, run, grid=grid, baseline=baseline)
    methods = [get_method(m).id for m in cfg["methods"]]
    jobs = []
    for pm in prepared:
        for m in methods:
            args = (pm.finetuned, ev, m, grid, baseline, cfg["softmax_mode"], cfg["seed"], "IDSDS")
            jobs.append((_cell_key(pm.name, m), _idsds_cell, args))
    results, failures = _run_cells(run, jobs)
    scores = {pm.name: {m: _agg(results.get(_cell_key(pm.name, m))) for m in methods} for pm in prepared}
    reports = {pm.name: {m: results.get(_cell_key(pm.name, m)) for m in methods} for pm in prepared}
    rows = ranking_rows(scores, methods)
    cols = [pm.name for pm in prepared]
    run.write_text("report.json", dumps_json({"protocol": "IDSDS", "scores": scores, "reports": reports}))
    run.write_text("ranking.csv", ranking_csv(rows, cols))
    run.write_text("plot.svg", plot_ranking([(r["method"], r["mean"]) for r in rows if r["mean"] is not None]))
    return _finish(run, failures, {"scores": scores, "rows": rows})


def _agg(payload: dict | None) -> float | None:
    return None if payload is None else payload["aggregate"]


def run_compare(cfg: dict, resume: bool = False) -> RunResult:
    """IDSDS, SDS, IDS(fixed) and IDS(updated) side by side for each method."""
    run = RunDir(cfg, "compare", resume)
    tr, ev, _ = load_data(cfg, run)
    grid = grid_for(cfg, tr.image_shape)
    baseline = Baseline.from_dict(cfg["baseline"])
    prepared = prepare_models(cfg, tr, run, grid=grid, baseline=baseline)
    methods = [get_method(m).id for m in cfg["methods"]]
    ids_grid = grid if cfg["ids"]["unit"] == "patch" else None
    steps = int(cfg["ids"]["steps"])
    sm, seed = cfg["softmax_mode"], cfg["seed"]
    jobs = []
    for pm in prepared:
        for m in methods:
            jobs.append((_cell_key(pm.name, m, "IDSDS"), _idsds_cell, (pm.finetuned, ev, m, grid, baseline, sm, seed, "IDSDS")))
            jobs.append((_cell_key(pm.name, m, "SDS"), _idsds_cell, (pm.base, ev, m, grid, baseline, sm, seed, "SDS")))
            for mode in ("fixed", "updated"):
                args = (pm.base, ev, m, ids_grid, baseline, steps, mode, sm, seed)
                jobs.append((_cell_key(pm.name, m, f"IDS({mode})"), _ids_cell, args))
    results, failures = _run_cells(run, jobs)
    tables = {}
    text = []
    summary = {}
    for pm in prepared:
        rows = {m: {c: _agg(results.get(_cell_key(pm.name, m, c))) for c in COMPARE_COLUMNS} for m in methods}
        summary[pm.name] = rows
        tables[pm.name] = comparison_table(rows, methods)
        run.write_text(f"compare-{pm.name}.csv", comparison_csv(rows, methods))
        text.append(f"model {pm.name}\n{tables[pm.name]}")
    run.write_text("compare.txt", "\n".join(text))
    reports = {k: results.get(k) for k, _, _ in jobs}
    run.write_text("report.json", dumps_json({"protocol": "compare", "scores": summary, "reports": reports}))
    idsds_scores = {pm.name: {m: summary[pm.name][m]["IDSDS"] for m in methods} for pm in prepared}
    rows = ranking_rows(idsds_scores, methods)
    run.write_text("ranking.csv", ranking_csv(rows, [pm.name for pm in prepared]))
    run.write_text("plot.svg", plot_ranking([(r["method"], r["mean"]) for r in rows if r["mean"] is not None]))
    return _finish(run, failures, {"scores": summary, "tables": tables})


def stability_conditions(cfg: dict) -> list[tuple[str, dict]]:
    """(label, overrides) per value of the varied axis."""
    st = cfg["stability"]
    out = []
    for v in st["values"]:
        if st["axis"] == "seeds":
            out.append((f"seed={v}", {"finetune_seed": int(v)}))
        elif st["axis"] == "num_patches":
            out.append((f"P={v}", {"num_patches": int(v)}))
        else:
            b = Baseline.from_dict(v)
            out.append((b.label, {"baseline": b}))
    labels = [lab for lab, _ in out]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"stability values repeat: {labels}")
    return out


def _stability_cell(model, eval_ds, methods, grid, baseline, softmax_mode, seed) -> dict:
    reports = protocols.single_deletion_scores(model, eval_ds, methods, grid, baseline, softmax_mode, seed)
    return {"scores": {m: r.aggregate for m, r in reports.items()}, "degenerate": {m: r.degenerate_count for m, r in reports.items()}}


def stability_suite(cfg: dict, run: RunDir | None = None, prepared_data=None) -> dict:
    """IDSDS of the roster under each condition and the ranking correlation between conditions."""
    if len(cfg["models"]) != 1:
        raise ConfigError("the stability suite varies one model; give exactly one model entry")
    tr, ev, _ = prepared_data or load_data(cfg, run)
    methods = [get_method(m).id for m in cfg["methods"]]
    if len(methods) < 2:
        raise ConfigError("ranking correlations need at least two methods")
    default_baseline = Baseline.from_dict(cfg["baseline"])
    jobs = []
    bases: dict = {}
    for i, (label, cond) in enumerate(stability_conditions(cfg)):
        grid = grid_for(cfg, tr.image_shape, cond.get("num_patches"))
        baseline = cond.get("baseline", default_baseline)
        pm = prepare_models(
            cfg, tr, run, grid=grid, baseline=baseline, finetune_seed=cond.get("finetune_seed"), suffix=f"-c{i}", bases=bases
        )[0]
        jobs.append((label, _stability_cell, (pm.finetuned, ev, methods, grid, baseline, cfg["softmax_mode"], cfg["seed"])))
    if run is not None:
        results, failures = _run_cells(run, jobs)
    else:
        results = {label: fn(*args) for label, fn, args in jobs}
        failures = []
    scores = {label: results[label]["scores"] for label, _, _ in jobs if label in results}
    corr = protocols.ranking_correlations(scores) if scores else {}
    return {"axis": cfg["stability"]["axis"], "methods": methods, "scores": scores, "correlations": corr, "failures": failures}


def run_stability(cfg: dict, resume: bool = False) -> RunResult:
    run = RunDir(cfg, "stability", resume)
    out = stability_suite(cfg, run)
    failures = out.pop("failures")
    cols = list(out["scores"])
    rows = ranking_rows(out["scores"], out["methods"])
    run.write_text("report.json", dumps_json({"protocol": "IDSDS stability", **out}))
    run.write_text("ranking.csv", ranking_csv(rows, cols))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["condition", *cols])
    for a in cols:
        w.writerow([a, *[fmt_score(out["correlations"][a][b]) for b in cols]])
    run.write_text("correlations.csv", buf.getvalue())
    run.write_text("plot.svg", plot_ranking([(r["method"], r["mean"]) for r in rows if r["mean"] is not None]))
    return _finish(run, failures, out)


def render_report(run_path: str | Path) -> str:
    """Human-readable summary of a finished run (read-only)."""
    run_path = Path(run_path)
    mf = run_path / "manifest.json"
    if not mf.exists():
        raise ConfigError(f"{run_path} is not a run directory (no manifest.json)")
    manifest = json.loads(mf.read_text())
    lines = [f"run {manifest['run']} ({manifest['command']}, {manifest['status']})"]
    if (run_path / "compare.txt").exists():
        lines.append((run_path / "compare.txt").read_text().rstrip("\n"))
    elif (run_path / "ranking.csv").exists():
        with open(run_path / "ranking.csv") as fh:
            rows = list(csv.reader(fh))
        head, body = rows[0], rows[1:]
        cols = head[4:]
        lines.append(f"{'rank':>4}  {'method':<14}" + "".join(f"{c:>12}" for c in cols))
        for r in body:
            vals = "".join(f"{(f'{float(v):.3f}' if v else 'n/a'):>12}" for v in r[4:])
            lines.append(f"{r[0]:>4}  {r[2]:<14}" + vals)
    if (run_path / "correlations.csv").exists():
        lines.append("ranking correlations")
        lines.append((run_path / "correlations.csv").read_text().rstrip("\n"))
    if manifest["cells"]:
        failed = [k for k, v in manifest["cells"].items() if v["status"] != "ok"]
        lines.append(f"{len(manifest['cells']) - len(failed)} cells ok, {len(failed)} failed")
    return "\n".join(lines) + "\n"


COMMANDS = {
    "gen-data": run_gen_data,
    "train": run_train,
    "finetune": run_finetune,
    "eval": run_eval,
    "compare": run_compare,
    "stability": run_stability,
}
