"""Workspace layout, foundation pretraining and the three ablation tables.

A workspace directory holds::

    data/                         generated corpora + manifest.json
    foundation/frontend-<tier>.ckpt, backend-<tier>.ckpt
    runs/<fe>-<be>/s1-<data>/seed<k>/    stage-1 checkpoints, metrics, eval
    runs/<fe>-<be>/s2-<from>/seed<k>/    stage-2 (from = st, asr or cold)
    reports/

Cells are cached: a finished cell is reused when its config fingerprint
matches, so strategy (a) and the ctc / mt ablation rows share strategy (d)'s
runs instead of retraining them.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, load_into, save_checkpoint
from .config import Config
from .data import World, build_language, generate_world
from .decoding import evaluate
from .errors import ConfigError, UsageError
from .model import LSTModel, ModelConfig
from .training import (BACKEND_TIERS, FRONTEND_TIERS, StageConfig, make_encoded, pretrain_backend,
                       pretrain_frontend, train_stage)

log = logging.getLogger(__name__)

# label -> (stage-1 data or None, run stage 2)
STRATEGIES: dict[str, tuple[str | None, bool]] = {
    "a": ("st", False),
    "b": (None, True),
    "c": ("asr", True),
    "d": ("st", True),
}


class PrerequisiteError(UsageError):
    """A corpus or foundation checkpoint the command depends on is missing."""


def _fingerprint(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _write_json(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True), encoding="utf-8")
    os.replace(tmp, path)


class Workspace:
    def __init__(self, root, cfg: Config):
        self.root = Path(root)
        self.cfg = cfg
        self.data_dir = self.root / "data"
        self.foundation_dir = self.root / "foundation"
        self.runs_dir = self.root / "runs"
        self.reports_dir = self.root / "reports"
        self._world: World | None = None

    # -- prerequisites -------------------------------------------------------------
    def world(self) -> World:
        if self._world is None:
            if not (self.data_dir / "manifest.json").exists():
                raise PrerequisiteError(f"no corpora under {self.data_dir}; run gen-data first")
            self._world = World(self.data_dir)
        return self._world

    def foundation_path(self, part: str, tier: str) -> Path:
        return self.foundation_dir / f"{part}-{tier}.ckpt"

    def rel(self, path) -> str:
        """Workspace-relative form stored in cell records and reports."""
        return Path(path).relative_to(self.root).as_posix()

    def path(self, rel: str) -> Path:
        return self.root / rel

    def require(self, part: str, tier: str) -> Path:
        path = self.foundation_path(part, tier)
        if not path.exists():
            raise PrerequisiteError(f"missing {part} checkpoint {path}; run pretrain-{part} --tier {tier}")
        return path

    def prepare(self, frontends: Sequence[str] = (), backends: Sequence[str] = ()) -> None:
        """Generate data and pretrain the listed tiers, skipping what exists."""
        if not (self.data_dir / "manifest.json").exists():
            gen_data(self.cfg, self.data_dir)
        for tier in frontends:
            if not self.foundation_path("frontend", tier).exists():
                pretrain_part(self.cfg, "frontend", tier, self.world(), self.foundation_dir)
        for tier in backends:
            if not self.foundation_path("backend", tier).exists():
                pretrain_part(self.cfg, "backend", tier, self.world(), self.foundation_dir)

    # -- models --------------------------------------------------------------------
    def base_model(self, frontend: str, backend: str, seed: int) -> LSTModel:
        """Seeded model with the frontend and backend foundation tiers loaded."""
        fe_path, be_path = self.require("frontend", frontend), self.require("backend", backend)
        model = LSTModel.create(self.cfg.model(), seed=seed)
        load_into(model.store, load_checkpoint(fe_path), ["frontend"])
        load_into(model.store, load_checkpoint(be_path), ["backend"])
        return model


def gen_data(cfg: Config, out_dir) -> Path:
    spec = build_language(cfg.world_seed, cfg.n_source, cfg.d_frames, cfg.noise)
    return generate_world(out_dir, spec, cfg.sizes(), cfg.world_seed, preset=cfg.preset)


def pretrain_part(cfg: Config, part: str, tier: str, world: World, out_dir) -> tuple[Path, dict]:
    """Pretrain one foundation tier and save a ``part``-only checkpoint."""
    tiers = FRONTEND_TIERS if part == "frontend" else BACKEND_TIERS
    if tier not in tiers:
        raise ConfigError(f"unknown {part} tier {tier!r} (choose from {', '.join(tiers)})")
    model = LSTModel.create(cfg.model(), seed=cfg.model_seed)
    pcfg = cfg.pretrain(part)
    if part == "frontend":
        train = dev = None
        if tier != "random":
            train, dev = world.corpus("asr.train"), world.corpus("asr.dev")
        summary = pretrain_frontend(model, tier, pcfg, train, dev)
    else:
        train = dev = None
        if tier != "random":
            train, dev = world.corpus("text.train"), world.corpus("text.dev")
        summary = pretrain_backend(model, tier, pcfg, train, dev)
    summary.setdefault("provenance", "pretrained")
    meta = {"part": part, "tier": tier, "provenance": summary["provenance"], "summary": summary,
            "pretrain_config": pcfg.to_dict(), "model": cfg.model().to_dict(), "preset": cfg.preset}
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = save_checkpoint(Checkpoint.from_store(model.store, [part], meta=meta),
                           out_dir / f"{part}-{tier}.ckpt")
    return path, summary


def model_from_checkpoint(path) -> LSTModel:
    """Rebuild a full model from a checkpoint that records its model config."""
    ck = load_checkpoint(path)
    if "model" not in ck.meta:
        raise ConfigError(f"{path} does not record a model config")
    model = LSTModel.create(ModelConfig.from_dict(ck.meta["model"]), seed=0)
    load_into(model.store, ck)
    return model


# -- cells ---------------------------------------------------------------------------

@dataclass
class CellResult:
    """Paths are relative to the workspace root."""

    bleu: float | None
    checkpoint: str
    metrics: str
    eval_json: str | None
    cached: bool = False


def _run_stage(ws: Workspace, model: LSTModel, stage: int, data: str, seed: int, out: Path,
               evaluate_test: bool, meta: dict, force: bool, encoded: dict) -> CellResult:
    cfg = ws.cfg
    scfg = cfg.stage(stage, data, seed)
    tag = f"stage{stage}"
    key = _fingerprint({"config": cfg.to_dict(), "stage": scfg.to_dict(), "meta": meta,
                        "eval": evaluate_test})
    done = out / "cell.json"
    if not force and done.exists():
        rec = json.loads(done.read_text(encoding="utf-8"))
        if rec.get("key") == key:
            load_into(model.store, load_checkpoint(ws.path(rec["checkpoint"])))
            return CellResult(rec["bleu"], rec["checkpoint"], rec["metrics"], rec["eval_json"], cached=True)
    world = ws.world()
    if data not in encoded:
        encoded[data] = (make_encoded(model, world.corpus(f"{data}.train"), data),
                         make_encoded(model, world.corpus(f"{data}.dev"), data))
    train, dev = encoded[data]
    res = train_stage(model, scfg, train, dev, out_dir=out, tag=tag, meta=meta)
    bleu = eval_json = None
    if evaluate_test:
        ev = evaluate(model, world.corpus("st.test"), beam=cfg.beam, max_len=cfg.max_len,
                      n_buckets=cfg.n_buckets)
        eval_json = str(out / f"{tag}.eval.json")
        ev.write(eval_json, out / f"{tag}.eval.tsv")
        bleu = ev.report.bleu
    rec = {"key": key, "bleu": bleu, "checkpoint": ws.rel(res.final_checkpoint),
           "metrics": ws.rel(out / f"{tag}.metrics.csv"), "eval_json": eval_json and ws.rel(eval_json)}
    _write_json(done, rec)
    return CellResult(bleu, rec["checkpoint"], rec["metrics"], rec["eval_json"])


def run_pipeline(ws: Workspace, frontend: str, backend: str, strategy: str, seed: int,
                 force: bool = False) -> dict:
    """Run (or reuse) the stage sequence of one strategy for one seed."""
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r} (choose from a, b, c, d)")
    s1_data, do_s2 = STRATEGIES[strategy]
    model = ws.base_model(frontend, backend, seed)
    cell_dir = ws.runs_dir / f"{frontend}-{backend}"
    meta = {"frontend": frontend, "backend": backend, "seed": seed,
            "provenance": {"frontend": _provenance(ws, "frontend", frontend),
                           "backend": _provenance(ws, "backend", backend)},
            # re-pretraining a foundation invalidates every cell built on it
            "foundation_sha256": [_file_digest(ws.require("frontend", frontend)),
                                  _file_digest(ws.require("backend", backend))]}
    encoded: dict = {}
    row: dict = {"seed": seed, "stage1": None, "stage2": None}
    if s1_data is not None:
        r1 = _run_stage(ws, model, 1, s1_data, seed, cell_dir / f"s1-{s1_data}" / f"seed{seed}",
                        s1_data == "st", {**meta, "stage1_data": s1_data}, force, encoded)
        row["stage1"] = r1.bleu
        row["stage1_checkpoint"], row["stage1_metrics"] = r1.checkpoint, r1.metrics
    if do_s2:
        src = s1_data or "cold"
        r2 = _run_stage(ws, model, 2, "st", seed, cell_dir / f"s2-{src}" / f"seed{seed}", True,
                        {**meta, "stage1_data": s1_data}, force, encoded)
        row["stage2"] = r2.bleu
        row["stage2_checkpoint"], row["stage2_metrics"] = r2.checkpoint, r2.metrics
    return row


def _file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _provenance(ws: Workspace, part: str, tier: str) -> str:
    ck = load_checkpoint(ws.require(part, tier))
    return ck.meta.get("provenance", "init-only" if tier == "random" else "pretrained")


# -- reports ---------------------------------------------------------------------------

@dataclass
class AblationReport:
    kind: str
    seeds: list[int]
    preset: str
    rows: list[dict] = field(default_factory=list)

    def row(self, name: str) -> dict:
        for r in self.rows:
            if r["name"] == name:
                return r
        raise KeyError(name)

    def mean(self, name: str, stage: int) -> float | None:
        return self.row(name)[f"mean_stage{stage}"]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "seeds": self.seeds, "preset": self.preset, "rows": self.rows}

    def table(self) -> str:
        """Tab-separated summary with '-' where a stage was not run."""
        fmt = lambda v: "-" if v is None else f"{v:.2f}"
        lines = ["\t".join(["name", "frontend", "backend", "BLEU(stage1)", "BLEU(stage2)"])]
        for r in self.rows:
            lines.append("\t".join([r["name"], r["frontend"], r["backend"],
                                    fmt(r["mean_stage1"]), fmt(r["mean_stage2"])]))
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / f"{self.kind}.json"
        _write_json(path, self.to_dict())
        (out_dir / f"{self.kind}.tsv").write_text(self.table(), encoding="utf-8")
        return path


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def _collect(ws: Workspace, name: str, frontend: str, backend: str, strategy: str,
             seeds: Sequence[int], force: bool) -> dict:
    per_seed = [run_pipeline(ws, frontend, backend, strategy, s, force) for s in seeds]
    s1_data, do_s2 = STRATEGIES[strategy]
    return {
        "name": name, "frontend": frontend, "backend": backend, "strategy": strategy,
        "provenance": {"frontend": _provenance(ws, "frontend", frontend),
                       "backend": _provenance(ws, "backend", backend)},
        "per_seed": per_seed,
        # Table 3 shows stage-1 BLEU only for rows whose stage 1 used ST data
        "mean_stage1": _mean(r["stage1"] for r in per_seed) if s1_data == "st" else None,
        "mean_stage2": _mean(r["stage2"] for r in per_seed) if do_s2 else None,
    }


def _report(ws: Workspace, kind: str, rows: list[dict], seeds) -> AblationReport:
    rep = AblationReport(kind, list(seeds), ws.cfg.preset, rows)
    rep.write(ws.reports_dir)
    return rep


def run_strategy(ws: Workspace, label: str, seeds: Sequence[int] | None = None,
                 frontend: str = "ctc", backend: str = "mt", force: bool = False) -> dict:
    return _collect(ws, label, frontend, backend, label, seeds or ws.cfg.seeds, force)


def run_strategy_ablation(ws: Workspace, labels: Sequence[str] = ("a", "b", "c", "d"),
                          seeds: Sequence[int] | None = None, force: bool = False) -> AblationReport:
    seeds = list(seeds or ws.cfg.seeds)
    # d first so that a reuses its stage-1 cells
    order = sorted(labels, key=lambda x: x != "d")
    rows = {lab: run_strategy(ws, lab, seeds, force=force) for lab in order}
    return _report(ws, "strategies", [rows[lab] for lab in sorted(rows)], seeds)


def run_frontend_ablation(ws: Workspace, tiers: Sequence[str] = FRONTEND_TIERS,
                          seeds: Sequence[int] | None = None, backend: str = "mt",
                          force: bool = False) -> AblationReport:
    seeds = list(seeds or ws.cfg.seeds)
    rows = [_collect(ws, t, t, backend, "d", seeds, force) for t in tiers]
    return _report(ws, "frontend", rows, seeds)


def run_backend_ablation(ws: Workspace, tiers: Sequence[str] = BACKEND_TIERS,
                         seeds: Sequence[int] | None = None, frontend: str = "ctc",
                         force: bool = False) -> AblationReport:
    seeds = list(seeds or ws.cfg.seeds)
    rows = [_collect(ws, t, frontend, t, "d", seeds, force) for t in tiers]
    return _report(ws, "backend", rows, seeds)


# -- learning curves ----------------------------------------------------------------------

CURVE_HEADER = ["run", "stage", "step", "dev_loss"]


def merge_curves(paths: Sequence, out_path, names: Sequence[str] | None = None) -> list[dict]:
    """Merge metrics CSVs into one (run, stage, step, dev_loss) table.

    Rows are copied as logged; nothing is smoothed or resampled.
    """
    rows: list[dict] = []
    for i, p in enumerate(paths):
        p = Path(p)
        if not p.exists():
            raise PrerequisiteError(f"metrics file {p} not found")
        run = names[i] if names else str(p.parent / p.stem.replace(".metrics", ""))
        with open(p, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["step", "stage", "split", "loss", "lr"]:
                raise ConfigError(f"{p}: expected header step,stage,split,loss,lr, got {reader.fieldnames}")
            for r in reader:
                if r["split"] == "dev":
                    rows.append({"run": run, "stage": int(r["stage"]), "step": int(r["step"]),
                                 "dev_loss": r["loss"]})
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_HEADER, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return rows
