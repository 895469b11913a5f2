"""Ablation and lambda-sweep harness.

Every (row, seed) cell trains one model and scores it on a held-out split.
Cells can be cached on disk: the cache key hashes the resolved configs, the
datasets and the package source, so any code change invalidates old results.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data.synth import SampleRecord
from .evaluate import (
    boundary_counts,
    boundary_probability,
    confusion_matrix,
    f_from_counts,
    iou_from_confusion,
    predict_scores,
)
from .model import DFN, TOGGLES, ModelConfig
from .training import TrainConfig, train

log = logging.getLogger(__name__)

ALL_ON = dict.fromkeys(TOGGLES, True)
ALL_OFF = dict.fromkeys(TOGGLES, False)


@dataclass(frozen=True)
class Row:
    name: str
    toggles: tuple[tuple[str, bool], ...]
    lam: float | None = None

    @classmethod
    def make(cls, name: str, lam: float | None = None, **toggles: bool) -> "Row":
        full = {**ALL_OFF, **toggles}
        return cls(name, tuple((k, full[k]) for k in TOGGLES), lam)

    def toggle_dict(self) -> dict[str, bool]:
        return dict(self.toggles)

    def toggle_label(self) -> str:
        on = [k[4:] for k, v in self.toggles if v]
        return "+".join(on) if on else "none"


def _r(name, *on, lam=None):
    return Row.make(name, lam, **{f"use_{k}": True for k in on})


PRESETS: dict[str, list[Row]] = {
    "table2": [
        _r("baseline"),
        _r("+RRB", "rrb"),
        _r("+RRB+GP", "rrb", "gp"),
        _r("+RRB+GP+CAB", "rrb", "gp", "cab"),
        _r("+RRB+DS", "rrb", "ds"),
        _r("+RRB+GP+DS", "rrb", "gp", "ds"),
        _r("+RRB+GP+CAB+DS", "rrb", "gp", "cab", "ds"),
    ],
    "table3": [
        _r("SN", "rrb", "gp", "cab", "ds"),
        _r("SN+BN", "rrb", "gp", "cab", "ds", "border"),
    ],
    "leave-one-out": [
        _r("full", "rrb", "gp", "cab", "ds", "border"),
        _r("baseline"),
        _r("-RRB", "gp", "cab", "ds", "border"),
        _r("-GP", "rrb", "cab", "ds", "border"),
        _r("-CAB", "rrb", "gp", "ds", "border"),
        _r("-DS", "rrb", "gp", "cab", "border"),
        _r("-BN", "rrb", "gp", "cab", "ds"),
    ],
}
PRESETS["table2+bn"] = PRESETS["table2"] + PRESETS["table3"][1:]

LAMBDA_SWEEP = (0.05, 0.1, 0.5, 0.75, 1.0)


def lambda_rows(values: Sequence[float], base: dict[str, bool] | None = None) -> list[Row]:
    toggles = {**ALL_ON, **(base or {})}
    return [Row.make(f"lambda={v!r}", float(v), **toggles) for v in values]


@dataclass
class CellResult:
    row: str
    seed: int
    miou: float
    per_class: list[float]
    boundary_f1: float | None = None
    boundary_precision: float | None = None
    boundary_recall: float | None = None
    loss_first: float | None = None
    loss_last: float | None = None
    seconds: float | None = None


@dataclass
class ReportRow:
    row: Row
    seeds: list[int]
    mious: list[float]
    mean: float
    cells: list[CellResult] = field(default_factory=list)


@dataclass
class AblationReport:
    rows: list[ReportRow] = field(default_factory=list)

    def row(self, name: str) -> ReportRow:
        for r in self.rows:
            if r.row.name == name:
                return r
        raise KeyError(name)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", "toggles", "seed", "miou"])
        for r in self.rows:
            for seed, m in zip(r.seeds, r.mious):
                w.writerow([r.row.name, r.row.toggle_label(), seed, repr(m)])
        return buf.getvalue()

    def to_lambda_csv(self) -> str:
        lines = ["lambda,miou"]
        for r in self.rows:
            lines.append(f"{r.row.lam!r},{r.mean!r}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        name_w = max([len("row")] + [len(r.row.name) for r in self.rows])
        tog_w = max([len("toggles")] + [len(r.row.toggle_label()) for r in self.rows])
        head = f"{'row':<{name_w}}  {'toggles':<{tog_w}}  {'mIoU %':>7}  per-seed"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            per = " ".join(f"{100 * m:.2f}" for m in r.mious)
            lines.append(f"{r.row.name:<{name_w}}  {r.row.toggle_label():<{tog_w}}  {100 * r.mean:7.2f}  {per}")
        return "\n".join(lines) + "\n"


def source_digest() -> str:
    """Hash of every module in this package."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def samples_digest(samples: Sequence[SampleRecord]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(s.image.tobytes())
        h.update(s.labels.tobytes())
    return h.hexdigest()


def evaluate_model(model: DFN, val: Sequence[SampleRecord], mean, num_classes: int) -> dict:
    """Val-split mIoU (pooled confusion matrix) and stage-2 boundary F-score."""
    images = np.stack([s.image for s in val]) - np.asarray(mean, np.float32).reshape(1, 3, 1, 1)
    gt = np.stack([s.labels for s in val])
    seg, border = predict_scores(model, images)
    miou, per_class = iou_from_confusion(confusion_matrix(seg.argmax(axis=1), gt, num_classes))
    out = {"miou": miou, "per_class": per_class}
    if border:
        prob = boundary_probability(border)
        p, r, f = f_from_counts(*boundary_counts(prob, np.stack([s.boundary for s in val]), 0.5, 1))
        out.update(boundary_f1=f, boundary_precision=p, boundary_recall=r)
    return out


def _loss_ends(records) -> tuple[float | None, float | None]:
    if not records:
        return None, None
    k = max(1, len(records) // 10)
    return float(np.mean([r.L for r in records[:k]])), float(np.mean([r.L for r in records[-k:]]))


def run_cell(
    base: ModelConfig,
    row: Row,
    seed: int,
    train_cfg: TrainConfig,
    train_set: Sequence[SampleRecord],
    val_set: Sequence[SampleRecord],
    mean,
    thickness: int = 1,
) -> CellResult:
    cfg = base.with_toggles(**row.toggle_dict(), init_seed=seed)
    tcfg = replace(train_cfg, seed=seed)
    if row.lam is not None:
        tcfg = replace(tcfg, loss=replace(tcfg.loss, lam=row.lam))
    t0 = time.perf_counter()
    model, tlog = train(cfg, tcfg, train_set, mean, thickness=thickness)
    seconds = time.perf_counter() - t0
    metrics = evaluate_model(model, val_set, mean, cfg.num_classes)
    first, last = _loss_ends(tlog.records)
    return CellResult(row=row.name, seed=seed, loss_first=first, loss_last=last, seconds=seconds, **metrics)


def cell_key(base: ModelConfig, row: Row, seed: int, train_cfg: TrainConfig, data_digest: str, code: str) -> str:
    payload = json.dumps(
        {
            "model": base.to_kv(),
            "row": [row.name, list(row.toggles), row.lam],
            "seed": seed,
            "train": asdict(train_cfg),
            "data": data_digest,
            "code": code,
        },
        sort_keys=True,
        default=str,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:24]


def ablation_run(
    base: ModelConfig,
    rows: Sequence[Row],
    seeds: Sequence[int],
    train_cfg: TrainConfig,
    train_set: Sequence[SampleRecord],
    val_set: Sequence[SampleRecord],
    mean=(0.0, 0.0, 0.0),
    thickness: int = 1,
    cache_dir=None,
    csv_path=None,
    on_cell: Callable[[CellResult], None] | None = None,
) -> AblationReport:
    """Train and score one model per (row, seed).

    With ``csv_path`` set, each finished cell is appended immediately, so a
    failure part-way still leaves the completed results on disk. With
    ``cache_dir`` set, finished cells are stored as JSON and reused.
    """
    if not seeds:
        raise ValueError("ablation needs at least one seed")
    cache = Path(cache_dir) if cache_dir is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
        digest = samples_digest(train_set) + samples_digest(val_set) + repr(tuple(mean))
        code = source_digest()
    partial = None
    if csv_path is not None:
        partial = open(csv_path, "w", encoding="utf-8", newline="")
        partial.write("row,toggles,seed,miou\n")
    report = AblationReport()
    try:
        for row in rows:
            cells = []
            for seed in seeds:
                result = None
                if cache is not None:
                    path = cache / f"{cell_key(base, row, seed, train_cfg, digest, code)}.json"
                    if path.exists():
                        result = CellResult(**json.loads(path.read_text()))
                if result is None:
                    log.info("training cell %s seed %d", row.name, seed)
                    result = run_cell(base, row, seed, train_cfg, train_set, val_set, mean, thickness)
                    if cache is not None:
                        path.write_text(json.dumps(asdict(result)))
                cells.append(result)
                if partial is not None:
                    partial.write(f"{row.name},{row.toggle_label()},{seed},{result.miou!r}\n")
                    partial.flush()
                if on_cell is not None:
                    on_cell(result)
            mious = [c.miou for c in cells]
            report.rows.append(ReportRow(row, list(seeds), mious, float(np.mean(mious)), cells))
    finally:
        if partial is not None:
            partial.close()
    return report
