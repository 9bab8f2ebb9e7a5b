"""Run outputs: metrics.csv, summary.json, manifest.json and checkpoints.

Floats are written with 9 significant digits so reruns diff cleanly.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import astuple
from pathlib import Path

import numpy as np

from .kalman import save_state
from .trainer import ExperimentReport, MetricRecord, records_in_order

CSV_HEADER = ("global_step", "task_index", "learner", "acc_pretrain_val",
              "acc_pretrain_test", "acc_current_val", "loss")


def fmt(x: float) -> str:
    return f"{x:.9g}"


def _round(obj):
    if isinstance(obj, float):
        return float(fmt(obj))
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    return obj


def record_row(record: MetricRecord) -> list[str]:
    return [fmt(v) if isinstance(v, float) else str(v) for v in astuple(record)]


def write_metrics_csv(records, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for record in records:
            writer.writerow(record_row(record))
    return path


def read_metrics_csv(path) -> list[MetricRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return [MetricRecord(int(r[0]), int(r[1]), r[2], float(r[3]), float(r[4]),
                             float(r[5]), float(r[6])) for r in reader]


def summary_document(report: ExperimentReport) -> dict:
    return _round({
        "config": report.config,
        "tasks": [{"index": i, "name": t.name, "transform": t.transform.describe(), "epochs": t.epochs}
                  for i, t in enumerate(report.tasks)],
        **report.summary,
    })


def write_summary_json(report: ExperimentReport, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(summary_document(report), indent=2, sort_keys=True) + "\n")
    return path


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_checkpoints(report: ExperimentReport, out_dir) -> list[Path]:
    """``params_<learner>.npy`` per learner and ``kalman_state.npz`` if present."""
    out_dir = Path(out_dir) / "checkpoints"
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for learner, params in report.final_params.items():
        path = out_dir / f"params_{learner}.npy"
        np.save(path, params)
        paths.append(path)
    if report.kalman_state is not None:
        paths.append(save_state(report.kalman_state, out_dir / "kalman_state.npz"))
    return paths


def write_outputs(report: ExperimentReport, out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "metrics": write_metrics_csv(records_in_order(report), out_dir / "metrics.csv"),
        "summary": write_summary_json(report, out_dir / "summary.json"),
    }
    for path in write_checkpoints(report, out_dir):
        paths[path.stem] = path
    return paths


def write_manifest(path, *, config_digest: str, data_files, started: str, finished: str,
                   outputs: dict[str, Path], version: str) -> Path:
    path = Path(path)
    manifest = {
        "config_sha256": config_digest,
        "data_files": {str(p): file_digest(p) for p in data_files},
        "started": started,
        "finished": finished,
        "outputs": {k: str(v) for k, v in outputs.items()},
        "version": version,
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
