"""Interactive evaluation tables.

For every case the loop runs to the click budget, is repeated with
distinct seeds, repeat-averaged per case, and aggregated as dataset
mean +/- population std. Rows cover t = 0, 1, 5, 10 (those within
budget) plus the 1..budget average. When a loop terminates early on a
perfect prediction, later events carry the final metrics forward with
zero changed voxels so every case contributes a full column.

CSV rows are `model,clicks,metric,mean,std`; the JSON report mirrors the
same numbers exactly (undefined cells are empty in CSV, null in JSON).
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .session import run_loop
from .volume import CaseRecord

METRICS = ("dsc", "assd_mm", "hd95_mm", "sdsc", "changed_voxels")


def _nanmean_axis(arr: np.ndarray, axis: int) -> np.ndarray:
    """nanmean without the all-NaN warning; empty slices become NaN."""
    finite = np.isfinite(arr)
    counts = finite.sum(axis=axis)
    sums = np.where(finite, arr, 0.0).sum(axis=axis)
    return np.divide(sums, counts, out=np.full(counts.shape, np.nan), where=counts > 0)


@dataclass
class EvalTable:
    model_id: str
    budget: int
    repeats: int
    base_seed: int
    case_ids: list[str]
    # per_case[metric] has shape (n_cases, budget+1): repeat-averaged values
    per_case: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    rows: list[dict] = field(default_factory=list)


def _loop_matrix(events, budget: int) -> dict[str, list[float]]:
    """Metric value per t in 0..budget, carrying the last event forward."""
    out = {m: [] for m in METRICS}
    for t in range(budget + 1):
        ev = events[t] if t < len(events) else events[-1]
        rep = ev.report
        carried = t >= len(events)
        out["dsc"].append(rep.dsc)
        out["assd_mm"].append(np.nan if rep.assd_mm is None else rep.assd_mm)
        out["hd95_mm"].append(np.nan if rep.hd95_mm is None else rep.hd95_mm)
        out["sdsc"].append(rep.sdsc)
        out["changed_voxels"].append(0.0 if carried else float(rep.changed_voxels))
    return out


def evaluate_model(
    model_id: str,
    driver,
    cases: list[CaseRecord],
    budget: int = 10,
    repeats: int = 3,
    base_seed: int = 0,
    workers: int = 1,
) -> EvalTable:
    """Run the full interactive evaluation for one model."""
    jobs = [(ci, r) for ci in range(len(cases)) for r in range(repeats)]

    def one(job):
        ci, r = job
        rng = rngmod.stream(base_seed, "eval", cases[ci].case_id, r)
        return _loop_matrix(run_loop(driver, cases[ci], budget, rng), budget)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, jobs))
    else:
        results = [one(j) for j in jobs]

    per_case = {m: np.full((len(cases), budget + 1), np.nan) for m in METRICS}
    for m in METRICS:
        stacked = np.array([res[m] for res in results], dtype=np.float64)
        stacked = stacked.reshape(len(cases), repeats, budget + 1)
        per_case[m] = _nanmean_axis(stacked, axis=1)

    table = EvalTable(model_id, budget, repeats, base_seed, [c.case_id for c in cases], per_case)
    table.rows = _aggregate_rows(model_id, per_case, budget)
    return table


def _agg(values: np.ndarray) -> tuple[float | None, float | None]:
    """Dataset mean and population std, ignoring undefined entries."""
    finite = values[np.isfinite(values)]
    if finite.size == 0:
        return None, None
    return float(finite.mean()), float(finite.std())


def _aggregate_rows(model_id: str, per_case: dict[str, np.ndarray], budget: int) -> list[dict]:
    rows = []
    report_ts = [t for t in (0, 1, 5, 10) if t <= budget]
    for metric in METRICS:
        mat = per_case[metric]
        for t in report_ts:
            mean, std = _agg(mat[:, t])
            rows.append({"model": model_id, "clicks": str(t), "metric": metric, "mean": mean, "std": std})
        if budget >= 1:
            per_case_avg = _nanmean_axis(mat[:, 1:], axis=1)
            mean, std = _agg(per_case_avg)
            rows.append(
                {"model": model_id, "clicks": f"1-{budget}", "metric": metric, "mean": mean, "std": std}
            )
    return rows


def write_reports(tables: list[EvalTable], out_dir) -> tuple[Path, Path]:
    """Emit eval.csv and eval.json with identical numbers."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "eval.csv"
    json_path = out_dir / "eval.json"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "clicks", "metric", "mean", "std"])
        for table in tables:
            for row in table.rows:
                writer.writerow(
                    [
                        row["model"],
                        row["clicks"],
                        row["metric"],
                        "" if row["mean"] is None else repr(row["mean"]),
                        "" if row["std"] is None else repr(row["std"]),
                    ]
                )
    payload = [
        {
            "model": t.model_id,
            "budget": t.budget,
            "repeats": t.repeats,
            "seed": t.base_seed,
            "cases": t.case_ids,
            "rows": t.rows,
            "per_case": {m: _jsonify(t.per_case[m]) for m in METRICS},
        }
        for t in tables
    ]
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, separators=(",", ":"), allow_nan=False, default=_json_default)
        fh.write("\n")
    return csv_path, json_path


def _jsonify(mat: np.ndarray) -> list[list[float | None]]:
    return [[None if not np.isfinite(v) else float(v) for v in row] for row in mat]


def _json_default(obj):
    raise TypeError(f"not JSON-serializable: {type(obj)}")


# ---------------------------------------------------------------------------
# Mask-dropout ablation: per-p refinement models, pooled changed-voxel stats.


def ablation_rows(
    p_values: list[float],
    tables: dict[float, EvalTable],
    pooled_changed: dict[float, list[float]],
) -> list[dict]:
    rows = []
    for p in p_values:
        table = tables[p]
        mat = table.per_case["dsc"]
        per_case_avg = _nanmean_axis(mat[:, 1:], axis=1)
        dsc_mean, dsc_std = _agg(per_case_avg)
        changed = np.asarray(pooled_changed[p], dtype=np.float64)
        rows.append(
            {
                "p": p,
                "dsc_avg_mean": dsc_mean,
                "dsc_avg_std": dsc_std,
                "changed_mean": float(changed.mean()) if changed.size else None,
                "changed_std": float(changed.std()) if changed.size else None,
            }
        )
    return rows


def collect_changed_voxels(
    driver, cases: list[CaseRecord], budget: int, repeats: int, base_seed: int
) -> list[float]:
    """Changed-voxel counts pooled over every (case, repeat, event)."""
    pooled = []
    for case in cases:
        for r in range(repeats):
            rng = rngmod.stream(base_seed, "eval", case.case_id, r)
            events = run_loop(driver, case, budget, rng)
            pooled.extend(float(ev.report.changed_voxels) for ev in events[1:])
    return pooled


def write_ablation_reports(rows: list[dict], out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "ablation.csv"
    json_path = out_dir / "ablation.json"
    fields = ["p", "dsc_avg_mean", "dsc_avg_std", "changed_mean", "changed_std"]
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in rows:
            writer.writerow(["" if row[f] is None else repr(row[f]) for f in fields])
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(rows, fh, separators=(",", ":"), allow_nan=False)
        fh.write("\n")
    return csv_path, json_path
