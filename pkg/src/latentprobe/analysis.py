"""Robustness aggregation: cumulative curves, magnitude tables, bound tradeoffs.

A record enters the analysis denominator when it was neither skipped for an
initially-wrong prediction nor rejected by the judges at the unperturbed
stage. A success counts toward a curve or table cell only when its
disposition confirms the perturbed image kept its class; class-changed
successes stay in the denominator but never in a numerator, which is why
curves can plateau below 1.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .search import AttackRecord, STATUS_SKIPPED, STATUS_SUCCESS

OUTCOME_UNPERT_REJECTED = "unpert_rejected"
OUTCOME_SUCCESS = "success"
OUTCOME_CLASS_CHANGED = "class_changed"

DEFAULT_GROUP_SIZE = 30


@dataclass
class CurveSeries:
    """Step-function robustness curve with per-experiment spread."""

    grid: list[float]
    proportion: list[float]
    group_means: list[float]
    group_stds: list[float]
    group_count: int
    denominator: int
    incomplete_final_group: bool

    def as_json(self) -> dict:
        return {
            "grid": self.grid,
            "proportion": self.proportion,
            "group_means": self.group_means,
            "group_stds": self.group_stds,
            "group_count": self.group_count,
            "denominator": self.denominator,
            "incomplete_final_group": self.incomplete_final_group,
        }


def _outcome_of(record: AttackRecord, dispositions: Mapping | None) -> str | None:
    """Disposition outcome for a record, or None in human-free mode.

    Maps may key by tuple id alone or, when a record set spans several layer
    subsets, by ``(tuple_id, layer_subset)``.
    """
    if dispositions is None:
        return None
    keyed = dispositions.get((record.tuple_id, record.layer_subset))
    if keyed is not None:
        return keyed
    return dispositions.get(record.tuple_id)


def _analysis_pool(
    records: Sequence[AttackRecord],
    dispositions: Mapping[int, str] | None,
) -> list[tuple[AttackRecord, str | None]]:
    """Records that count, paired with their outcome; excludes skips/rejects."""
    pool = []
    for rec in sorted(records, key=lambda r: r.tuple_id):
        if rec.status == STATUS_SKIPPED:
            continue
        outcome = _outcome_of(rec, dispositions)
        if outcome == OUTCOME_UNPERT_REJECTED:
            continue
        if rec.status == STATUS_SUCCESS and dispositions is not None and outcome is None:
            raise ValueError(f"success record {rec.tuple_id} has no disposition")
        pool.append((rec, outcome))
    return pool


def _counted_success(rec: AttackRecord, outcome: str | None) -> bool:
    if rec.status != STATUS_SUCCESS:
        return False
    return outcome is None or outcome == OUTCOME_SUCCESS


def build_curve(
    records: Sequence[AttackRecord],
    dispositions: Mapping[int, str] | None,
    group_size: int = DEFAULT_GROUP_SIZE,
) -> CurveSeries:
    """Cumulative proportion of counted successes per magnitude bound.

    The grid is the sorted set of distinct counted success magnitudes (an
    exact step function). Records are split in tuple-id order into
    experiments of ``group_size`` to produce mean and standard-deviation
    bands; a short final group is kept and flagged.
    """
    if not records:
        raise ValueError("no records to analyse")
    if group_size < 1:
        raise ValueError(f"group_size must be >= 1, got {group_size}")
    pool = _analysis_pool(records, dispositions)
    if not pool:
        raise ValueError("every record was skipped or rejected; nothing to analyse")

    magnitudes = sorted(
        {rec.success_magnitude for rec, out in pool if _counted_success(rec, out)}
    )
    grid = [float(m) for m in magnitudes]

    def curve_for(sub: list[tuple[AttackRecord, str | None]]) -> list[float]:
        mags = sorted(
            rec.success_magnitude for rec, out in sub if _counted_success(rec, out)
        )
        denom = len(sub)
        out = []
        for m in grid:
            hit = sum(1 for v in mags if v <= m)
            out.append(hit / denom)
        return out

    overall = curve_for(pool)
    groups = [pool[i : i + group_size] for i in range(0, len(pool), group_size)]
    per_group = np.array([curve_for(g) for g in groups], dtype=np.float64)
    if grid:
        means = per_group.mean(axis=0).tolist()
        stds = per_group.std(axis=0).tolist()
    else:
        means, stds = [], []
    return CurveSeries(
        grid=grid,
        proportion=overall,
        group_means=means,
        group_stds=stds,
        group_count=len(groups),
        denominator=len(pool),
        incomplete_final_group=len(groups[-1]) < group_size,
    )


def mean_magnitude_table(
    records: Sequence[AttackRecord],
    dispositions: Mapping[int, str] | None,
) -> dict[tuple[str, str], float | None]:
    """Mean counted-success magnitude per (classifier, layer subset) cell.

    Cells whose records contain no counted success map to None rather than 0.
    """
    cells: dict[tuple[str, str], list[float]] = {}
    seen: set[tuple[str, str]] = set()
    for rec, outcome in _analysis_pool(records, dispositions):
        key = (rec.classifier or "", rec.layer_subset)
        seen.add(key)
        if _counted_success(rec, outcome):
            cells.setdefault(key, []).append(rec.success_magnitude)
    return {
        key: (float(np.mean(cells[key])) if key in cells else None) for key in sorted(seen)
    }


def threshold_tradeoff(
    records: Sequence[AttackRecord],
    dispositions: Mapping[int, str],
    bound_grid: Sequence[float],
) -> list[tuple[float, int, int]]:
    """Per bound: successes kept vs class-changing successes under that cap.

    Raising the cap admits more genuine successes and more class-changing
    ones; the two counts expose the tradeoff a fixed, judge-free bound buys.
    """
    if dispositions is None:
        raise ValueError("threshold_tradeoff requires dispositions")
    bounds = [float(b) for b in bound_grid]
    if bounds != sorted(bounds):
        raise ValueError("bound grid must be sorted ascending")
    pool = _analysis_pool(records, dispositions)
    out = []
    for b in bounds:
        good = 0
        changed = 0
        for rec, outcome in pool:
            if rec.status != STATUS_SUCCESS or rec.success_magnitude > b:
                continue
            if outcome == OUTCOME_SUCCESS:
                good += 1
            elif outcome == OUTCOME_CLASS_CHANGED:
                changed += 1
        out.append((b, good, changed))
    return out


def status_breakdown(
    records: Sequence[AttackRecord],
    dispositions: Mapping[int, str] | None,
) -> dict[str, int]:
    """Counts per terminal state, including judge-driven exclusions."""
    counts = {
        "total": len(records),
        STATUS_SKIPPED: 0,
        OUTCOME_UNPERT_REJECTED: 0,
        OUTCOME_SUCCESS: 0,
        OUTCOME_CLASS_CHANGED: 0,
        "success_unjudged": 0,
        "exhausted": 0,
    }
    for rec in records:
        if rec.status == STATUS_SKIPPED:
            counts[STATUS_SKIPPED] += 1
            continue
        outcome = _outcome_of(rec, dispositions)
        if outcome == OUTCOME_UNPERT_REJECTED:
            counts[OUTCOME_UNPERT_REJECTED] += 1
            continue
        if rec.status == STATUS_SUCCESS:
            if outcome == OUTCOME_SUCCESS:
                counts[OUTCOME_SUCCESS] += 1
            elif outcome == OUTCOME_CLASS_CHANGED:
                counts[OUTCOME_CLASS_CHANGED] += 1
            else:
                counts["success_unjudged"] += 1
        else:
            counts["exhausted"] += 1
    return counts


# ---------------------------------------------------------------------------
# File emission


def write_curve_csv(path: str | Path, series: CurveSeries, meta: Mapping[str, str]) -> None:
    with open(path, "w", newline="") as fh:
        for key, value in meta.items():
            fh.write(f"# {key}={value}\n")
        writer = csv.writer(fh)
        writer.writerow(["magnitude", "proportion", "group_mean", "group_std"])
        for i, m in enumerate(series.grid):
            writer.writerow(
                [m, series.proportion[i], series.group_means[i], series.group_stds[i]]
            )


def write_summary_json(
    path: str | Path,
    curves: Mapping[str, CurveSeries],
    table: Mapping[tuple[str, str], float | None],
    breakdown: Mapping[str, int],
    tradeoffs: Mapping[str, Sequence[tuple[float, int, int]]] | None,
    meta: Mapping[str, str],
) -> None:
    doc = {
        "meta": dict(meta),
        "curves": {name: series.as_json() for name, series in curves.items()},
        "mean_magnitudes": [
            {"classifier": clf, "layer_subset": subset, "mean_magnitude": value}
            for (clf, subset), value in table.items()
        ],
        "status_breakdown": dict(breakdown),
    }
    if tradeoffs:
        doc["threshold_tradeoff"] = {
            name: [{"bound": b, "success": s, "class_changed": c} for b, s, c in rows]
            for name, rows in tradeoffs.items()
        }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))
