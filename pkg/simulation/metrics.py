"""Scoring of replications and the study's metric tables."""

from __future__ import annotations
from collections import defaultdict
import json
import logging
import math
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from estimation.data import get_scenario
from shared.models import Component, ModelSpec
from .models import (
    MetricRow,
    ReplicationRecord,
    SimulationMetrics,
    StudyPlan,
    StudyResult,
    condition_label,
)

logger = logging.getLogger(__name__)

Quantity = Literal["mean", "structural_sd", "residual_sd", "irr"]
QUANTITIES: Tuple[str, ...] = ("mean", "structural_sd", "residual_sd", "irr")
_FIELDS = {
    "mean": ("mu1", "mu2"),
    "structural_sd": ("sg1", "sg2"),
    "residual_sd": ("se1", "se2"),
    "irr": ("irr1", "irr2"),
}
FAILURE_LIMIT = 0.05
STRONG_EVIDENCE = 10.0


def classify(selected: ModelSpec, truth: ModelSpec) -> str:
    """"correct", "more_complex" (strict superset of the true effects) or "other"."""
    if selected == truth:
        return "correct"
    if selected.contains(truth):
        return "more_complex"
    return "other"


def _true_values(scenario: str) -> Dict[str, float]:
    s = get_scenario(scenario)
    irr1, irr2 = s.irrs()
    return {"mu1": s.mu1, "mu2": s.mu2, "sg1": s.sg1, "sg2": s.sg2,
            "se1": s.se1, "se2": s.se2, "irr1": irr1, "irr2": irr2}


def _proportion(hits: int, n: int) -> Tuple[float, float]:
    p = hits / n
    return p, math.sqrt(p * (1.0 - p) / n)


def _groups(records: Iterable[ReplicationRecord], pooled: bool) -> Dict[Tuple[str, int, int], List[ReplicationRecord]]:
    out: Dict[Tuple[str, int, int], List[ReplicationRecord]] = defaultdict(list)
    for r in records:
        if not r.ok:
            continue
        c = r.condition
        key = ("all" if pooled else c.scenario, c.ratees_per_group, c.ratings_per_ratee)
        out[key].append(r)
    return dict(sorted(out.items()))


def selection_metrics(records: Sequence[ReplicationRecord], methods: Sequence[str], pooled: bool = False) -> List[MetricRow]:
    rows: List[MetricRow] = []
    for key, recs in _groups(records, pooled).items():
        for m in methods:
            scored = [classify(r.selected[m], r.truth) for r in recs if m in r.selected]
            if not scored:
                continue
            n = len(scored)
            for metric, cls in (("selection_accuracy", "correct"), ("more_complex_rate", "more_complex"), ("other_rate", "other")):
                p, se = _proportion(sum(1 for s in scored if s == cls), n)
                rows.append(MetricRow(scenario=key[0], ratees_per_group=key[1], ratings_per_ratee=key[2],
                                      method=m, metric=metric, value=p, se=se, n=n))
    return rows


def _errors(recs: Sequence[ReplicationRecord], method: str, quantity: str) -> np.ndarray:
    errs: List[float] = []
    for r in recs:
        est = r.estimates.get(method)
        if est is None:
            continue
        truth = _true_values(r.condition.scenario)
        for f in _FIELDS[quantity]:
            errs.append(getattr(est, f) - truth[f])
    return np.asarray(errs, dtype=float)


def rmse_stats(errors: np.ndarray) -> Tuple[float, float, float]:
    """RMSE, its delta-method SE and bias^2/MSE of a vector of estimation errors."""
    sq = errors * errors
    mse = float(sq.mean())
    rmse = math.sqrt(mse)
    se_mse = float(sq.std(ddof=1) / math.sqrt(sq.size)) if sq.size > 1 else 0.0
    se = se_mse / (2.0 * rmse) if rmse > 0 else 0.0
    ratio = float(errors.mean() ** 2 / mse) if mse > 0 else 0.0
    return rmse, se, min(ratio, 1.0)


def rmse_table(
    records: Sequence[ReplicationRecord],
    quantity: Quantity,
    methods: Sequence[str],
    pooled: bool = False,
) -> List[MetricRow]:
    """RMSE per (condition, method); both groups' errors are pooled within a condition."""
    if quantity not in _FIELDS:
        raise ValueError(f"unknown quantity {quantity!r}")
    rows: List[MetricRow] = []
    for key, recs in _groups(records, pooled).items():
        for m in methods:
            errs = _errors(recs, m, quantity)
            if errs.size == 0:
                continue
            rmse, se, ratio = rmse_stats(errs)
            common = dict(scenario=key[0], ratees_per_group=key[1], ratings_per_ratee=key[2], method=m, n=errs.size)
            rows.append(MetricRow(metric=f"rmse_{quantity}", value=rmse, se=se, **common))
            rows.append(MetricRow(metric=f"bias2_over_mse_{quantity}", value=ratio, **common))
    return rows


def bf_calibration(records: Sequence[ReplicationRecord], notes: Optional[List[str]] = None) -> List[MetricRow]:
    """Per component and truth class: share of inclusion BFs on the correct side of 1
    and share of misleading strong evidence, pooled over scenarios per (I, J)."""
    rows: List[MetricRow] = []
    by_design: Dict[Tuple[int, int], List[ReplicationRecord]] = defaultdict(list)
    for r in records:
        if r.ok and r.inclusion_bf:
            by_design[(r.condition.ratees_per_group, r.condition.ratings_per_ratee)].append(r)
    for (i, j), recs in sorted(by_design.items()):
        for comp in Component:
            for present, cls in ((True, "difference"), (False, "no_difference")):
                bfs = [r.inclusion_bf[comp.value] for r in recs
                       if comp.value in r.inclusion_bf and r.truth.mask(comp)[0] == present]
                if not bfs:
                    msg = f"no {cls} replications for {comp.value} at I={i}, J={j}"
                    logger.info("Omitting calibration row: %s", msg)
                    if notes is not None:
                        notes.append(msg)
                    continue
                b = np.asarray(bfs, dtype=float)
                if present:
                    favor = np.sum(b > 1.0)
                    misleading = np.sum(b < 1.0 / STRONG_EVIDENCE)
                else:
                    favor = np.sum(b < 1.0)
                    misleading = np.sum(b > STRONG_EVIDENCE)
                n = b.size
                for metric, hits in ((f"bf_favor_truth_{comp.value}_{cls}", favor),
                                     (f"bf_misleading_{comp.value}_{cls}", misleading)):
                    p, se = _proportion(int(hits), n)
                    rows.append(MetricRow(scenario="all", ratees_per_group=i, ratings_per_ratee=j,
                                          method="bma", metric=metric, value=p, se=se, n=n))
    return rows


def compute_metrics(records: Sequence[ReplicationRecord], plan: StudyPlan) -> SimulationMetrics:
    failures: Dict[str, int] = {}
    totals: Dict[str, int] = defaultdict(int)
    for r in records:
        label = condition_label(r.condition.key)
        totals[label] += 1
        if not r.ok:
            failures[label] = failures.get(label, 0) + 1
    flagged = sorted(k for k, f in failures.items() if f / totals[k] > FAILURE_LIMIT)
    for k in flagged:
        logger.warning("Condition %s: %d of %d replications failed", k, failures[k], totals[k])

    notes: List[str] = []
    estimate_methods = plan.methods
    rows: List[MetricRow] = []
    for pooled in (False, True):
        rows += selection_metrics(records, plan.selection_methods, pooled)
        for q in QUANTITIES:
            rows += rmse_table(records, q, estimate_methods, pooled)
    if "bma" in plan.averaging_methods:
        rows += bf_calibration(records, notes)
    return SimulationMetrics(rows=rows, failures=failures, flagged=flagged, notes=notes)


def metrics_frame(metrics: SimulationMetrics) -> pd.DataFrame:
    return pd.DataFrame(
        [r.model_dump() for r in metrics.rows],
        columns=["scenario", "ratees_per_group", "ratings_per_ratee", "method", "metric", "value", "se", "n"],
    )


def write_study(result: StudyResult, out: Union[str, Path]) -> List[Path]:
    """Write `metrics.csv` and `summary.json` into `out`."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"
    metrics_frame(result.metrics).to_csv(metrics_path, index=False, float_format="%.10g")
    summary = {
        "kind": "simulation",
        "plan": result.plan.model_dump(mode="json"),
        "replications_run": len(result.records),
        "failures": result.metrics.failures,
        "flagged_conditions": result.metrics.flagged,
        "notes": result.metrics.notes,
    }
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
    logger.info("Wrote %s and %s", metrics_path, summary_path)
    return [metrics_path, summary_path]


__all__ = [
    "QUANTITIES",
    "classify",
    "selection_metrics",
    "rmse_stats",
    "rmse_table",
    "bf_calibration",
    "compute_metrics",
    "metrics_frame",
    "write_study",
]
