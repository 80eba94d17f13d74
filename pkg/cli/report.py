"""Report bundles: machine-readable tables plus the rendered markdown.

CSV files keep full precision. The markdown report shows two decimals, so
every number it prints is a rounding of one in the bundle.
"""

from __future__ import annotations
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from estimation.analysis import SpaceAnalysis
from estimation.averaging import bma_mix, effect_summaries, frequentist_irr_average, irr_summaries, marginal_means
from estimation.config import Settings, get_settings
from estimation.data import RatingsTable
from estimation.evidence import evidence_label
from estimation.models import (
    InclusionResult,
    IrrSummaries,
    MixedDraws,
    ModelFit,
    WeightVector,
)
from shared.errors import DegenerateEvidenceError, SchemaError
from shared.models import Component, CovariateSchema, PriorConfig
from shared.streams import substream

logger = logging.getLogger(__name__)

SUMMARY = "summary.json"
REPORT = "report.md"
FLOAT_FORMAT = "%.10g"
_COMPONENT_TEXT = {"mean": "mean", "structural": "structural SD", "residual": "residual SD"}


class SensitivityRun(BaseModel):
    """Inclusion BFs and effect summaries of one extra prior."""

    model_config = ConfigDict(frozen=True)

    prior: PriorConfig
    inclusion: List[InclusionResult] = Field(default_factory=list)
    effects: List[Dict[str, Any]] = Field(default_factory=list)


def _finite(x: Optional[float]) -> Optional[float]:
    return float(x) if x is not None and math.isfinite(x) else None


# ---------------------------------------------------------------- fit bundle


def fit_flags(fits: Sequence[ModelFit], analysis: SpaceAnalysis, schema: CovariateSchema) -> Dict[str, List[str]]:
    """Problems that make a fit run complete with warnings."""
    flags: Dict[str, List[str]] = {
        "non_converged": [],
        "bridge_failures": [],
        "failed_models": [],
        "loo_fallbacks": [],
        "stacking_cap": [],
    }
    for f in fits:
        name = "; ".join(f"{k}: {v}" for k, v in f.spec.describe(schema).items())
        if f.draws is None:
            flags["failed_models"].append(name)
            continue
        if not f.draws.converged:
            flags["non_converged"].append(name)
        if f.bridge is None:
            flags["bridge_failures"].append(name)
        if f.criteria is not None and f.criteria.loo_flagged:
            flags["loo_fallbacks"].append(f"{name} ({f.criteria.loo_flagged} points)")
    stack = analysis.weights.get("stacking")
    if stack is not None and not stack.converged:
        flags["stacking_cap"].append(f"stopped after {stack.iterations} iterations")
    return flags


def models_frame(fits: Sequence[ModelFit], analysis: SpaceAnalysis, data: RatingsTable) -> pd.DataFrame:
    """One row per model, sorted by posterior probability (ties keep enumeration order)."""
    rows = []
    for i, (f, e) in enumerate(zip(fits, analysis.evidences)):
        desc = f.spec.describe(data.covariates)
        rows.append({
            "model": i + 1,
            "mean": desc[Component.MEAN.value],
            "structural_sd": desc[Component.STRUCTURAL.value],
            "residual_sd": desc[Component.RESIDUAL.value],
            "n_parameters": f.spec.n_parameters,
            "log_marglik": _finite(e.log_marglik),
            "log_marglik_mcse": e.log_marglik_mcse,
            "prior_prob": e.prior_prob,
            "posterior_prob": e.posterior_prob,
            "aic": f.ml.aic if f.ml else None,
            "bic": f.ml.bic if f.ml else None,
            "waic": f.criteria.waic if f.criteria else None,
            "loo": f.criteria.loo if f.criteria else None,
            "converged": bool(f.draws.converged) if f.draws is not None else False,
            "errors": "; ".join(f.errors),
        })
    frame = pd.DataFrame(rows)
    return frame.sort_values("posterior_prob", ascending=False, kind="mergesort").reset_index(drop=True)


def weights_frame(analysis: SpaceAnalysis) -> pd.DataFrame:
    rows = []
    for method, wv in analysis.weights.items():
        for i, w in enumerate(wv.weights):
            rows.append({"method": method, "model": i + 1, "weight": w, "converged": wv.converged})
    return pd.DataFrame(rows, columns=["method", "model", "weight", "converged"])


def inclusion_frame(inclusion: Sequence[InclusionResult], data: RatingsTable, prior: Optional[str] = None) -> pd.DataFrame:
    rows = []
    for r in inclusion:
        covariate = data.covariates.names[r.target.covariate]
        label = evidence_label(r.bf_inclusion) if r.bf_inclusion > 0 else None
        row = {
            "component": r.target.component.value,
            "covariate": covariate,
            "bf_inclusion": r.bf_inclusion,
            "prior_incl_odds": r.prior_incl_odds,
            "posterior_incl_odds": r.posterior_incl_odds,
            "evidence": label.describe(f"a {covariate} effect on the {_COMPONENT_TEXT[r.target.component.value]}") if label else "",
        }
        if prior is not None:
            row = {"prior": prior, **row}
        rows.append(row)
    return pd.DataFrame(rows)


def irr_frame(summaries: Sequence[IrrSummaries]) -> pd.DataFrame:
    rows = []
    for s in summaries:
        for p in s.profiles:
            rows.append({"source": s.source, "kind": "profile", "label": p.label,
                         "point": p.irr.point, "lower": p.irr.lower, "upper": p.irr.upper})
        for d in s.deltas:
            rows.append({"source": s.source, "kind": "delta", "label": d.covariate,
                         "point": d.delta.point, "lower": d.delta.lower, "upper": d.delta.upper})
    return pd.DataFrame(rows, columns=["source", "kind", "label", "point", "lower", "upper"])


def marginal_means_frame(mixed: Union[MixedDraws, np.ndarray], data: RatingsTable) -> pd.DataFrame:
    rows = []
    for row in marginal_means(mixed, data.covariates, data.labels):
        for quantity in ("mean", "sd_structural", "sd_residual", "irr"):
            iv = getattr(row, quantity)
            rows.append({"label": row.label, "quantity": quantity,
                         "point": iv.point, "lower": iv.lower, "upper": iv.upper})
    return pd.DataFrame(rows, columns=["label", "quantity", "point", "lower", "upper"])


def mixture(fits: Sequence[ModelFit], weights: WeightVector, total: int, rng: np.random.Generator) -> MixedDraws:
    """Mix the draws of every model with positive weight."""
    keep = [i for i, w in enumerate(weights.weights) if w > 0 and fits[i].draws is not None]
    if not keep:
        raise DegenerateEvidenceError(f"no sampled model carries {weights.method.value} weight")
    w = np.array([weights.weights[i] for i in keep])
    sub = WeightVector(method=weights.method, weights=tuple(float(x) for x in w / w.sum()))
    return bma_mix([fits[i].draws for i in keep], sub, total, rng)


def write_fit_bundle(
    out: Union[str, Path],
    data: RatingsTable,
    fits: Sequence[ModelFit],
    analysis: SpaceAnalysis,
    prior: PriorConfig,
    *,
    sensitivity: Sequence[SensitivityRun] = (),
    settings: Optional[Settings] = None,
    seed: int = 0,
    extra: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    """Write the fit tables and `summary.json`; returns the summary."""
    settings = settings or get_settings()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    flags = fit_flags(fits, analysis, data.covariates)

    models_frame(fits, analysis, data).to_csv(out / "models.csv", index=False, float_format=FLOAT_FORMAT)
    weights_frame(analysis).to_csv(out / "weights.csv", index=False, float_format=FLOAT_FORMAT)
    inclusion_frame(analysis.inclusion, data).to_csv(out / "inclusion.csv", index=False, float_format=FLOAT_FORMAT)

    summaries: List[IrrSummaries] = []
    mixed_bma = None
    for i, method in enumerate(m for m in ("bma", "pseudo_bma", "stacking") if m in analysis.weights):
        mixed = mixture(fits, analysis.weights[method], settings.mixture_draws, substream(seed, 1000 + i))
        if method == "bma":
            mixed_bma = mixed
        summaries.append(irr_summaries(mixed, data.covariates, labels=data.labels, name=method))
    done = set()
    for method in ("aic", "bic", "forward", "backward"):
        idx = analysis.selected.get(method)
        if idx is None or idx in done or fits[idx].reml is None:
            continue
        done.add(idx)
        summaries.append(irr_summaries(
            fits[idx].reml, data.covariates, labels=data.labels, data=data,
            settings=settings, name=f"reml_model_{idx + 1}",
        ))
    for method in ("aic_weights", "bic_weights", "waic_weights"):
        if method not in analysis.weights:
            continue
        try:
            summaries.append(frequentist_irr_average(
                [f.reml for f in fits], analysis.weights[method], data.covariates,
                labels=data.labels, name=f"avg_{method.split('_')[0]}",
            ))
        except DegenerateEvidenceError as e:
            logger.warning("No averaged IRR for %s: %s", method, e)
    irr_frame(summaries).to_csv(out / "irr.csv", index=False, float_format=FLOAT_FORMAT)
    if mixed_bma is not None:
        marginal_means_frame(mixed_bma, data).to_csv(out / "marginal_means.csv", index=False, float_format=FLOAT_FORMAT)

    if sensitivity:
        sens = []
        for run in sensitivity:
            frame = inclusion_frame(run.inclusion, data, prior=run.prior.label)
            if not frame.empty:
                sens.append(frame.assign(kind="inclusion"))
            if run.effects:
                sens.append(pd.DataFrame(run.effects).assign(prior=run.prior.label, kind="effect"))
        if sens:
            pd.concat(sens, ignore_index=True).to_csv(out / "sensitivity.csv", index=False, float_format=FLOAT_FORMAT)

    summary = {
        "kind": "fit",
        "covariates": list(data.covariates.names),
        "n_ratees": data.n_ratees,
        "n_ratings": data.n_ratings,
        "n_models": len(fits),
        "prior": prior.model_dump(),
        "selected": {m: i + 1 for m, i in analysis.selected.items()},
        "flags": flags,
        "warnings": any(flags.values()),
        **(extra or {}),
    }
    (out / SUMMARY).write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
    logger.info("Wrote fit bundle to %s", out)
    return summary


def sensitivity_effects(mixed: MixedDraws, data: RatingsTable) -> List[Dict[str, Any]]:
    return [
        {"component": e.component.value, "covariate": e.covariate,
         "point": e.estimate.point, "lower": e.estimate.lower, "upper": e.estimate.upper}
        for e in effect_summaries(mixed, data.covariates)
    ]


# ---------------------------------------------------------------- rendering


def _fmt(v: Any) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "yes" if v else "no"
    if isinstance(v, (float, np.floating)):
        return f"{v:.2f}"
    return str(v)


def markdown_table(frame: pd.DataFrame) -> str:
    header = "| " + " | ".join(str(c) for c in frame.columns) + " |"
    rule = "|" + "|".join("---" for _ in frame.columns) + "|"
    body = ["| " + " | ".join(_fmt(v) for v in row) + " |" for row in frame.itertuples(index=False)]
    return "\n".join([header, rule, *body])


def _read(path: Path) -> Optional[pd.DataFrame]:
    if not path.exists():
        return None
    try:
        frame = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        return None
    return None if frame.empty else frame


def _section(title: str, frame: Optional[pd.DataFrame], intro: str = "") -> List[str]:
    if frame is None or frame.empty:
        return []
    parts = [f"## {title}", ""]
    if intro:
        parts += [intro, ""]
    return parts + [markdown_table(frame), ""]


def _render_fit(out: Path, summary: Dict[str, Any]) -> List[str]:
    lines = [
        "# Inter-rater reliability analysis",
        "",
        f"{summary['n_ratees']} ratees, {summary['n_ratings']} ratings, covariates: "
        f"{', '.join(summary['covariates']) or 'none'}; {summary['n_models']} models.",
        "",
    ]
    flags = {k: v for k, v in summary.get("flags", {}).items() if v}
    if flags:
        lines += ["## Warnings", ""]
        lines += [f"- **{k.replace('_', ' ')}**: {', '.join(v)}" for k, v in sorted(flags.items())]
        lines.append("")

    models = _read(out / "models.csv")
    if models is not None:
        cols = ["model", "mean", "structural_sd", "residual_sd", "log_marglik", "prior_prob", "posterior_prob"]
        lines += _section("Models", models[cols].head(10), "Ten most probable models.")
    weights = _read(out / "weights.csv")
    if weights is not None:
        lines += _section("Model weights", weights.pivot(index="model", columns="method", values="weight").reset_index())
    inclusion = _read(out / "inclusion.csv")
    if inclusion is not None:
        lines += _section("Inclusion Bayes factors", inclusion[["component", "covariate", "bf_inclusion", "evidence"]])
    lines += _section("Inter-rater reliability", _read(out / "irr.csv"))
    lines += _section("Marginal means", _read(out / "marginal_means.csv"))
    lines += _section("Prior sensitivity", _read(out / "sensitivity.csv"))
    return lines


def _render_simulation(out: Path, summary: Dict[str, Any]) -> List[str]:
    lines = ["# Simulation study", ""]
    plan = summary.get("plan", {})
    lines += [
        f"Scenarios {', '.join(plan.get('scenarios', []))}; ratees per group "
        f"{', '.join(str(i) for i in plan.get('ratees_per_group', []))}; ratings per ratee "
        f"{', '.join(str(j) for j in plan.get('ratings_per_ratee', []))}; "
        f"{plan.get('replications')} replications.",
        "",
    ]
    if summary.get("flagged_conditions"):
        lines += ["## Warnings", ""]
        lines += [f"- **failures above 5%**: {c}" for c in summary["flagged_conditions"]]
        lines.append("")
    metrics = _read(out / "metrics.csv")
    if metrics is None:
        return lines
    pooled = metrics[metrics["scenario"] == "all"]

    def table(metric: str):
        sub = pooled[pooled["metric"] == metric]
        if sub.empty:
            return None
        return sub.pivot_table(index="method", columns=["ratees_per_group", "ratings_per_ratee"],
                               values="value", sort=False).reset_index()

    def flat(frame):
        if frame is None:
            return None
        frame.columns = [c if isinstance(c, str) else (c[0] if not c[1] else f"I={c[0]}, J={c[1]}")
                         for c in frame.columns]
        return frame

    lines += _section("Selection accuracy", flat(table("selection_accuracy")),
                      "Proportion of replications selecting the generating model, pooled over scenarios.")
    for q in ("mean", "structural_sd", "residual_sd", "irr"):
        lines += _section(f"RMSE: {q.replace('_', ' ')}", flat(table(f"rmse_{q}")))
    calib = metrics[metrics["metric"].str.startswith("bf_")]
    if not calib.empty:
        lines += _section("Inclusion Bayes factor calibration",
                          calib[["ratees_per_group", "ratings_per_ratee", "metric", "value", "se", "n"]])
    for note in summary.get("notes", []):
        lines.append(f"- {note}")
    return lines


def render_report(out: Union[str, Path]) -> Path:
    """Render `report.md` from an existing bundle; rerunning gives the same file."""
    out = Path(out)
    summary_path = out / SUMMARY
    if not summary_path.exists():
        raise FileNotFoundError(f"no report bundle in {out} ({SUMMARY} missing)")
    try:
        summary = json.loads(summary_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SchemaError(f"{summary_path} is not valid JSON: {e}") from None
    kind = summary.get("kind")
    if kind == "fit":
        lines = _render_fit(out, summary)
    elif kind == "simulation":
        lines = _render_simulation(out, summary)
    else:
        raise SchemaError(f"unknown bundle kind {kind!r} in {summary_path}")
    path = out / REPORT
    path.write_text("\n".join(lines).rstrip() + "\n", encoding="utf-8")
    logger.info("Rendered %s", path)
    return path


__all__ = [
    "SensitivityRun",
    "fit_flags",
    "models_frame",
    "weights_frame",
    "inclusion_frame",
    "irr_frame",
    "marginal_means_frame",
    "mixture",
    "write_fit_bundle",
    "sensitivity_effects",
    "markdown_table",
    "render_report",
]
