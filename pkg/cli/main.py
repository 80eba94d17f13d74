"""Command-line front end: `fit`, `simulate` and `report`.

Exit codes: 0 success, 2 bad input or configuration, 3 finished with
warnings (non-converged chains, failed bridge runs, flagged conditions).
"""

import argparse
import logging
import sys
from typing import Any, Dict, List, Optional, Sequence

from pydantic import ValidationError

from estimation.analysis import analyze_space
from estimation.config import Settings, get_settings
from estimation.data import load_csv
from estimation.models import SamplerConfig
from estimation.orchestrator import fit_space
from shared.errors import IRRError
from shared.models import CovariateSchema, PriorConfig
from shared.reliability import enumerate_models
from shared.streams import substream
from simulation.harness import default_plan, run_study
from simulation.metrics import write_study
from simulation.models import StudyPlan
from .config import RunConfig, load_run_config
from .report import SensitivityRun, mixture, render_report, sensitivity_effects, write_fit_bundle

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_WARNINGS = 3


def _csv(value: str) -> List[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def _int_csv(value: str) -> List[int]:
    try:
        return [int(v) for v in _csv(value)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="irr", description="Inter-rater reliability with covariate-dependent variance components")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory")
    common.add_argument("--config", help="JSON file with flat keys mirroring the flags")
    common.add_argument("--log-level", dest="log_level")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--prior", type=_csv, help="small|medium|large|<sigma>, comma-separated for sensitivity runs")
    model.add_argument("--chains", type=int)
    model.add_argument("--warmup", type=int)
    model.add_argument("--draws", type=int, help="retained draws per chain")
    model.add_argument("--methods", type=_csv, help="comma-separated selection/averaging method tags")
    model.add_argument("--seed", type=int)
    model.add_argument("--workers", type=int)

    fit = sub.add_parser("fit", parents=[common, model], help="fit every model of a dataset's model space")
    fit.add_argument("--data", help="ratings CSV (ratee, rating and covariate columns)")
    fit.add_argument("--covariates", type=_csv, help="comma-separated binary covariate columns")
    fit.add_argument("--mean-covariates", dest="mean_covariates", choices=["on", "off"])
    fit.add_argument("--bootstrap", type=int, help="parametric bootstrap resamples for REML intervals")

    sim = sub.add_parser("simulate", parents=[common, model], help="run the simulation study")
    sim.add_argument("--scenarios", type=_csv)
    sim.add_argument("--I", dest="ratees", type=_int_csv, help="ratees per group")
    sim.add_argument("--J", dest="ratings", type=_int_csv, help="ratings per ratee")
    sim.add_argument("--replications", type=int)

    sub.add_parser("report", parents=[common], help="render report.md from an output bundle")
    return parser


def _flags(args: argparse.Namespace) -> Dict[str, Any]:
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    if flags.get("mean_covariates") is not None:
        flags["mean_covariates"] = flags["mean_covariates"] == "on"
    return flags


def _engine_settings(config: RunConfig) -> Settings:
    update: Dict[str, Any] = {}
    if config.log_level is not None:
        update["log_level"] = config.log_level
    if config.workers is not None:
        update["workers"] = config.workers
    if config.bootstrap is not None:
        update["bootstrap_resamples"] = config.bootstrap
    return get_settings().model_copy(update=update)


def _sampler(config: RunConfig) -> SamplerConfig:
    fields: Dict[str, Any] = {"seed": config.seed}
    for name, attr in (("chains", "chains"), ("warmup", "warmup"), ("draws_per_chain", "draws")):
        if getattr(config, attr) is not None:
            fields[name] = getattr(config, attr)
    return SamplerConfig(**fields)


def cmd_fit(config: RunConfig, settings: Settings) -> int:
    schema = CovariateSchema(names=tuple(config.covariates))
    data = load_csv(config.data, schema)
    specs = enumerate_models(schema)
    if not config.mean_covariates:
        specs = [s for s in specs if not any(s.mean_mask)]
    priors = [PriorConfig.preset(p) for p in config.prior]
    sampler = _sampler(config)
    logger.info("Fitting %d models to %d ratees (%d ratings)", len(specs), data.n_ratees, data.n_ratings)

    fits = fit_space(data, specs, priors[0], sampler, settings)
    analysis = analyze_space(
        data, fits,
        selection=config.selection_methods,
        averaging=[m for m in config.averaging_methods if m != "full"],
        settings=settings,
    )

    sensitivity: List[SensitivityRun] = []
    for i, prior in enumerate(priors[1:], start=1):
        logger.info("Prior sensitivity run %d: sigma_beta=%s", i, prior.sigma_beta)
        extra = fit_space(data, specs, prior, sampler, settings, frequentist=False, criteria=False)
        extra_analysis = analyze_space(data, extra, selection=[], averaging=["bma"], settings=settings)
        mixed = mixture(extra, extra_analysis.weights["bma"], settings.mixture_draws, substream(config.seed, 2000 + i))
        sensitivity.append(SensitivityRun(
            prior=prior,
            inclusion=extra_analysis.inclusion,
            effects=sensitivity_effects(mixed, data),
        ))

    summary = write_fit_bundle(
        config.out, data, fits, analysis, priors[0],
        sensitivity=sensitivity, settings=settings, seed=config.seed,
        extra={"sampler": sampler.model_dump(), "mean_covariates": config.mean_covariates},
    )
    render_report(config.out)
    if summary["warnings"]:
        logger.warning("Fit finished with warnings; see %s", config.out)
        return EXIT_WARNINGS
    return EXIT_OK


def _plan(config: RunConfig) -> StudyPlan:
    base = default_plan()
    return StudyPlan(
        scenarios=config.scenarios or base.scenarios,
        ratees_per_group=config.ratees or base.ratees_per_group,
        ratings_per_ratee=config.ratings or base.ratings_per_ratee,
        replications=config.replications or base.replications,
        selection_methods=config.selection_methods,
        averaging_methods=config.averaging_methods,
        seed=config.seed,
        sampler=_sampler(config),
        prior=PriorConfig.preset(config.prior[0]),
    )


def cmd_simulate(config: RunConfig, settings: Settings) -> int:
    plan = _plan(config)
    result = run_study(plan, settings)
    write_study(result, config.out)
    render_report(config.out)
    if result.metrics.flagged:
        return EXIT_WARNINGS
    return EXIT_OK


def cmd_report(config: RunConfig) -> int:
    path = render_report(config.out)
    print(path)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_run_config(args.command, _flags(args), args.config)
    except (ValidationError, IRRError, OSError) as e:
        logging.basicConfig(level=logging.INFO)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE

    settings = _engine_settings(config)
    logging.basicConfig(level=getattr(logging, settings.log_level.upper(), logging.INFO))
    try:
        if config.command == "fit":
            return cmd_fit(config, settings)
        if config.command == "simulate":
            return cmd_simulate(config, settings)
        return cmd_report(config)
    except (IRRError, ValidationError, FileNotFoundError, KeyError) as e:
        logger.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
