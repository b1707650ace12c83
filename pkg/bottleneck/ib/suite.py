import logging
from pathlib import Path

import numpy as np

from ..schemas.stats import IBSuiteReport
from .chains import random_chain, verify_dpi
from .sequences import random_toy_model, verify_theorem_bounds

logger = logging.getLogger(__name__)


def run_ib_suite(
    dpi_trials: int = 1000,
    bound_trials: int = 200,
    seed: int = 0,
    max_chain_alphabet: int = 6,
    max_alphabet: int = 4,
    max_horizon: int = 4,
) -> IBSuiteReport:
    """
    Check the DPI ordering on random chains and both likelihood bounds on
    random toy sequence models.

    Returns:
        IBSuiteReport: Per-trial reports and violation counts.
    """
    rng = np.random.default_rng(seed)
    dpi = [verify_dpi(random_chain(rng, max_chain_alphabet)) for _ in range(dpi_trials)]
    bounds = [
        verify_theorem_bounds(random_toy_model(rng, max_alphabet, max_horizon))
        for _ in range(bound_trials)
    ]
    dpi_margins = [margin for report in dpi for _, _, margin in report.margins]
    bound_margins = [
        min(r.margin_1, r.margin_2, r.margin_avg) for r in bounds if not r.degenerate
    ]
    report = IBSuiteReport(
        seed=seed,
        dpi_trials=dpi_trials,
        bound_trials=bound_trials,
        dpi_violations=sum(not r.ok for r in dpi),
        bound_violations=sum(not r.ok for r in bounds),
        degenerate_models=sum(r.degenerate for r in bounds),
        min_dpi_margin=min(dpi_margins) if dpi_margins else None,
        min_bound_margin=min(bound_margins) if bound_margins else None,
        dpi=dpi,
        bounds=bounds,
    )
    logger.info(
        "IB suite: %d/%d DPI violations, %d/%d bound violations (%d degenerate)",
        report.dpi_violations, dpi_trials, report.bound_violations, bound_trials,
        report.degenerate_models,
    )
    return report


def write_report(path: Path, report: IBSuiteReport) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(report.model_dump_json(indent=2))
        f.write("\n")
