"""
Ablation sweeps over the reconsolidation budget k, the every_R window and the
processor feed-forward width.

Each grid point and seed trains a fresh processor on the frozen backbone in its
own output directory, then evaluates it on the held-out split. Points can run in
separate worker processes.
"""

import csv
import logging
from multiprocessing import Pool
from pathlib import Path
from typing import Sequence

from ..data.synthetic import build_vocab
from ..data.traces import load_traces
from ..enums import Stage, SweepAxis, TriggerMode
from ..model.processor import CacheProcessor
from ..schemas.config import RunConfig
from ..schemas.stats import SweepPoint
from ..training.loop import train_loop
from .checkpoint import load_backbone
from .evaluation import run_eval

logger = logging.getLogger(__name__)

DEFAULT_GRIDS: dict[SweepAxis, tuple[int, ...]] = {
    SweepAxis.K: (16, 32, 64, 128, 256),
    SweepAxis.R: (16, 32, 48, 64, 96),
    SweepAxis.FF: (32, 64, 128, 256),
}


def point_dir(output_dir: Path, axis: SweepAxis, value: int, seed: int) -> Path:
    return output_dir / f"{axis.value}={value}" / f"seed{seed}"


def _point_run(run: RunConfig, axis: SweepAxis, value: int) -> RunConfig:
    if axis == SweepAxis.K:
        return run.model_copy(update={"k": value})
    if axis == SweepAxis.R:
        return run.model_copy(update={"trigger": TriggerMode.EVERY_R, "R": value})
    return run.model_copy(update={"processor": run.processor.model_copy(update={"d_p_ff": value})})


def run_point(run: RunConfig, axis: SweepAxis, value: int, seed: int) -> list[SweepPoint]:
    """
    Train and evaluate one grid point.

    The width axis evaluates after every epoch; the others evaluate once at
    the end of training.
    """
    run = _point_run(run, axis, value)
    train_config = run.train_config(Stage.PROCESSOR, seed=seed)
    processor_config = run.processor_config()
    output_dir = point_dir(run.output_dir, axis, value, seed)

    backbone = load_backbone(run.backbone_path)
    vocab_size = backbone.config.vocab_size
    traces = load_traces(run.data_path, vocab_size)
    heldout = load_traces(run.heldout_path, vocab_size)
    vocab = build_vocab(run.task)
    processor = CacheProcessor(processor_config, backbone.config, seed=seed)
    points: list[SweepPoint] = []

    def evaluate(epoch: int) -> None:
        summary, _ = run_eval(
            backbone,
            heldout,
            vocab,
            run.trigger,
            processor,
            run.R,
            run.max_new,
            records_path=output_dir / f"eval-epoch{epoch}.jsonl",
            next_step=True,
        )
        points.append(
            SweepPoint(
                axis=axis.value,
                value=value,
                seed=seed,
                status="ok",
                accuracy=summary.accuracy,
                next_step_ce=summary.next_step_ce,
                epoch=epoch,
            )
        )

    on_epoch_end = evaluate if axis == SweepAxis.FF else None
    train_loop(train_config, backbone, traces, output_dir, processor, on_epoch_end=on_epoch_end)
    if on_epoch_end is None or not points:
        evaluate(train_config.epochs)
    return points


def _run_job(job: tuple[dict, str, int, int]) -> list[dict]:
    run_json, axis_name, value, seed = job
    axis = SweepAxis(axis_name)
    try:
        points = run_point(RunConfig.model_validate(run_json), axis, value, seed)
    except Exception as e:
        logger.error("Sweep point %s=%s seed %s failed: %s", axis.value, value, seed, e)
        points = [SweepPoint(axis=axis.value, value=value, seed=seed, status="failed", error=str(e))]
    return [point.model_dump(mode="json") for point in points]


def ablation_sweep(
    run: RunConfig, axis: SweepAxis, grid: Sequence[int] = (), workers: int = 1
) -> list[SweepPoint]:
    """
    Run every (grid value, seed) pair and write `ablate-{axis}.csv`.

    A failing point is recorded with status `failed` and its error; the sweep
    carries on with the remaining points.

    Args:
        run (RunConfig): Base configuration; needs the backbone checkpoint and
            both data splits.
        axis (SweepAxis): Swept quantity.
        grid (Sequence[int], optional): Values; defaults to the axis grid.
        workers (int, optional): Worker processes; 1 runs in-process.

    Returns:
        list[SweepPoint]: Results in grid order, then seed, then epoch.
    """
    grid = list(grid) or list(DEFAULT_GRIDS[axis])
    run_json = run.model_dump(mode="json")
    jobs = [(run_json, axis.value, value, seed) for value in grid for seed in run.seeds]
    logger.info("Sweeping %s over %s with seeds %s", axis.value, grid, run.seeds)
    if workers > 1:
        with Pool(workers) as pool:
            results = pool.map(_run_job, jobs)
    else:
        results = [_run_job(job) for job in jobs]
    points = [SweepPoint.model_validate(p) for batch in results for p in batch]
    write_sweep(run.output_dir / f"ablate-{axis.value}.csv", points)
    return points


def write_sweep(path: Path, points: Sequence[SweepPoint]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(SweepPoint.model_fields), lineterminator="\n")
        writer.writeheader()
        for point in points:
            writer.writerow({k: "" if v is None else v for k, v in point.model_dump().items()})
