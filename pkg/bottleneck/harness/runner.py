"""
One function per CLI command. Each takes a validated RunConfig, writes its
artifacts under `run.output_dir` and returns a RunOutcome.
"""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from ..core.config import settings
from ..data.synthetic import build_vocab, generate_splits
from ..data.traces import load_traces, save_traces
from ..enums import Command, Stage, SweepAxis
from ..model.backbone import Backbone
from ..model.processor import CacheProcessor, InvocationRecord, parameter_report
from ..schemas.config import RunConfig
from ..ib.suite import run_ib_suite, write_report
from ..training.loop import train_loop
from .checkpoint import load_backbone, load_processor, save_backbone
from .evaluation import run_eval
from .instrumentation import (
    measure_rewrite_magnitudes,
    save_invocation_records,
    write_head_stats,
    write_invocation_stats,
    write_selection_dump,
)
from .sweep import ablation_sweep

logger = logging.getLogger(__name__)


@dataclass
class RunOutcome:
    ok: bool
    message: str
    outputs: dict[str, Path] = field(default_factory=dict)


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def gen_data(run: RunConfig) -> RunOutcome:
    train, heldout = generate_splits(run.task, run.n_train, run.n_heldout)
    outputs = {"train": run.output_dir / "train.jsonl", "heldout": run.output_dir / "heldout.jsonl"}
    save_traces(outputs["train"], train)
    save_traces(outputs["heldout"], heldout)
    vocab = build_vocab(run.task)
    outputs["vocab"] = run.output_dir / "vocab.json"
    _write_json(outputs["vocab"], {"symbols": vocab.symbols})
    return RunOutcome(True, f"Wrote {len(train)} train and {len(heldout)} held-out traces", outputs)


def train_backbone(run: RunConfig) -> RunOutcome:
    traces = load_traces(run.data_path, run.backbone.vocab_size)
    backbone = Backbone(run.backbone, seed=run.seeds[0])
    logger.info("Backbone has %d parameters", backbone.params.count())
    config = run.train_config(Stage.SFT, seed=run.seeds[0])
    result = train_loop(config, backbone, traces, run.output_dir, baseline=run.baseline)
    outputs = {"checkpoint": result.checkpoints[-1], "metrics": result.metrics_path}
    return RunOutcome(True, f"SFT finished; last checkpoint {result.checkpoints[-1]}", outputs)


def _processor_for(run: RunConfig, backbone: Backbone, seed: int) -> CacheProcessor:
    if run.processor_path is not None:
        processor = load_processor(run.processor_path, backbone.config)
        processor.k = run.k
        return processor
    return CacheProcessor(run.processor_config(), backbone.config, seed=seed)


def train_processor(run: RunConfig) -> RunOutcome:
    backbone = load_backbone(run.backbone_path)
    traces = load_traces(run.data_path, backbone.config.vocab_size)
    processor = _processor_for(run, backbone, run.seeds[0])
    report = parameter_report(processor, backbone.params.count())
    logger.info(
        "Processor has %d parameters (%.1f%% of the backbone)",
        report["processor_params"], 100 * report["ratio"],
    )
    config = run.train_config(Stage.PROCESSOR, seed=run.seeds[0])
    result = train_loop(config, backbone, traces, run.output_dir, processor)
    outputs = {"checkpoint": result.checkpoints[-1], "metrics": result.metrics_path}
    return RunOutcome(True, f"Processor training finished; last checkpoint {result.checkpoints[-1]}", outputs)


def evaluate(run: RunConfig) -> RunOutcome:
    backbone = load_backbone(run.backbone_path)
    processor = None
    if run.processor_path is not None:
        processor = load_processor(run.processor_path, backbone.config)
        processor.k = run.k
    heldout = load_traces(run.heldout_path, backbone.config.vocab_size)
    outputs = {"records": run.output_dir / "eval.jsonl", "summary": run.output_dir / "eval-summary.json"}
    summary, _ = run_eval(
        backbone,
        heldout,
        build_vocab(run.task),
        run.trigger,
        processor,
        run.R,
        run.max_new,
        baseline=run.baseline,
        records_path=outputs["records"],
        next_step=True,
    )
    _write_json(outputs["summary"], summary.model_dump(mode="json"))
    if summary.accuracy is None:
        return RunOutcome(True, "Eval: 0 examples", outputs)
    return RunOutcome(
        True, f"Eval: {summary.correct}/{summary.examples} correct ({summary.accuracy:.3f})", outputs
    )


def _sweep(axis: SweepAxis) -> Callable[[RunConfig], RunOutcome]:
    def run_sweep(run: RunConfig) -> RunOutcome:
        points = ablation_sweep(run, axis, run.grid, run.workers)
        failed = sum(point.status == "failed" for point in points)
        outputs = {"results": run.output_dir / f"ablate-{axis.value}.csv"}
        return RunOutcome(
            True, f"Sweep over {axis.value}: {len(points)} points, {failed} failed", outputs
        )

    return run_sweep


def epoch_matched(run: RunConfig) -> RunOutcome:
    """
    Compare SFT@N with Bottleneck@N: the SFT checkpoint of epoch N-1 plus one
    processor epoch, so both variants see N passes over the data.
    """
    n = run.train.epochs
    if n < 1:
        raise ValueError("epoch-matched comparison needs train.epochs >= 1")
    vocab = build_vocab(run.task)
    traces = load_traces(run.data_path, run.backbone.vocab_size)
    heldout = load_traces(run.heldout_path, run.backbone.vocab_size)
    results_path = run.output_dir / "epoch-matched.csv"
    rows = []
    for seed in run.seeds:
        seed_dir = run.output_dir / f"seed{seed}"
        backbone = Backbone(run.backbone, seed=seed)
        sft_dir = seed_dir / "sft"
        previous = sft_dir / f"{Stage.SFT.value}-epoch{n - 1}"

        def keep_previous(epoch: int) -> None:
            if epoch == n - 1 and not previous.exists():
                save_backbone(previous, backbone, epoch=epoch)

        train_loop(run.train_config(Stage.SFT, seed=seed), backbone, traces, sft_dir, on_epoch_end=keep_previous)
        sft_summary, _ = run_eval(
            backbone, heldout, vocab, run.trigger, None, run.R, run.max_new,
            records_path=seed_dir / "sft-eval.jsonl", next_step=True,
        )

        base = load_backbone(previous)
        processor = CacheProcessor(run.processor_config(), base.config, seed=seed)
        config = run.train_config(Stage.PROCESSOR, seed=seed, epochs=1)
        train_loop(config, base, traces, seed_dir / "processor", processor)
        bottleneck_summary, _ = run_eval(
            base, heldout, vocab, run.trigger, processor, run.R, run.max_new,
            records_path=seed_dir / "bottleneck-eval.jsonl", next_step=True,
        )
        for variant, summary in (("sft", sft_summary), ("bottleneck", bottleneck_summary)):
            rows.append(
                {
                    "variant": variant,
                    "epochs": n,
                    "seed": seed,
                    "accuracy": "" if summary.accuracy is None else summary.accuracy,
                    "next_step_ce": "" if summary.next_step_ce is None else summary.next_step_ce,
                }
            )
    results_path.parent.mkdir(parents=True, exist_ok=True)
    with open(results_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(
            f, fieldnames=["variant", "epochs", "seed", "accuracy", "next_step_ce"], lineterminator="\n"
        )
        writer.writeheader()
        writer.writerows(rows)
    return RunOutcome(True, f"Epoch-matched comparison at N={n} written", {"results": results_path})


def instrument(run: RunConfig) -> RunOutcome:
    backbone = load_backbone(run.backbone_path)
    if run.processor_path is None:
        logger.warning("No --processor given; instrumenting a freshly initialized processor")
    processor = _processor_for(run, backbone, run.seeds[0])
    processor.instrument = True
    heldout = load_traces(run.heldout_path, backbone.config.vocab_size)
    invocations: list[InvocationRecord] = []
    run_eval(
        backbone, heldout, build_vocab(run.task), run.trigger, processor, run.R, run.max_new,
        records_path=run.output_dir / "eval.jsonl", invocation_log=invocations,
    )
    series, heads = measure_rewrite_magnitudes(invocations)
    outputs = {
        "invocation_stats": run.output_dir / settings.invocation_stats_filename,
        "head_heatmap": run.output_dir / "head_stats.csv",
        "selection": run.output_dir / "selection.csv",
        "records": run.output_dir / "invocations",
    }
    write_invocation_stats(outputs["invocation_stats"], series)
    write_head_stats(outputs["head_heatmap"], heads)
    write_selection_dump(outputs["selection"], invocations)
    save_invocation_records(outputs["records"], invocations)
    return RunOutcome(True, f"Measured {len(series)} invocations", outputs)


def ib_verify(run: RunConfig) -> RunOutcome:
    report = run_ib_suite(run.trials, run.bound_trials, run.seeds[0])
    path = run.output_dir / "ib-report.json"
    write_report(path, report)
    message = (
        f"DPI violations: {report.dpi_violations}/{report.dpi_trials}, "
        f"bound violations: {report.bound_violations}/{report.bound_trials}"
    )
    return RunOutcome(report.ok, message, {"report": path})


COMMANDS: dict[Command, Callable[[RunConfig], RunOutcome]] = {
    Command.GEN_DATA: gen_data,
    Command.TRAIN_BACKBONE: train_backbone,
    Command.TRAIN_PROCESSOR: train_processor,
    Command.EVAL: evaluate,
    Command.ABLATE_K: _sweep(SweepAxis.K),
    Command.ABLATE_RSW: _sweep(SweepAxis.R),
    Command.ABLATE_SIZE: _sweep(SweepAxis.FF),
    Command.EPOCH_MATCHED: epoch_matched,
    Command.INSTRUMENT: instrument,
    Command.IB_VERIFY: ib_verify,
}


def dispatch(run: RunConfig) -> RunOutcome:
    run.output_dir.mkdir(parents=True, exist_ok=True)
    logger.info("Running %s into %s", run.command.value, run.output_dir)
    return COMMANDS[run.command](run)
