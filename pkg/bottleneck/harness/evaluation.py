import logging
from pathlib import Path
from typing import Optional, Sequence

from ..data.synthetic import extract_answer, gold_answer
from ..data.vocab import EOS, Vocab
from ..enums import BaselineKind, TriggerMode
from ..model.backbone import Backbone
from ..model.baselines import insert_pause_tokens, latent_rollout_decode
from ..model.processor import CacheProcessor, InvocationRecord, ProcessorHook
from ..schemas.config import BaselineConfig
from ..schemas.stats import EvalRecord, EvalSummary
from ..schemas.trace import Trace
from ..training.processor_train import next_step_cross_entropy

logger = logging.getLogger(__name__)


def check_compatible(backbone: Backbone, processor: CacheProcessor) -> None:
    """
    Raises:
        ValueError: If the processor was built for a different (L, H, d_k).
    """
    mine = (backbone.config.n_layers, backbone.config.n_heads, backbone.config.d_k)
    theirs = (processor.backbone.n_layers, processor.backbone.n_heads, processor.backbone.d_k)
    if mine != theirs:
        raise ValueError(f"Processor expects (L, H, d_k) = {theirs}, backbone has {mine}")


def _gold(trace: Trace, vocab: Vocab) -> str:
    if "answer" in trace.meta:
        return gold_answer(trace)
    gold = extract_answer(trace.completion, vocab)
    if not gold:
        raise ValueError(f"trace {trace.meta.get('id', '?')} has no gold answer")
    return gold


def run_eval(
    backbone: Backbone,
    traces: Sequence[Trace],
    vocab: Vocab,
    trigger: TriggerMode = TriggerMode.NEWLINE,
    processor: Optional[CacheProcessor] = None,
    R: Optional[int] = None,
    max_new: int = 96,
    baseline: Optional[BaselineConfig] = None,
    records_path: Optional[Path] = None,
    prompt_newlines_trigger: bool = False,
    next_step: bool = False,
    invocation_log: Optional[list[InvocationRecord]] = None,
) -> tuple[EvalSummary, list[EvalRecord]]:
    """
    Greedy pass@1 over `traces` with exact-match answer scoring.

    The processor, when given, is hooked into generation per `trigger`; with
    `trigger=none` or no processor the backbone decodes alone.

    Args:
        backbone (Backbone): Decoder under evaluation.
        traces (Sequence[Trace]): Problems; only the prompt is fed to the model.
        vocab (Vocab): Vocabulary used to read answers.
        trigger (TriggerMode, optional): When the processor runs.
        processor (CacheProcessor | None, optional): Trained processor.
        R (int | None, optional): Window size for every_R.
        max_new (int, optional): Generation budget per problem.
        baseline (BaselineConfig | None, optional): Pause or latent-rollout decoding.
        records_path (Path | None, optional): Per-example JSONL output.
        prompt_newlines_trigger (bool, optional): Also rewrite at prompt newlines.
        next_step (bool, optional): Also report teacher-forced next-step CE.
        invocation_log (list[InvocationRecord] | None, optional): Receives
            every invocation record produced during decoding.

    Returns:
        tuple[EvalSummary, list[EvalRecord]]: Accuracy (None for an empty
            dataset) and one record per problem.

    Raises:
        ValueError: If the processor does not fit the backbone, or if a
            processor is combined with a token-mediated baseline.
    """
    use_processor = processor is not None and trigger != TriggerMode.NONE
    if processor is not None:
        check_compatible(backbone, processor)
    if use_processor and baseline is not None:
        raise ValueError("a processor cannot be combined with a token-mediated baseline")

    records = []
    for i, trace in enumerate(traces):
        gold = _gold(trace, vocab)
        hooks = []
        hook = None
        if use_processor:
            hook = ProcessorHook(processor, trigger, R, prompt_newlines_trigger)
            hooks.append(hook)

        if baseline is not None and baseline.kind == BaselineKind.LATENT_ROLLOUT:
            prompt = trace.prompt
            tokens = latent_rollout_decode(backbone, prompt, baseline.n_special, max_new, EOS)
        else:
            if baseline is not None and baseline.kind == BaselineKind.PAUSE:
                trace = insert_pause_tokens(trace, baseline.n_special)
            prompt = trace.prompt
            tokens = backbone.greedy_generate(prompt, max_new, hooks=hooks, eos_id=EOS)

        completion = tokens[len(prompt) :]
        predicted = extract_answer(completion, vocab)
        records.append(
            EvalRecord(
                index=i,
                problem_id=str(trace.meta.get("id", i)),
                tokens=tokens,
                completion=completion,
                invocations=hook.invocations if hook is not None else 0,
                predicted=predicted,
                gold=gold,
                correct=predicted == gold,
            )
        )
        if hook is not None and invocation_log is not None:
            invocation_log.extend(hook.records)

    correct = sum(r.correct for r in records)
    summary = EvalSummary(
        examples=len(records),
        correct=correct,
        accuracy=correct / len(records) if records else None,
    )
    if next_step and traces and baseline is None:
        summary.next_step_ce = next_step_cross_entropy(
            backbone, processor if use_processor else None, traces, trigger, R
        )
    if records_path is not None:
        write_records(records_path, records)
    logger.info("Eval: %d/%d correct", correct, len(records))
    return summary, records


def write_records(path: Path, records: Sequence[EvalRecord]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(record.model_dump_json())
            f.write("\n")


def load_records(path: Path) -> list[EvalRecord]:
    with open(path, encoding="utf-8") as f:
        return [EvalRecord.model_validate_json(line) for line in f if line.strip()]
