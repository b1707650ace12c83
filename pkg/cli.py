import json
import logging
import sys
from pathlib import Path
from typing import Annotated, Any, Optional

import click
import typer
from pydantic import ValidationError
from rich import print

from bottleneck.core.config import settings
from bottleneck.core.logging import configure_logging
from bottleneck.enums import BaselineKind, Command, TriggerMode
from bottleneck.harness.runner import dispatch
from bottleneck.schemas.config import RunConfig

logger = logging.getLogger(__name__)

app = typer.Typer(add_completion=False, help=f"{settings.app_name} {settings.app_version}")


def _read_config(path: Optional[Path]) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as f:
            document = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise click.BadParameter(str(e), param_hint="'--config'") from e
    if not isinstance(document, dict):
        raise click.BadParameter("config must be a JSON object", param_hint="'--config'")
    return document


def _merge(document: dict[str, Any], flags: dict[str, Any], section: Optional[str] = None) -> None:
    target = document
    if section is not None:
        target = document.setdefault(section, {}) or {}
        document[section] = target
    for key, value in flags.items():
        if value is not None:
            target[key] = value


def _usage_message(error: ValidationError) -> str:
    return "; ".join(
        err["msg"].removeprefix("Value error, ") for err in error.errors(include_url=False)
    )


def run_command(
    ctx: typer.Context,
    config: Annotated[Optional[Path], typer.Option(help="JSON run configuration; flags override it")] = None,
    data: Annotated[Optional[Path], typer.Option("--data", help="Training traces (JSONL)")] = None,
    heldout: Annotated[Optional[Path], typer.Option("--heldout", help="Held-out traces (JSONL)")] = None,
    backbone: Annotated[Optional[Path], typer.Option("--backbone", help="Backbone checkpoint directory")] = None,
    processor: Annotated[Optional[Path], typer.Option("--processor", help="Processor checkpoint directory")] = None,
    out: Annotated[Optional[Path], typer.Option("--out", help="Output directory")] = None,
    trigger: Annotated[Optional[TriggerMode], typer.Option(help="Processor trigger")] = None,
    k: Annotated[Optional[int], typer.Option("--k", help="Reconsolidation budget per layer")] = None,
    R: Annotated[Optional[int], typer.Option("--R", help="Window size for every_R")] = None,
    seed: Annotated[Optional[list[int]], typer.Option("--seed", help="Seed; repeat for several")] = None,
    grid: Annotated[Optional[list[int]], typer.Option("--grid", help="Sweep value; repeat for several")] = None,
    n_train: Annotated[Optional[int], typer.Option(help="Generated training traces")] = None,
    n_heldout: Annotated[Optional[int], typer.Option(help="Generated held-out traces")] = None,
    max_new: Annotated[Optional[int], typer.Option(help="Generation budget per problem")] = None,
    trials: Annotated[Optional[int], typer.Option(help="Random chains checked by ib-verify")] = None,
    bound_trials: Annotated[Optional[int], typer.Option(help="Random toy models checked by ib-verify")] = None,
    workers: Annotated[Optional[int], typer.Option(help="Sweep worker processes")] = None,
    epochs: Annotated[Optional[int], typer.Option(help="Training epochs")] = None,
    lr: Annotated[Optional[float], typer.Option(help="Peak learning rate")] = None,
    batch_size: Annotated[Optional[int], typer.Option(help="Traces per optimizer step")] = None,
    baseline: Annotated[Optional[BaselineKind], typer.Option(help="Token-mediated baseline")] = None,
    n_special: Annotated[Optional[int], typer.Option(help="Pause tokens or latent steps")] = None,
):
    document = _read_config(config)
    document["command"] = ctx.info_name
    _merge(
        document,
        {
            "data_path": data,
            "heldout_path": heldout,
            "backbone_path": backbone,
            "processor_path": processor,
            "output_dir": out,
            "trigger": trigger.value if trigger is not None else None,
            "k": k,
            "R": R,
            "seeds": seed or None,
            "grid": grid or None,
            "n_train": n_train,
            "n_heldout": n_heldout,
            "max_new": max_new,
            "trials": trials,
            "bound_trials": bound_trials,
            "workers": workers,
            "instrument": True if ctx.info_name == Command.INSTRUMENT.value else None,
        },
    )
    _merge(document, {"epochs": epochs, "lr": lr, "batch_size": batch_size}, section="train")
    if baseline is not None or n_special is not None:
        _merge(
            document,
            {"kind": baseline.value if baseline is not None else None, "n_special": n_special},
            section="baseline",
        )
    try:
        run = RunConfig.model_validate(document)
    except ValidationError as e:
        raise click.UsageError(_usage_message(e), ctx=ctx) from e

    try:
        outcome = dispatch(run)
    except (ValueError, RuntimeError, OSError) as e:
        logger.debug("Command failed", exc_info=True)
        print(f"[bold red]Error:[/bold red] {e}")
        raise typer.Exit(code=1)
    for name, path in outcome.outputs.items():
        print(f"  [bold]{name}[/bold]: {path}")
    if not outcome.ok:
        print(f"[red]{outcome.message}[/red]")
        raise typer.Exit(code=1)
    print(f"[green]{outcome.message}[/green]")


for _command in Command:
    app.command(name=_command.value)(run_command)


@app.callback()
def main(
    ctx: typer.Context,
    log_level: Annotated[Optional[str], typer.Option(help="Logging level")] = None,
):
    configure_logging(log_level)
    logger.debug("Executing the command: %s", ctx.invoked_subcommand)


def cli_main(argv: Optional[list[str]] = None) -> int:
    """
    Run the CLI without exiting the interpreter.

    Returns:
        int: 0 on success, 1 when the command fails, 2 on usage errors.
    """
    command = typer.main.get_command(app)
    try:
        result = command.main(args=argv, prog_name="bottleneck", standalone_mode=False)
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except click.exceptions.Abort:
        return 1
    return result if isinstance(result, int) else 0


if __name__ == "__main__":
    sys.exit(cli_main())
