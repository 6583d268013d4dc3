"""
flatdiv command-line application
"""

import logging
import uuid
from pathlib import Path
from typing import Annotated, Callable, List, Optional, Type

import typer
from pydantic import BaseModel
from rich import box
from rich.console import Console
from rich.markup import escape
from rich.table import Table

from flatdiv import __version__
from flatdiv.core.config import get_global_settings
from flatdiv.core.error_handler import error_handler
from flatdiv.core.logging_config import configure_logging
from flatdiv.core.presets import PRESETS
from flatdiv.models.configs import MeasureConfig, TheoryCurveConfig, TrainConfig, VerifyConfig
from flatdiv.models.reports import RunManifest
from flatdiv.services.harness import ExperimentRunner, resolve_config

# Get global settings instance
settings = get_global_settings()

configure_logging(settings.LOG_LEVEL)

logger = logging.getLogger(__name__)

app = typer.Typer(
    name="flatdiv",
    help="Sharpness-diversity experiments for flat ensembles",
    add_completion=False,
    rich_markup_mode="rich",
)

console = Console()

ConfigOption = Annotated[Optional[Path], typer.Option(
    "--config", "-c", help="TOML config file with nested sections")]
SetOption = Annotated[Optional[List[str]], typer.Option(
    "--set", "-s", help="Override a config key, e.g. --set sweep.k_values=[2,4]")]
PresetOption = Annotated[Optional[str], typer.Option(
    "--preset", "-p", help="Named preset applied before the config file")]
SeedOption = Annotated[Optional[int], typer.Option(
    "--seed", help="Master seed", min=0)]
OutOption = Annotated[Optional[str], typer.Option(
    "--out", "-o", help="Output directory")]


def render_manifest(manifest: RunManifest) -> None:
    table = Table(
        title=f"[bold cyan]{manifest.command}[/bold cyan] [dim]{manifest.config_hash[:12]}[/dim]",
        box=box.ROUNDED,
        show_header=True,
        header_style="bold magenta",
    )
    table.add_column("File", style="cyan", no_wrap=True)
    table.add_column("Rows", justify="right")
    table.add_column("SHA-256", style="dim white")
    for item in manifest.files:
        table.add_row(item.path, "" if item.rows is None else str(item.rows), item.sha256[:16])
    console.print(table)

    for key, value in manifest.summary.items():
        console.print(f"[bold]{key}[/bold]: {escape(str(value))}")


def run_command(
    command: str,
    model_cls: Type[BaseModel],
    execute: Callable[[ExperimentRunner, BaseModel], RunManifest],
    config_file: Optional[Path],
    overrides: Optional[List[str]],
    preset: Optional[str],
    seed: Optional[int],
    out: Optional[str],
) -> None:
    """Resolve the config, run the command and map failures to exit codes."""
    run_id = str(uuid.uuid4())
    error_handler.start_run_timing(run_id)
    try:
        config = resolve_config(model_cls, command, preset=preset, config_file=config_file,
                                overrides=overrides or [], seed=seed, output_dir=out, settings=settings)
        manifest = execute(ExperimentRunner(settings), config)
    except Exception as exc:
        error_code, message = error_handler.handle_exception(exc, run_id=run_id, command=command)
        console.print(f"[bold red]{error_code.value}[/bold red]: {escape(message)}")
        raise typer.Exit(code=error_handler.exit_code_for(error_code))

    duration = error_handler.get_run_duration(run_id)
    logger.info("Run finished", extra={"context": {"run_id": run_id, "command": command,
                                                    "duration_seconds": round(duration or 0.0, 3)}})
    render_manifest(manifest)


@app.command("theory-curve")
def theory_curve(config: ConfigOption = None, overrides: SetOption = None, preset: PresetOption = None,
                 seed: SeedOption = None, out: OutOption = None):
    """Analytic sharpness-diversity curves for SAM and SharpBalance"""
    run_command("theory-curve", TheoryCurveConfig, lambda runner, cfg: runner.theory_curve(cfg),
                config, overrides, preset, seed, out)


@app.command()
def verify(config: ConfigOption = None, overrides: SetOption = None, preset: PresetOption = None,
           seed: SeedOption = None, out: OutOption = None):
    """Check the closed-form results against quadratic Monte-Carlo simulation"""
    run_command("verify", VerifyConfig, lambda runner, cfg: runner.verify(cfg),
                config, overrides, preset, seed, out)


@app.command()
def train(config: ConfigOption = None, overrides: SetOption = None, preset: PresetOption = None,
          seed: SeedOption = None, out: OutOption = None):
    """Train toy ensembles with SGD, SAM or SharpBalance and evaluate them"""
    run_command("train", TrainConfig, lambda runner, cfg: runner.train(cfg),
                config, overrides, preset, seed, out)


@app.command()
def measure(config: ConfigOption = None, overrides: SetOption = None, preset: PresetOption = None,
            seed: SeedOption = None, out: OutOption = None):
    """Recompute metrics on stored checkpoints"""
    run_command("measure", MeasureConfig, lambda runner, cfg: runner.measure(cfg),
                config, overrides, preset, seed, out)


@app.command()
def presets():
    """List the named presets of every command"""
    table = Table(title="[bold cyan]Presets[/bold cyan]", box=box.ROUNDED, header_style="bold magenta")
    table.add_column("Command", style="cyan", no_wrap=True)
    table.add_column("Preset", style="white")
    for command, named in PRESETS.items():
        for name in sorted(named):
            table.add_row(command, name)
    console.print(table)


@app.command()
def version():
    """Show the tool version"""
    console.print(f"flatdiv {__version__}")


if __name__ == "__main__":
    app()
