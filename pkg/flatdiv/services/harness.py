"""
Experiment harness: config resolution, orchestration and result persistence.

Every command resolves its config (preset, then TOML file, then --set overrides, then
--seed/--out), writes resolved_config.json, runs, and finishes with manifest.json listing
every emitted file with its row count and SHA-256.
"""

import csv
import hashlib
import io
import json
import logging
import tomllib
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Type, TypeVar, Union

import numpy as np
from pydantic import BaseModel, ValidationError
from scipy import stats

from flatdiv.core.config import Settings, get_global_settings
from flatdiv.core.error_handler import (
    CheckpointError,
    ConfigValidationError,
    FlatDivError,
    VerificationFailedError,
    error_handler,
)
from flatdiv.core.presets import get_preset
from flatdiv.models.configs import (
    MeasureConfig,
    Optimizer,
    QuadSetup,
    SharpnessNorm,
    TheoryCurveConfig,
    TrainConfig,
    Variant,
    VerifyConfig,
)
from flatdiv.models.reports import (
    VERIFICATION_COLUMNS,
    ManifestFile,
    MetricReport,
    RunManifest,
    TheoryPoint,
)
from flatdiv.services import combinatorics, nn_ensemble, quad_sim, theory
from flatdiv.services.checkpoint import load_checkpoint, save_checkpoint
from flatdiv.services.numkernel import RngStream

logger = logging.getLogger(__name__)

ConfigT = TypeVar("ConfigT", bound=BaseModel)

THEORY_COLUMNS = ["variant", "rho", "k", "diversity", "sharp_lower", "sharp_upper", "error"]

# Child streams of the master seed per command
_STREAM_VERIFY = 0
_STREAM_TRAIN = 1
_STREAM_MEASURE = 2


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False, default=str)


def config_hash(config: BaseModel) -> str:
    """SHA-256 of the canonical JSON form of a resolved config."""
    return hashlib.sha256(canonical_json(config.model_dump(mode="json")).encode("utf-8")).hexdigest()


def format_cell(value: Any) -> str:
    """Locale-free CSV cell text; floats round-trip exactly."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def deep_merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    """Merge nested dicts in place; non-dict values in update replace base values."""
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            deep_merge(base[key], value)
        else:
            base[key] = value
    return base


def parse_override(item: str) -> Tuple[List[str], Any]:
    """
    Parse a ``dotted.key=value`` override.

    The value is read as a TOML value (numbers, booleans, strings, arrays); anything TOML
    rejects is kept as a raw string.
    """
    key, sep, raw = item.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigValidationError(f"override '{item}' must look like key=value")
    try:
        value = tomllib.loads(f"value = {raw.strip()}")["value"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return key.split("."), value


def set_dotted(tree: Dict[str, Any], path: Sequence[str], value: Any) -> None:
    node = tree
    for part in path[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigValidationError(f"override path {'.'.join(path)} crosses non-table key '{part}'")
        node = child
    node[path[-1]] = value


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    try:
        with path.open("rb") as handle:
            return tomllib.load(handle)
    except FileNotFoundError as exc:
        raise ConfigValidationError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigValidationError(f"config file {path} is not valid TOML: {exc}") from exc


def resolve_config(
    model_cls: Type[ConfigT],
    command: str,
    preset: Optional[str] = None,
    config_file: Optional[Union[str, Path]] = None,
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
    output_dir: Optional[str] = None,
    settings: Optional[Settings] = None,
) -> ConfigT:
    """
    Build a command config from its layers.

    Raises:
        ConfigValidationError: unknown preset, unreadable file, malformed override, or a
            value the model rejects (message lists dotted key paths)
    """
    settings = settings or get_global_settings()
    tree: Dict[str, Any] = settings.get_runtime_config()
    if model_cls is VerifyConfig:
        tree["sweep"] = {"stability_policy": settings.STABILITY_POLICY}
    if preset:
        deep_merge(tree, get_preset(command, preset))
    if config_file:
        deep_merge(tree, load_config_file(config_file))
    for item in overrides:
        set_dotted(tree, *parse_override(item))
    if seed is not None:
        tree["master_seed"] = seed
    if output_dir is not None:
        tree["output_dir"] = output_dir

    try:
        return model_cls.model_validate(tree)
    except ValidationError as exc:
        raise ConfigValidationError(
            f"Invalid configuration: {error_handler.format_validation_error(exc)}",
            details={"errors": [".".join(str(p) for p in e.get("loc", ())) for e in exc.errors()]},
        ) from exc


class ResultWriter:
    """Single writer for every file of one run; tracks what goes into the manifest."""

    def __init__(self, output_dir: Union[str, Path]):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.files: List[ManifestFile] = []
        self.logger = logging.getLogger(__name__)

    def _record(self, relative: str, data: bytes, rows: Optional[int]) -> Path:
        path = self.output_dir / relative
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        self.files = [f for f in self.files if f.path != relative]
        self.files.append(ManifestFile(path=relative, rows=rows, sha256=hashlib.sha256(data).hexdigest()))
        self.logger.debug("Result written", extra={"context": {"path": str(path), "rows": rows}})
        return path

    def write_csv(self, relative: str, columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(columns)
        count = 0
        for row in rows:
            writer.writerow([format_cell(value) for value in row])
            count += 1
        return self._record(relative, buffer.getvalue().encode("utf-8"), count)

    def write_json(self, relative: str, payload: Any) -> Path:
        text = json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False, default=str) + "\n"
        return self._record(relative, text.encode("utf-8"), None)

    def register(self, relative: str) -> None:
        """Add a file written by another service (checkpoints) to the manifest."""
        data = (self.output_dir / relative).read_bytes()
        self.files.append(ManifestFile(path=relative, rows=None, sha256=hashlib.sha256(data).hexdigest()))

    def write_manifest(self, manifest: RunManifest) -> Path:
        manifest.files = list(self.files)
        path = self.output_dir / "manifest.json"
        path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
        return path


def _rho_label(rho: float) -> str:
    return repr(float(rho)).replace(".", "p")


def _mean_std(values: Sequence[float]) -> Tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    std = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
    return float(np.mean(arr)), std


def _spearman(xs: Sequence[float], ys: Sequence[float]) -> Optional[float]:
    if len(xs) < 3:
        return None
    result = stats.spearmanr(xs, ys)
    value = float(result.statistic)
    return value if np.isfinite(value) else None


class ExperimentRunner:
    """Runs the four commands against a ResultWriter and a RunManifest."""

    def __init__(self, settings: Optional[Settings] = None):
        self.settings = settings or get_global_settings()
        self.logger = logging.getLogger(__name__)

    def _start(self, command: str, config: BaseModel) -> Tuple[ResultWriter, RunManifest]:
        writer = ResultWriter(config.output_dir)
        digest = config_hash(config)
        writer.write_json("resolved_config.json", config.model_dump(mode="json"))
        manifest = RunManifest(command=command, config_hash=digest, tool_version=self.settings.TOOL_VERSION)
        self.logger.info("Run started", extra={"context": {"command": command, "config_hash": digest,
                                                            "output_dir": config.output_dir}})
        return writer, manifest

    def _finish(self, writer: ResultWriter, manifest: RunManifest, status: str = "succeeded") -> RunManifest:
        manifest.status = status
        writer.write_manifest(manifest)
        return manifest

    def _fail(self, writer: ResultWriter, manifest: RunManifest, exc: FlatDivError) -> None:
        manifest.error = error_handler.create_error_report(exc.code, exc.message, exc.details)
        self._finish(writer, manifest, status="failed")

    def theory_curve(self, config: TheoryCurveConfig) -> RunManifest:
        """Analytic trade-off curves for the configured variants, plus the dominance report."""
        writer, manifest = self._start("theory-curve", config)
        curve = config.curve
        try:
            curves: Dict[str, List[TheoryPoint]] = {}
            for variant in curve.variants:
                variant = Variant(variant)
                curves[variant.value] = theory.tradeoff_curve(curve.theory_config(), curve.rho_grid, variant)

            rows = [[getattr(p, column) for column in THEORY_COLUMNS]
                    for points in curves.values() for p in points]
            writer.write_csv("theory_curve.csv", THEORY_COLUMNS, rows)

            summary: Dict[str, Any] = {"points": len(rows),
                                       "failed_points": sum(1 for r in rows if r[-1] is not None)}
            if Variant.SAM.value in curves and Variant.SHARPBALANCE.value in curves:
                dominance = theory.dominance_check(curves[Variant.SAM.value], curves[Variant.SHARPBALANCE.value])
                writer.write_json("dominance.json", dominance.model_dump(mode="json"))
                summary.update(dominates=dominance.dominates, strict_points=dominance.strict_points)
            manifest.summary = summary
        except FlatDivError as exc:
            self._fail(writer, manifest, exc)
            raise
        return self._finish(writer, manifest)

    def verify(self, config: VerifyConfig) -> RunManifest:
        """
        Monte-Carlo verification of the closed-form results over a sweep grid.

        Raises:
            VerificationFailedError: any cell failed; outputs are written first
        """
        writer, manifest = self._start("verify", config)
        sweep = config.sweep
        rng = RngStream(config.master_seed).derive(_STREAM_VERIFY)
        try:
            results = quad_sim.verify_theorems(sweep, rng, config.parallelism)
            writer.write_csv("verification.csv", VERIFICATION_COLUMNS + ["error"],
                             (row.csv_values() + [row.error] for row in results))
            skipped = [i for i, row in enumerate(results) if row.skipped]
            failed = [i for i, row in enumerate(results) if not row.passed and not row.skipped]
            manifest.summary = {"cells": len(results),
                                "passed": len(results) - len(failed) - len(skipped),
                                "failed_cells": failed, "skipped_cells": skipped,
                                "phi_quadrature_max_rel_gap": self._quadrature_gap(config)}
        except FlatDivError as exc:
            self._fail(writer, manifest, exc)
            raise

        if failed:
            exc = VerificationFailedError(f"{len(failed)} of {len(results)} verification cells failed",
                                          details={"failed_cells": failed})
            self._fail(writer, manifest, exc)
            raise exc
        return self._finish(writer, manifest)

    def _quadrature_gap(self, config: VerifyConfig) -> Optional[float]:
        """Largest relative gap between phi(2k, 0) and its spectral quadrature over the sweep."""
        gaps = []
        for cell in quad_sim.sweep_cells(config.sweep):
            try:
                params = QuadSetup(
                    n_tr=config.sweep.n_tr, d_in=config.sweep.d_in, n_te=config.sweep.n_te,
                    eta=cell.eta, rho=cell.rho, k=cell.k, S=cell.S,
                ).phi_params()
                if params.q < 1:
                    continue
                exact = combinatorics.phi(params, 2 * cell.k, 0)
                quadrature = combinatorics.marchenko_pastur_expectation(params, 2 * cell.k, 0)
            except (FlatDivError, ValidationError):
                continue
            gaps.append(abs(exact - quadrature) / max(abs(exact), 1e-300))
        return max(gaps) if gaps else None

    def train(self, config: TrainConfig) -> RunManifest:
        """
        Train ensembles over the optimizer/radius grid and aggregate their metrics.

        Ensemble e uses the same member seeds for every optimizer and radius, so runs are paired.
        """
        writer, manifest = self._start("train", config)
        base = RngStream(config.master_seed).derive(_STREAM_TRAIN)
        optimizers = [Optimizer(o) for o in config.compare_optimizers] or [Optimizer(config.ensemble.optimizer)]
        radii = list(config.rho_sweep) or [config.ensemble.rho]
        digest = manifest.config_hash
        provenance = config.model_dump(mode="json")

        runs: List[Tuple[Optimizer, float, int, MetricReport]] = []
        try:
            for optimizer in optimizers:
                for rho in radii:
                    ensemble_cfg = config.ensemble.model_copy(update={"optimizer": optimizer, "rho": float(rho)})
                    for e in range(config.n_ensembles):
                        tag = f"{optimizer.value}_rho{_rho_label(rho)}_e{e}"
                        trained = nn_ensemble.train_ensemble(
                            config.task, ensemble_cfg, base.derive(e), config.sharpness,
                            [SharpnessNorm(n) for n in config.sharpness_norms],
                            parallelism=config.parallelism, provenance=provenance, config_hash=digest,
                        )
                        if config.save_checkpoints:
                            for i, model in enumerate(trained.members):
                                relative = f"checkpoints/{tag}_m{i}.fdck"
                                save_checkpoint(model, writer.output_dir / relative)
                                writer.register(relative)
                        writer.write_json(f"metrics/{tag}.json", trained.report.model_dump(mode="json"))
                        runs.append((optimizer, float(rho), e, trained.report))
                        self.logger.info("Ensemble finished", extra={"context": {
                            "tag": tag, "id_accuracy": trained.report.metrics.get("id_accuracy")}})
        except FlatDivError as exc:
            manifest.summary = {"completed_ensembles": len(runs)}
            self._fail(writer, manifest, exc)
            raise

        metric_names: List[str] = []
        for _, _, _, report in runs:
            metric_names.extend(name for name in report.metrics if name not in metric_names)
        writer.write_csv(
            "ensembles.csv", ["optimizer", "rho", "ensemble"] + metric_names,
            ([opt.value, rho, e] + [report.metrics.get(name) for name in metric_names]
             for opt, rho, e, report in runs),
        )

        summary_rows = []
        grouped: Dict[Tuple[str, float], List[MetricReport]] = {}
        for opt, rho, _, report in runs:
            grouped.setdefault((opt.value, rho), []).append(report)
        for (opt, rho), reports in grouped.items():
            for name in metric_names:
                values = [r.metrics[name] for r in reports if name in r.metrics]
                if values:
                    mean, std = _mean_std(values)
                    summary_rows.append([opt, rho, name, mean, std, len(values)])
        writer.write_csv("summary.csv", ["optimizer", "rho", "metric", "mean", "std", "n"], summary_rows)

        manifest.summary = self._train_summary(config, grouped)
        return self._finish(writer, manifest)

    def _train_summary(self, config: TrainConfig, grouped: Dict[Tuple[str, float], List[MetricReport]]) -> Dict[str, Any]:
        sharpness_key = f"sharpness_{SharpnessNorm(config.sharpness_norms[0]).value}_mean"

        def mean_of(reports: List[MetricReport], name: str) -> Optional[float]:
            values = [r.metrics[name] for r in reports if name in r.metrics]
            return float(np.mean(values)) if values else None

        summary: Dict[str, Any] = {"ensembles": sum(len(r) for r in grouped.values())}
        correlations = {}
        for opt in sorted({key[0] for key in grouped}):
            points = [(mean_of(reports, sharpness_key), mean_of(reports, "der"))
                      for (o, _), reports in sorted(grouped.items()) if o == opt]
            points = [p for p in points if p[0] is not None and p[1] is not None]
            correlations[opt] = _spearman([p[0] for p in points], [p[1] for p in points])
        summary["spearman_sharpness_der"] = correlations

        sam = [r for (o, _), reports in grouped.items() if o == Optimizer.SAM.value for r in reports]
        balanced = [r for (o, _), reports in grouped.items() if o == Optimizer.SHARPBALANCE.value for r in reports]
        if sam and balanced:
            summary["paired_comparison"] = {
                "der_sam": mean_of(sam, "der"),
                "der_sharpbalance": mean_of(balanced, "der"),
                "ood_accuracy_s3_sam": mean_of(sam, "ood_accuracy_s3"),
                "ood_accuracy_s3_sharpbalance": mean_of(balanced, "ood_accuracy_s3"),
            }
        return summary

    def measure(self, config: MeasureConfig) -> RunManifest:
        """
        Recompute metrics on stored checkpoints without retraining.

        Raises:
            CheckpointError: unreadable checkpoint, or dims that disagree with the task
        """
        writer, manifest = self._start("measure", config)
        try:
            members = [load_checkpoint(path) for path in config.checkpoints]
            for path, model in zip(config.checkpoints, members):
                d_in, _, classes = model.dims
                if (d_in, classes) != (config.task.d_in, config.task.n_classes):
                    raise CheckpointError(
                        f"checkpoint {path} has d_in={d_in}, classes={classes}; task needs "
                        f"d_in={config.task.d_in}, classes={config.task.n_classes}"
                    )
            if len({model.dims for model in members}) > 1:
                raise CheckpointError("checkpoints disagree on network dims")

            data = nn_ensemble.generate_task(config.task)
            report = nn_ensemble.evaluate_ensemble(
                members, data, config.combine, config.sharpness,
                [SharpnessNorm(n) for n in config.sharpness_norms],
                RngStream(config.master_seed).derive(_STREAM_MEASURE),
                seed=config.master_seed, provenance=config.model_dump(mode="json"),
                config_hash=manifest.config_hash,
            )
            writer.write_json("measurements.json", report.model_dump(mode="json"))
            manifest.summary = {"members": len(members), "metrics": len(report.metrics)}
        except FlatDivError as exc:
            self._fail(writer, manifest, exc)
            raise
        return self._finish(writer, manifest)
