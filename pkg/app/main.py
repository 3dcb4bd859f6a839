"""
Philautia-Eval command line.
One subcommand per pipeline step, so an audit can be replayed as a shell script.

Exit codes: 0 success, 1 validation error, 2 I/O error, 3 convergence or
degeneracy error.
"""

import os
from contextlib import contextmanager
from typing import Annotated, Dict, List, Optional

import orjson
import typer
from pydantic import TypeAdapter, ValidationError

from app.collector import collect_captions, collect_judgment_scores, collect_scores
from app.config import DEFAULT_MIN_COVERAGE, application_version
from app.exceptions import (
    AxisMismatchError,
    CollectionAbortedError,
    CombinatorialGuardError,
    ConvergenceError,
    CoverageError,
    DatasetValidationError,
    DegenerateInputError,
    MissingMemberScoreError,
    ParseError,
    PromptRenderError,
    RecordValidationError,
    SaturationError,
)
from app.logger import logger
from app.matrix import (
    build_phi,
    evaluator_extremes,
    minmax_baseline,
    phi_from_csv,
    principal_submatrix,
    reduce_manifest,
    settings_delta,
    standardize,
    standardized_from_csv,
    submatrix_scan,
    subset_rank,
)
from app.pomms import (
    HyperGrid,
    augment_phi_with_ensemble,
    build_supervised_split,
    correlate_with_humans,
    evaluate_ensemble,
    evaluate_member,
    pomms_phi_score,
    sfs_select,
)
from app.prompts import DEFAULT_BUNDLE
from app.records import load_manifest, load_records, save_manifest, save_records, validate_dataset
from app.report import build_audit_report, emit_report, load_report, render_heatmap_svg
from app.schemas import EndpointConfig, EnsembleSpec, PromptBundle, Setting, SimConfig
from app.simulator import make_panel_config, sim_manifest, simulate_judgments, simulate_scores

app = typer.Typer(help="Measure and mitigate judge self-preference with Philautia-Eval.", no_args_is_help=True)

EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_NUMERIC = 3

VALIDATION_ERRORS = (
    RecordValidationError,
    DatasetValidationError,
    CoverageError,
    ParseError,
    PromptRenderError,
    AxisMismatchError,
    MissingMemberScoreError,
    ValidationError,
    ValueError,
    KeyError,
)
NUMERIC_ERRORS = (ConvergenceError, DegenerateInputError, SaturationError, CombinatorialGuardError)

ManifestOpt = Annotated[str, typer.Option("--manifest", help="manifest.json")]
ScoresOpt = Annotated[str, typer.Option("--scores", help="scores.jsonl")]
SettingOpt = Annotated[Setting, typer.Option("--setting", help="ref-based or ref-free")]
MinCoverageOpt = Annotated[float, typer.Option("--min-coverage", help="minimum scored fraction per cell")]


@contextmanager
def exit_codes():
    """Map package errors onto the CLI exit codes."""
    try:
        yield
    except (CollectionAbortedError, OSError) as e:
        logger.error(f"I/O error: {e}")
        typer.echo(f"error: {e}", err=True)
        raise typer.Exit(EXIT_IO)
    except NUMERIC_ERRORS as e:
        logger.error(f"Numeric error: {e}")
        typer.echo(f"error: {e}", err=True)
        raise typer.Exit(EXIT_NUMERIC)
    except VALIDATION_ERRORS as e:
        logger.error(f"Validation error: {e}")
        typer.echo(f"error: {e}", err=True)
        raise typer.Exit(EXIT_VALIDATION)


def _read_json(path: str):
    with open(path, "rb") as json_file:
        return orjson.loads(json_file.read())


def _write_json(path: str, payload) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as json_file:
        json_file.write(orjson.dumps(payload, option=orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2) + b"\n")


def _load_endpoints(path: str) -> Dict[str, EndpointConfig]:
    return TypeAdapter(Dict[str, EndpointConfig]).validate_python(_read_json(path))


def _load_bundle(path: Optional[str]) -> PromptBundle:
    return PromptBundle.model_validate(_read_json(path)) if path else DEFAULT_BUNDLE


def _load_spec(path: str) -> EnsembleSpec:
    return EnsembleSpec.model_validate(_read_json(path))


def _split_ids(value: Optional[str]) -> List[str]:
    return [item.strip() for item in value.split(",") if item.strip()] if value else []


def _version_callback(value: bool):
    if value:
        typer.echo(application_version())
        raise typer.Exit()


@app.callback()
def main(
            version: Annotated[Optional[bool], typer.Option(
                "--version", callback=_version_callback, is_eager=True, help="Print the version and exit."
            )] = None
        ):
    """Philautia-Eval"""


@app.command()
def validate(
            manifest: ManifestOpt,
            scores: ScoresOpt,
            out: Annotated[Optional[str], typer.Option("--out", help="write the coverage report as JSON")] = None,
            strict: Annotated[bool, typer.Option("--strict/--no-strict")] = True
        ):
    """Check score records against the manifest and report per-cell coverage."""
    with exit_codes():
        run_manifest = load_manifest(manifest)
        report = validate_dataset(run_manifest, load_records(scores, "score"), strict=strict)
        if out:
            _write_json(out, report.model_dump(mode="json"))
        low = [cell for cell in report.cells if cell.coverage < 1.0]
        typer.echo(f"{report.total_valid} valid records, {len(low)} cells below full coverage")
        for cell in low:
            typer.echo(f"  {cell.setting.value} {cell.generator} -> {cell.evaluator}: {cell.present}/{cell.expected}")
        if not report.ok:
            raise typer.Exit(EXIT_VALIDATION)


@app.command()
def captions(
            manifest: ManifestOpt,
            endpoints: Annotated[str, typer.Option("--endpoints", help="endpoints.json keyed by generator id")],
            out: Annotated[str, typer.Option("--out", help="captions.jsonl (appended)")],
            prompts: Annotated[Optional[str], typer.Option("--prompts", help="prompts.json")] = None
        ):
    """Ask every generator to caption every image."""
    with exit_codes():
        records = collect_captions(load_manifest(manifest), _load_endpoints(endpoints), _load_bundle(prompts), out)
        typer.echo(f"{len(records)} captions in {out}")


@app.command()
def collect(
            manifest: ManifestOpt,
            captions_path: Annotated[str, typer.Option("--captions", help="captions.jsonl")],
            endpoints: Annotated[str, typer.Option("--endpoints", help="endpoints.json keyed by evaluator id")],
            journal: Annotated[str, typer.Option("--journal", help="scores.jsonl (appended)")],
            prompts: Annotated[Optional[str], typer.Option("--prompts", help="prompts.json")] = None,
            setting: Annotated[Optional[List[Setting]], typer.Option("--setting", help="repeat for both")] = None,
            retry_missing: Annotated[bool, typer.Option("--retry-missing")] = False
        ):
    """Score every caption with every evaluator, resuming from the journal."""
    with exit_codes():
        records = collect_scores(
            load_manifest(manifest),
            load_records(captions_path, "caption"),
            _load_endpoints(endpoints),
            _load_bundle(prompts),
            journal,
            settings=setting or None,
            retry_missing=retry_missing,
        )
        typer.echo(f"{len(records)} scores in {journal}")


@app.command("judge-benchmark")
def judge_benchmark(
            judgments: Annotated[str, typer.Option("--judgments", help="judgments.jsonl")],
            endpoints: Annotated[str, typer.Option("--endpoints", help="endpoints.json keyed by evaluator id")],
            journal: Annotated[str, typer.Option("--journal", help="scores.jsonl (appended)")],
            setting: SettingOpt = Setting.REFERENCE_BASED,
            prompts: Annotated[Optional[str], typer.Option("--prompts", help="prompts.json")] = None
        ):
    """Score human-rated benchmark candidates with every evaluator."""
    with exit_codes():
        records = collect_judgment_scores(
            load_records(judgments, "judgment"), _load_endpoints(endpoints), _load_bundle(prompts), setting, journal,
        )
        typer.echo(f"{len(records)} scores in {journal}")


@app.command()
def phi(
            manifest: ManifestOpt,
            scores: ScoresOpt,
            out: Annotated[str, typer.Option("--out", help="phi.csv")],
            setting: SettingOpt = Setting.REFERENCE_BASED,
            min_coverage: MinCoverageOpt = DEFAULT_MIN_COVERAGE,
            heatmap: Annotated[Optional[str], typer.Option("--heatmap", help="also render an SVG")] = None,
            minmax: Annotated[bool, typer.Option("--minmax", help="write the min-max scaled baseline instead")] = False
        ):
    """Build the mean score matrix for one setting."""
    with exit_codes():
        matrix = build_phi(load_records(scores, "score"), load_manifest(manifest), setting, min_coverage)
        if minmax:
            matrix = minmax_baseline(matrix)
        matrix.to_csv(out)
        if heatmap:
            render_heatmap_svg(matrix.values, matrix.generators, matrix.evaluators, heatmap, centered=False)


@app.command("standardize")
def standardize_command(
            phi_path: Annotated[str, typer.Option("--phi", help="phi.csv")],
            out: Annotated[str, typer.Option("--out", help="phi_tilde.csv")],
            heatmap: Annotated[Optional[str], typer.Option("--heatmap", help="also render an SVG")] = None
        ):
    """Column-then-row standardize a Phi CSV."""
    with exit_codes():
        phi_tilde = standardize(phi_from_csv(phi_path))
        phi_tilde.to_csv(out)
        for model in sorted(phi_tilde.degenerate_rows | phi_tilde.degenerate_columns):
            typer.echo(f"warning: {model} has zero variance and was set to 0", err=True)
        if heatmap:
            render_heatmap_svg(phi_tilde.values, phi_tilde.generators, phi_tilde.evaluators, heatmap)


@app.command()
def audit(
            manifest: ManifestOpt,
            scores: ScoresOpt,
            out: Annotated[str, typer.Option("--out", help="output directory")],
            setting: SettingOpt = Setting.REFERENCE_BASED,
            min_coverage: MinCoverageOpt = DEFAULT_MIN_COVERAGE,
            drop_evaluator: Annotated[Optional[List[str]], typer.Option("--drop-evaluator")] = None,
            drop_generator: Annotated[Optional[List[str]], typer.Option("--drop-generator")] = None
        ):
    """Full audit for one setting: matrices, report in every format and heatmaps."""
    with exit_codes():
        run_manifest = load_manifest(manifest)
        records = load_records(scores, "score")
        if drop_evaluator or drop_generator:
            # rebuilt from raw scores on the reduced axes, never sliced
            run_manifest = reduce_manifest(run_manifest, drop_evaluator or (), drop_generator or ())
        matrix = build_phi(records, run_manifest, setting, min_coverage)
        phi_tilde = standardize(matrix)
        report = build_audit_report(matrix, phi_tilde)

        os.makedirs(out, exist_ok=True)
        matrix.to_csv(os.path.join(out, "phi.csv"))
        phi_tilde.to_csv(os.path.join(out, "phi_tilde.csv"))
        emit_report(report, "json", os.path.join(out, "report.json"))
        emit_report(report, "markdown", os.path.join(out, "report.md"))
        emit_report(report, "csv", os.path.join(out, "report.csv"))
        render_heatmap_svg(matrix.values, matrix.generators, matrix.evaluators,
                           os.path.join(out, "phi.svg"), centered=False, title=f"Phi ({setting.value})")
        render_heatmap_svg(phi_tilde.values, phi_tilde.generators, phi_tilde.evaluators,
                           os.path.join(out, "phi_tilde.svg"), title=f"Standardized Phi ({setting.value})")

        for model, score in sorted(report.philautia.items(), key=lambda item: (-item[1], item[0])):
            typer.echo(f"{model}\t{score:.2f}")


@app.command()
def scan(
            phi_tilde_path: Annotated[str, typer.Option("--phi-tilde", help="phi_tilde.csv")],
            k: Annotated[int, typer.Option("--k", help="subset size")],
            top: Annotated[int, typer.Option("--top", help="rows to print")] = 10,
            subset: Annotated[Optional[str], typer.Option("--subset", help="comma-separated ids to rank")] = None,
            out: Annotated[Optional[str], typer.Option("--out", help="write all results as JSON")] = None,
            heatmap: Annotated[Optional[str], typer.Option("--heatmap", help="render the --subset submatrix")] = None
        ):
    """Rank k x k principal submatrices by positive off-diagonal count."""
    with exit_codes():
        phi_tilde = standardized_from_csv(phi_tilde_path)
        results = submatrix_scan(phi_tilde, k)
        for item in results[:top]:
            typer.echo(f"{item.positive_offdiag_count}\t{','.join(item.ids)}")
        if subset:
            ids = _split_ids(subset)
            position, rank = subset_rank(results, ids)
            typer.echo(f"subset {','.join(sorted(ids))}: position {position}, rank {rank} of {len(results)}")
            if heatmap:
                sub = principal_submatrix(phi_tilde, ids)
                render_heatmap_svg(sub.values, sub.generators, sub.evaluators, heatmap)
        if out:
            _write_json(out, [{"ids": list(item.ids), "positive_offdiag_count": item.positive_offdiag_count}
                              for item in results])


@app.command()
def delta(
            ref_based: Annotated[str, typer.Option("--ref-based", help="reference-based phi_tilde.csv")],
            ref_free: Annotated[str, typer.Option("--ref-free", help="reference-free phi_tilde.csv")],
            out: Annotated[Optional[str], typer.Option("--out", help="write deltas as JSON")] = None
        ):
    """Philautia score change when references are removed (ref-free minus ref-based)."""
    with exit_codes():
        deltas = settings_delta(standardized_from_csv(ref_based), standardized_from_csv(ref_free))
        for model, value in deltas.items():
            typer.echo(f"{model}\t{value:+.2f}")
        if out:
            _write_json(out, deltas)


@app.command()
def correlate(
            judgments: Annotated[str, typer.Option("--judgments", help="judgments.jsonl")],
            scores: ScoresOpt,
            evaluator: Annotated[Optional[List[str]], typer.Option("--evaluator", help="repeat; default all")] = None,
            setting: SettingOpt = Setting.REFERENCE_BASED,
            split: Annotated[Optional[str], typer.Option("--split", help="train, val or test")] = None
        ):
    """Kendall tau_b and tau_c of each judge against human scores."""
    with exit_codes():
        judgment_records = load_records(judgments, "judgment")
        score_records = load_records(scores, "score")
        evaluators = evaluator or sorted({record.evaluator for record in score_records})
        for name in evaluators:
            result = correlate_with_humans(judgment_records, score_records, name, setting, split)
            typer.echo(f"{name}\ttau_b={result.tau_b:.4f}\ttau_c={result.tau_c:.4f}\tn={result.n}")


@app.command("pomms-train")
def pomms_train(
            judgments: Annotated[str, typer.Option("--judgments", help="judgments.jsonl")],
            scores: ScoresOpt,
            candidates: Annotated[str, typer.Option("--candidates", help="comma-separated evaluator ids")],
            out: Annotated[str, typer.Option("--out", help="ensemble.json")],
            setting: SettingOpt = Setting.REFERENCE_BASED,
            max_size: Annotated[Optional[int], typer.Option("--max-size")] = None,
            seed: Annotated[int, typer.Option("--seed", help="seed for judgments without a split")] = 0,
            trace: Annotated[Optional[str], typer.Option("--trace", help="write the selection trace as JSON")] = None,
            no_clamp: Annotated[bool, typer.Option("--no-clamp")] = False
        ):
    """Select ensemble members by forward selection and fit the elastic net."""
    with exit_codes():
        members = _split_ids(candidates)
        split = build_supervised_split(
            load_records(judgments, "judgment"), load_records(scores, "score"), members, setting, seed=seed,
        )
        spec, steps = sfs_select(members, split, HyperGrid(), max_size=max_size, clamp=not no_clamp)
        _write_json(out, spec.model_dump(mode="json", by_alias=True))
        for step in steps:
            tau = "n/a" if step.val_tau_b is None else f"{step.val_tau_b:.4f}"
            typer.echo(f"step {step.step}: {step.added or '-'} -> {','.join(step.members)} val tau_b {tau} {step.note}")
        if trace:
            _write_json(trace, [
                {"step": s.step, "added": s.added, "members": list(s.members), "lambda": s.penalty,
                 "alpha": s.alpha, "val_tau_b": s.val_tau_b, "note": s.note}
                for s in steps
            ])


@app.command("pomms-eval")
def pomms_eval(
            ensemble: Annotated[str, typer.Option("--ensemble", help="ensemble.json")],
            judgments: Annotated[str, typer.Option("--judgments", help="judgments.jsonl")],
            scores: ScoresOpt,
            setting: SettingOpt = Setting.REFERENCE_BASED,
            baselines: Annotated[Optional[str], typer.Option("--baselines", help="comma-separated single judges")] = None,
            seed: Annotated[int, typer.Option("--seed")] = 0
        ):
    """Test-split tau_b / tau_c of the ensemble and optional single-judge baselines."""
    with exit_codes():
        spec = _load_spec(ensemble)
        baseline_ids = _split_ids(baselines)
        members = list(dict.fromkeys(list(spec.members) + baseline_ids))
        split = build_supervised_split(
            load_records(judgments, "judgment"), load_records(scores, "score"), members, setting, seed=seed,
        )
        for name in baseline_ids:
            result = evaluate_member(name, split)
            typer.echo(f"{name}\ttau_b={result.tau_b:.4f}\ttau_c={result.tau_c:.4f}")
        result = evaluate_ensemble(spec, split)
        typer.echo(f"POMMS\ttau_b={result.tau_b:.4f}\ttau_c={result.tau_c:.4f}")


@app.command()
def augment(
            manifest: ManifestOpt,
            scores: ScoresOpt,
            ensemble: Annotated[str, typer.Option("--ensemble", help="ensemble.json")],
            out: Annotated[str, typer.Option("--out", help="augmented phi_tilde.csv")],
            setting: SettingOpt = Setting.REFERENCE_BASED,
            min_coverage: MinCoverageOpt = DEFAULT_MIN_COVERAGE,
            heatmap: Annotated[Optional[str], typer.Option("--heatmap")] = None
        ):
    """Add the ensemble to Phi as an evaluator column and standardize."""
    with exit_codes():
        spec = _load_spec(ensemble)
        augmented = augment_phi_with_ensemble(
            load_records(scores, "score"), load_manifest(manifest), setting, spec, min_coverage,
        )
        augmented.to_csv(out)
        if heatmap:
            render_heatmap_svg(augmented.values, augmented.generators, augmented.evaluators, heatmap)
        typer.echo(f"POMMS philautia score {pomms_phi_score(augmented, spec):.2f}")
        for evaluator, (generator, value) in evaluator_extremes(augmented).items():
            typer.echo(f"{evaluator}\tmost extreme on {generator}\t{value:+.2f}")


@app.command()
def simulate(
            out: Annotated[str, typer.Option("--out", help="output directory")],
            config: Annotated[Optional[str], typer.Option("--config", help="sim.json; overrides the panel flags")] = None,
            m: Annotated[int, typer.Option("--m", help="number of models")] = 6,
            n: Annotated[int, typer.Option("--n", help="number of images")] = 500,
            self_bias: Annotated[float, typer.Option("--self-bias")] = 0.1,
            cross_bias_spread: Annotated[float, typer.Option("--cross-bias-spread")] = 0.0,
            noise_std: Annotated[float, typer.Option("--noise-std")] = 0.02,
            item_quality_std: Annotated[float, typer.Option("--item-quality-std")] = 0.0,
            human_noise_std: Annotated[float, typer.Option("--human-noise-std")] = 0.05,
            seed: Annotated[int, typer.Option("--seed")] = 0,
            setting: SettingOpt = Setting.REFERENCE_BASED
        ):
    """Write a synthetic panel: manifest, scores, judgments and its config."""
    with exit_codes():
        if config:
            sim = SimConfig.model_validate(_read_json(config))
        else:
            sim = make_panel_config(m, n, self_bias, cross_bias_spread, noise_std, item_quality_std, seed)
        os.makedirs(out, exist_ok=True)
        save_manifest(os.path.join(out, "manifest.json"), sim_manifest(sim, setting))
        save_records(os.path.join(out, "scores.jsonl"), simulate_scores(sim, setting))
        save_records(os.path.join(out, "judgments.jsonl"), simulate_judgments(sim, human_noise_std, sim.seed))
        _write_json(os.path.join(out, "sim.json"), sim.model_dump(mode="json"))
        typer.echo(f"Simulated {sim.M} models x {sim.N} images into {out}")


@app.command()
def report(
            report_path: Annotated[str, typer.Option("--report", help="report.json from audit")],
            fmt: Annotated[str, typer.Option("--format", help="json, csv or markdown")],
            out: Annotated[str, typer.Option("--out")]
        ):
    """Re-emit a saved audit report in another format."""
    with exit_codes():
        emit_report(load_report(report_path), fmt, out)


def cli():
    app()


if __name__ == "__main__":
    cli()
