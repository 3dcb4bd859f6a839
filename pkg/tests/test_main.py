import numpy as np
import orjson
import pytest
from typer.testing import CliRunner

from app.config import application_version
from app.main import EXIT_IO, EXIT_NUMERIC, EXIT_VALIDATION, app
from app.matrix import read_matrix_csv
from app.records import load_records, save_records

runner = CliRunner()

MODELS = ["model-00", "model-01", "model-02", "model-03"]

AUDIT_FILES = ("phi.csv", "phi_tilde.csv", "report.json", "report.md", "report.csv", "phi.svg", "phi_tilde.svg")


def invoke(*args):
    return runner.invoke(app, [str(arg) for arg in args])


def simulate_panel(out, setting="ref-based"):
    result = invoke(
        "simulate", "--out", out, "--m", 4, "--n", 40, "--item-quality-std", 0.05,
        "--seed", 7, "--setting", setting,
    )
    assert result.exit_code == 0, result.output
    return out


@pytest.fixture
def panel(tmp_path):
    return simulate_panel(tmp_path / "panel")


def test_version():
    result = invoke("--version")

    assert result.exit_code == 0
    assert result.output.strip() == application_version()


def test_simulate_writes_panel(panel):
    sim = orjson.loads((panel / "sim.json").read_bytes())

    assert sorted(path.name for path in panel.iterdir()) == ["judgments.jsonl", "manifest.json", "scores.jsonl", "sim.json"]
    assert sim["M"] == 4 and sim["N"] == 40
    assert len(load_records(str(panel / "scores.jsonl"), "score")) == 4 * 4 * 40
    assert len(load_records(str(panel / "judgments.jsonl"), "judgment")) == 4 * 40


def test_validate(panel, tmp_path):
    out = tmp_path / "coverage.json"
    result = invoke("validate", "--manifest", panel / "manifest.json", "--scores", panel / "scores.jsonl", "--out", out)

    assert result.exit_code == 0, result.output
    assert "640 valid records, 0 cells below full coverage" in result.output
    assert orjson.loads(out.read_bytes())["total_valid"] == 640


def test_audit_is_byte_stable(panel, tmp_path):
    first = invoke("audit", "--manifest", panel / "manifest.json", "--scores", panel / "scores.jsonl",
                   "--out", tmp_path / "first")
    second = invoke("audit", "--manifest", panel / "manifest.json", "--scores", panel / "scores.jsonl",
                    "--out", tmp_path / "second")

    assert first.exit_code == 0, first.output
    assert first.output == second.output
    lines = first.output.strip().splitlines()
    assert sorted(line.split("\t")[0] for line in lines) == MODELS
    for name in AUDIT_FILES:
        assert (tmp_path / "first" / name).read_bytes() == (tmp_path / "second" / name).read_bytes()


def test_audit_matches_step_by_step_commands(panel, tmp_path):
    invoke("audit", "--manifest", panel / "manifest.json", "--scores", panel / "scores.jsonl", "--out", tmp_path / "audit")
    phi = invoke("phi", "--manifest", panel / "manifest.json", "--scores", panel / "scores.jsonl",
                 "--out", tmp_path / "phi.csv", "--heatmap", tmp_path / "phi.svg")
    standardized = invoke("standardize", "--phi", tmp_path / "phi.csv", "--out", tmp_path / "phi_tilde.csv")

    assert phi.exit_code == 0, phi.output
    assert standardized.exit_code == 0, standardized.output
    assert (tmp_path / "phi.csv").read_bytes() == (tmp_path / "audit" / "phi.csv").read_bytes()
    assert (tmp_path / "phi.svg").exists()
    step_by_step = read_matrix_csv(str(tmp_path / "phi_tilde.csv")).to_numpy()
    direct = read_matrix_csv(str(tmp_path / "audit" / "phi_tilde.csv")).to_numpy()
    assert np.allclose(step_by_step, direct, atol=1e-4)


def test_audit_with_dropped_model(panel, tmp_path):
    result = invoke("audit", "--manifest", panel / "manifest.json", "--scores", panel / "scores.jsonl",
                    "--out", tmp_path / "reduced", "--drop-generator", "model-03", "--drop-evaluator", "model-03")

    assert result.exit_code == 0, result.output
    assert sorted(line.split("\t")[0] for line in result.output.strip().splitlines()) == MODELS[:3]
    assert (tmp_path / "reduced" / "phi_tilde.csv").read_text().splitlines()[0] == "generator,model-00,model-01,model-02"


def test_audit_dropping_too_many_models(panel, tmp_path):
    result = invoke("audit", "--manifest", panel / "manifest.json", "--scores", panel / "scores.jsonl",
                    "--out", tmp_path / "reduced", "--drop-generator", "model-00", "--drop-generator", "model-01",
                    "--drop-generator", "model-02")

    assert result.exit_code == EXIT_NUMERIC
    assert not (tmp_path / "reduced").exists()


def test_scan(panel, tmp_path):
    invoke("audit", "--manifest", panel / "manifest.json", "--scores", panel / "scores.jsonl", "--out", tmp_path / "audit")
    result = invoke("scan", "--phi-tilde", tmp_path / "audit" / "phi_tilde.csv", "--k", 2,
                    "--subset", "model-01,model-00", "--out", tmp_path / "scan.json", "--heatmap", tmp_path / "sub.svg")

    assert result.exit_code == 0, result.output
    lines = result.output.strip().splitlines()
    assert len(lines) == 6 + 1
    assert lines[-1].startswith("subset model-00,model-01: position ")
    assert lines[-1].endswith(" of 6")
    assert len(orjson.loads((tmp_path / "scan.json").read_bytes())) == 6
    assert (tmp_path / "sub.svg").exists()


def test_scan_rejects_bad_k(panel, tmp_path):
    invoke("audit", "--manifest", panel / "manifest.json", "--scores", panel / "scores.jsonl", "--out", tmp_path / "audit")
    result = invoke("scan", "--phi-tilde", tmp_path / "audit" / "phi_tilde.csv", "--k", 9)

    assert result.exit_code == EXIT_VALIDATION


def test_delta_between_settings(tmp_path):
    based = simulate_panel(tmp_path / "based", "ref-based")
    free = simulate_panel(tmp_path / "free", "ref-free")
    invoke("audit", "--manifest", based / "manifest.json", "--scores", based / "scores.jsonl", "--out", tmp_path / "a")
    audited = invoke("audit", "--manifest", free / "manifest.json", "--scores", free / "scores.jsonl",
                     "--out", tmp_path / "b", "--setting", "ref-free")
    result = invoke("delta", "--ref-based", tmp_path / "a" / "phi_tilde.csv", "--ref-free", tmp_path / "b" / "phi_tilde.csv",
                    "--out", tmp_path / "delta.json")

    assert audited.exit_code == 0, audited.output
    assert result.exit_code == 0, result.output
    # same seed, same draws: only the setting label differs
    assert result.output.strip().splitlines() == [f"{model}\t+0.00" for model in MODELS]
    assert orjson.loads((tmp_path / "delta.json").read_bytes()) == {model: 0.0 for model in MODELS}


def test_correlate(panel):
    every = invoke("correlate", "--judgments", panel / "judgments.jsonl", "--scores", panel / "scores.jsonl")
    one = invoke("correlate", "--judgments", panel / "judgments.jsonl", "--scores", panel / "scores.jsonl",
                 "--evaluator", "model-02", "--split", "train")

    assert every.exit_code == 0, every.output
    assert [line.split("\t")[0] for line in every.output.strip().splitlines()] == MODELS
    assert one.output.startswith("model-02\ttau_b=")
    assert one.output.strip().endswith("n=128")


def test_pomms_train_eval_and_augment(panel, tmp_path):
    ensemble = tmp_path / "ensemble.json"
    trained = invoke("pomms-train", "--judgments", panel / "judgments.jsonl", "--scores", panel / "scores.jsonl",
                     "--candidates", ",".join(MODELS), "--out", ensemble, "--trace", tmp_path / "trace.json")
    assert trained.exit_code == 0, trained.output
    assert trained.output.startswith("step 1: ")

    spec = orjson.loads(ensemble.read_bytes())
    assert "lambda" in spec
    assert set(spec["members"]) <= set(MODELS)
    assert orjson.loads((tmp_path / "trace.json").read_bytes())[0]["step"] == 1

    evaluated = invoke("pomms-eval", "--ensemble", ensemble, "--judgments", panel / "judgments.jsonl",
                       "--scores", panel / "scores.jsonl", "--baselines", "model-00")
    assert evaluated.exit_code == 0, evaluated.output
    lines = evaluated.output.strip().splitlines()
    assert lines[0].startswith("model-00\ttau_b=")
    assert lines[-1].startswith("POMMS\ttau_b=")

    augmented = invoke("augment", "--manifest", panel / "manifest.json", "--scores", panel / "scores.jsonl",
                       "--ensemble", ensemble, "--out", tmp_path / "augmented.csv", "--heatmap", tmp_path / "augmented.svg")
    assert augmented.exit_code == 0, augmented.output
    assert augmented.output.startswith("POMMS philautia score ")
    assert (tmp_path / "augmented.csv").read_text().splitlines()[0] == "generator," + ",".join(MODELS) + ",POMMS"


def test_report_re_emit(panel, tmp_path):
    invoke("audit", "--manifest", panel / "manifest.json", "--scores", panel / "scores.jsonl", "--out", tmp_path / "audit")
    result = invoke("report", "--report", tmp_path / "audit" / "report.json", "--format", "markdown",
                    "--out", tmp_path / "again.md")
    unknown = invoke("report", "--report", tmp_path / "audit" / "report.json", "--format", "html",
                     "--out", tmp_path / "again.html")

    assert result.exit_code == 0, result.output
    assert (tmp_path / "again.md").read_bytes() == (tmp_path / "audit" / "report.md").read_bytes()
    assert unknown.exit_code == EXIT_VALIDATION


def test_missing_file_is_an_io_error(tmp_path):
    result = invoke("phi", "--manifest", tmp_path / "nope.json", "--scores", tmp_path / "nope.jsonl",
                    "--out", tmp_path / "phi.csv")

    assert result.exit_code == EXIT_IO


def test_low_coverage_is_a_validation_error(panel, tmp_path):
    scores = load_records(str(panel / "scores.jsonl"), "score")
    dropped = [r for r in scores if not (r.generator == "model-00" and r.evaluator == "model-01" and r.image_id == "img-00000")]
    save_records(str(tmp_path / "partial.jsonl"), dropped)

    checked = invoke("validate", "--manifest", panel / "manifest.json", "--scores", tmp_path / "partial.jsonl")
    built = invoke("phi", "--manifest", panel / "manifest.json", "--scores", tmp_path / "partial.jsonl",
                   "--out", tmp_path / "phi.csv", "--min-coverage", 1.0)

    assert checked.exit_code == 0, checked.output
    assert "1 cells below full coverage" in checked.output
    assert "model-00 -> model-01: 39/40" in checked.output
    assert built.exit_code == EXIT_VALIDATION


def test_duplicate_records_fail_strict_validation(panel, tmp_path):
    scores = load_records(str(panel / "scores.jsonl"), "score")
    save_records(str(tmp_path / "dup.jsonl"), scores + scores[:1])

    strict = invoke("validate", "--manifest", panel / "manifest.json", "--scores", tmp_path / "dup.jsonl")
    lenient = invoke("validate", "--manifest", panel / "manifest.json", "--scores", tmp_path / "dup.jsonl", "--no-strict")

    assert strict.exit_code == EXIT_VALIDATION
    assert lenient.exit_code == EXIT_VALIDATION


def test_saturated_simulation_is_a_numeric_error(tmp_path):
    config = tmp_path / "sim.json"
    config.write_bytes(orjson.dumps({
        "M": 2,
        "N": 5,
        "quality": [0.5, 0.5],
        "evaluator_offset": [0.9, 0.9],
        "evaluator_scale": [1.0, 1.0],
        "bias": [[0.0, 0.0], [0.0, 0.0]],
    }))

    result = invoke("simulate", "--out", tmp_path / "sim", "--config", config)

    assert result.exit_code == EXIT_NUMERIC
