import numpy as np
import pytest

from app.exceptions import AxisMismatchError, DegenerateInputError, SaturationError
from app.matrix import StandardizedMatrix, build_phi, philautia_scores, standardize
from app.records import load_manifest, load_records
from app.schemas import Setting, SimConfig
from app.simulator import (
    expected_phi,
    make_panel_config,
    recovery_report,
    sim_manifest,
    simulate_judgments,
    simulate_scores,
)
from scripts.sample_data_generation import MODEL_IDS, generate_sample_panel


def pipeline(config: SimConfig):
    return standardize(build_phi(simulate_scores(config), sim_manifest(config), Setting.REFERENCE_BASED))


def flat_config(M=3, N=3, noise_std=0.0, **overrides) -> SimConfig:
    settings = dict(
        M=M,
        N=N,
        quality=[0.2, 0.4, 0.6][:M],
        evaluator_offset=[0.2] * M,
        evaluator_scale=[0.5] * M,
        bias=np.zeros((M, M)).tolist(),
        noise_std=noise_std,
    )
    settings.update(overrides)
    return SimConfig(**settings)


def test_same_seed_same_records():
    config = make_panel_config(4, 20, 0.1, cross_bias_spread=0.05, item_quality_std=0.05, seed=3)

    assert simulate_scores(config) == simulate_scores(config)
    assert simulate_judgments(config, seed=3) == simulate_judgments(config, seed=3)


def test_record_count_and_order():
    config = make_panel_config(3, 7, 0.05, seed=1)
    records = simulate_scores(config)

    assert len(records) == 3 * 3 * 7
    assert [(r.image_id, r.generator, r.evaluator) for r in records[:4]] == [
        ("img-00000", "model-00", "model-00"),
        ("img-00000", "model-00", "model-01"),
        ("img-00000", "model-00", "model-02"),
        ("img-00000", "model-01", "model-00"),
    ]
    assert all(r.score == r.raw_score / 100 for r in records)


def test_images_keep_their_draws_when_n_grows():
    short = simulate_scores(make_panel_config(3, 10, 0.1, noise_std=0.05, seed=9))
    longer = simulate_scores(make_panel_config(3, 20, 0.1, noise_std=0.05, seed=9))

    assert longer[:len(short)] == short


def test_saturated_config_is_rejected():
    config = flat_config(evaluator_offset=[0.9] * 3, evaluator_scale=[1.0] * 3, quality=[0.5] * 3)

    with pytest.raises(SaturationError):
        simulate_scores(config)


def test_noiseless_unbiased_panel_standardizes_to_zero():
    phi_tilde = pipeline(flat_config())

    assert np.array_equal(phi_tilde.values, np.zeros((3, 3)))
    assert phi_tilde.degenerate_rows == frozenset(["model-00", "model-01", "model-02"])


def test_quality_shift_changes_nothing_without_bias():
    config = make_panel_config(5, 10, 0.0, quality_range=(0.3, 0.6), seed=2, noise_std=0.0)
    shifted = config.model_copy(update={"quality": [q + 0.1 for q in config.quality]})

    assert np.allclose(standardize(expected_phi(config)).values, 0.0, atol=1e-10)
    assert np.allclose(standardize(expected_phi(shifted)).values, 0.0, atol=1e-10)


def test_uniform_self_bias_is_recovered():
    passed = 0
    for seed in range(20):
        config = make_panel_config(6, 500, 0.1, noise_std=0.02, seed=seed)
        scores = philautia_scores(pipeline(config))
        passed += all(value > 0 for value in scores.values())

    assert passed >= 19


def test_heterogeneous_self_bias_is_ranked():
    correlations, accuracies = [], []
    for seed in range(20):
        config = make_panel_config(
            6, 500, np.linspace(0.02, 0.2, 6),
            cross_bias_spread=0.2, noise_std=0.02, seed=seed, quality_range=(0.45, 0.55),
        )
        report = recovery_report(pipeline(config), config)
        correlations.append(report.diag_rank_correlation)
        accuracies.append(report.diag_sign_accuracy)

    assert np.mean(correlations) >= 0.8
    assert np.mean(accuracies) >= 0.95


def test_unbiased_noisy_panel_is_at_chance():
    accuracies = []
    for seed in range(20):
        config = make_panel_config(6, 100, 0.0, noise_std=0.05, seed=seed)
        report = recovery_report(pipeline(config), config)
        assert report.diag_rank_correlation is None
        accuracies.append(report.diag_sign_accuracy)

    assert 0.3 <= np.mean(accuracies) <= 0.7


def test_evaluator_affine_distortion_leaves_standardized_matrix_unchanged():
    base = make_panel_config(
        6, 40, np.linspace(0.0, 0.1, 6), cross_bias_spread=0.05, noise_std=0.0, seed=11,
        quality_range=(0.35, 0.65),
    )
    plain = base.model_copy(update={"evaluator_offset": [0.0] * 6, "evaluator_scale": [1.0] * 6})
    distorted = base.model_copy(update={
        "evaluator_offset": [0.3, 0.1, 0.0, -0.2, 0.5, 0.05],
        "evaluator_scale": [0.2, 0.5, 1.0, 1.2, 0.3, 0.8],
    })

    expected = standardize(expected_phi(plain)).values
    assert np.allclose(standardize(expected_phi(distorted)).values, expected, atol=1e-10, rtol=0)


def test_simulated_judgments_line_up_with_scores():
    config = make_panel_config(3, 50, 0.1, item_quality_std=0.05, seed=5)
    judgments = simulate_judgments(config, human_noise_std=0.0, seed=5)
    score_keys = {(r.image_id, r.generator) for r in simulate_scores(config)}

    assert len(judgments) == 3 * 50
    assert {(j.image_id, j.generator) for j in judgments} == score_keys
    assert {j.split for j in judgments} == {"train", "val", "test"}
    assert sum(j.split == "train" for j in judgments) == 120

    # without human noise the rating is exactly the latent quality, so a generator's
    # mean rating sits at q_i up to the item wobble
    for i, generator in enumerate(config.ids):
        mean = np.mean([j.human_score for j in judgments if j.generator == generator])
        assert mean == pytest.approx(config.quality[i], abs=0.03)


def test_sim_manifest_axes():
    config = make_panel_config(4, 3, 0.0)
    manifest = sim_manifest(config)

    assert manifest.generators == manifest.evaluators == config.ids
    assert manifest.image_ids == ["img-00000", "img-00001", "img-00002"]


def test_sample_panel_script(tmp_path):
    config = generate_sample_panel(str(tmp_path))

    assert config.ids == MODEL_IDS
    assert sorted(path.name for path in tmp_path.iterdir()) == [
        "judgments.jsonl",
        "manifest_ref_based.json",
        "manifest_ref_free.json",
        "scores_ref_based.jsonl",
        "scores_ref_free.jsonl",
        "sim.json",
    ]
    manifest = load_manifest(str(tmp_path / "manifest_ref_free.json"))
    scores = load_records(str(tmp_path / "scores_ref_free.jsonl"), "score")
    assert manifest.settings == [Setting.REFERENCE_FREE]
    assert build_phi(scores, manifest, Setting.REFERENCE_FREE).values.shape == (6, 6)


def test_recovery_report_rejects_all_degenerate_matrix():
    config = flat_config()
    ids = config.ids
    zeros = StandardizedMatrix(ids, ids, np.zeros((3, 3)), frozenset(ids), frozenset())

    with pytest.raises(DegenerateInputError):
        recovery_report(zeros, config)
    with pytest.raises(DegenerateInputError):
        recovery_report(pipeline(config), config)


def test_recovery_report_rejects_constant_diagonal():
    config = make_panel_config(3, 10, 0.1, seed=4)
    ids = config.ids
    flat_diagonal = StandardizedMatrix(ids, ids, np.array([[1.0, -1.0, 0.0], [0.0, 1.0, -1.0], [-1.0, 0.0, 1.0]]))

    with pytest.raises(DegenerateInputError):
        recovery_report(flat_diagonal, config)


def test_recovery_report_rejects_foreign_axes():
    config = make_panel_config(3, 10, 0.1, seed=4)
    other = ["x", "y", "z"]

    with pytest.raises(AxisMismatchError):
        recovery_report(StandardizedMatrix(other, other, np.eye(3)), config)
