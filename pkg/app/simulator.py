"""
Synthetic evaluator panels with injected bias.

Every evaluator j scores generator i's caption of image k as
    clip(mu_j + sigma_j * (q_i + u_ik + B[i][j]) + eps, 0, 1)
where u_ik is a per-item quality wobble and eps is judge noise. Each image
draws from its own child seed, so output does not depend on generation order.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from app.exceptions import AxisMismatchError, DegenerateInputError, SaturationError
from app.logger import logger
from app.matrix import ScoreMatrix, StandardizedMatrix, philautia_scores
from app.rank_metrics import kendall_tau_b
from app.records import assign_splits
from app.schemas import HumanJudgmentRecord, ImageRef, RunManifest, ScoreRecord, Setting, SimConfig

SATURATION_LIMIT = 0.5


def _image_streams(config: SimConfig) -> List[np.random.Generator]:
    return [np.random.default_rng(child) for child in np.random.SeedSequence(config.seed).spawn(config.N)]


def _draws(config: SimConfig) -> Tuple[np.ndarray, np.ndarray]:
    """u (N x M) and eps (N x M x M), drawn image by image from per-image streams"""
    u = np.empty((config.N, config.M))
    eps = np.empty((config.N, config.M, config.M))
    for k, rng in enumerate(_image_streams(config)):
        u[k] = rng.normal(0.0, config.item_quality_std, config.M)
        eps[k] = rng.normal(0.0, config.noise_std, (config.M, config.M))
    return u, eps


def _latent(config: SimConfig, u: np.ndarray) -> np.ndarray:
    """N x M x M array of mu_j + sigma_j * (q_i + u_ik + B[i][j]), indexed [k, i, j]"""
    q = np.asarray(config.quality)[None, :, None]
    bias = np.asarray(config.bias)[None, :, :]
    offset = np.asarray(config.evaluator_offset)[None, None, :]
    scale = np.asarray(config.evaluator_scale)[None, None, :]
    return offset + scale * (q + u[:, :, None] + bias)


def sim_manifest(config: SimConfig, setting: Setting = Setting.REFERENCE_BASED) -> RunManifest:
    """Manifest whose generators and evaluators are the simulated models"""
    return RunManifest(
        generators=config.ids,
        evaluators=config.ids,
        images=[ImageRef(image_id=image_id) for image_id in config.image_ids],
        settings=[setting],
    )


def simulate_scores(
            config: SimConfig,
            setting: Setting = Setting.REFERENCE_BASED
        ) -> List[ScoreRecord]:
    """Draw M * M * N quantized score records.

    Scores are rounded to whole points, so a Phi-tilde built from these records
    is invariant to per-evaluator offset and scale only up to that rounding, even
    with zero noise. expected_phi gives the exact invariant matrix.

    Args:
        config (SimConfig): panel definition
        setting (Setting, optional): setting stamped on every record. Defaults to ref-based.

    Raises:
        SaturationError: more than half the scores were clipped to 0 or 1

    Returns:
        List[ScoreRecord]: records ordered by image, generator, evaluator
    """
    u, eps = _draws(config)
    unclipped = _latent(config, u) + eps
    clipped = (unclipped < 0.0) | (unclipped > 1.0)
    fraction = float(clipped.mean())
    if fraction > SATURATION_LIMIT:
        error = SaturationError(f"{fraction:.1%} of simulated scores clip to [0, 1]; config is unusable")
        logger.error(f"{error}")
        raise error
    if fraction > 0:
        logger.debug(f"{fraction:.2%} of simulated scores clipped")

    raw = np.rint(np.clip(unclipped, 0.0, 1.0) * 100).astype(int)
    ids = config.ids
    records = []
    for k, image_id in enumerate(config.image_ids):
        for i, generator in enumerate(ids):
            for j, evaluator in enumerate(ids):
                records.append(ScoreRecord(
                    image_id=image_id,
                    generator=generator,
                    evaluator=evaluator,
                    setting=setting,
                    raw_score=int(raw[k, i, j]),
                ))
    logger.info(f"Simulated {len(records)} scores (M={config.M}, N={config.N}, seed={config.seed})")
    return records


def expected_phi(config: SimConfig, setting: Setting = Setting.REFERENCE_BASED) -> ScoreMatrix:
    """Phi without judge noise or quantization (clipping still applies).

    Column scaling removes any per-evaluator offset and scale exactly here, which
    the rounded records of simulate_scores only approximate.
    """
    u, _ = _draws(config)
    values = np.clip(_latent(config, u), 0.0, 1.0).mean(axis=0)
    counts = np.full((config.M, config.M), config.N, dtype=np.int64)
    return ScoreMatrix(config.ids, config.ids, values, counts, setting)


def make_panel_config(
            M: int,
            N: int,
            self_bias: Union[float, Sequence[float]],
            cross_bias_spread: float = 0.0,
            noise_std: float = 0.02,
            item_quality_std: float = 0.0,
            seed: int = 0,
            quality_range: Tuple[float, float] = (0.3, 0.7)
        ) -> SimConfig:
    """Random panel with a chosen self-bias diagonal.

    Off-diagonal bias is a circulant pattern: evaluator (i + d) mod M is biased
    toward generator i by the d-th of M - 1 levels evenly spaced in
    [-cross_bias_spread, cross_bias_spread], so every row and column holds each
    level once.

    Args:
        M (int): number of models
        N (int): number of images
        self_bias (Union[float, Sequence[float]]): B[i][i], one value or one per model
        cross_bias_spread (float, optional): half-width of the off-diagonal levels. Defaults to 0.0.
        noise_std (float, optional): judge noise. Defaults to 0.02.
        item_quality_std (float, optional): per-item quality spread. Defaults to 0.0.
        seed (int, optional): seeds both the parameter draws and the panel. Defaults to 0.
        quality_range (Tuple[float, float], optional): uniform range of q_i. Defaults to (0.3, 0.7).

    Returns:
        SimConfig: panel definition
    """
    rng = np.random.default_rng(seed)
    diagonal = np.broadcast_to(np.asarray(self_bias, dtype=float), (M,))
    bias = np.diag(diagonal)
    if M > 1 and cross_bias_spread:
        levels = np.linspace(-cross_bias_spread, cross_bias_spread, M - 1)
        for i in range(M):
            for d in range(1, M):
                bias[i, (i + d) % M] = levels[d - 1]

    return SimConfig(
        M=M,
        N=N,
        quality=rng.uniform(*quality_range, M).tolist(),
        evaluator_offset=rng.uniform(-0.05, 0.05, M).tolist(),
        evaluator_scale=rng.uniform(0.8, 1.1, M).tolist(),
        bias=bias.tolist(),
        noise_std=noise_std,
        item_quality_std=item_quality_std,
        seed=seed,
    )


@dataclass(frozen=True)
class RecoveryReport:
    diag_sign_accuracy: float
    diag_rank_correlation: Optional[float]


def recovery_report(phi_tilde: StandardizedMatrix, config: SimConfig) -> RecoveryReport:
    """How well the philautia scores recover the injected self-bias.

    Sign accuracy compares sign(phi_tilde_ii) with sign(B[i][i] - mean(B[i])),
    zero counting as positive on both sides. The rank correlation is tau_b between the philautia scores and B[i][i];
    it is None when the injected diagonal is constant.

    Raises:
        AxisMismatchError: phi_tilde generators are not the simulated model ids
        DegenerateInputError: every row of phi_tilde is degenerate or its diagonal is constant
    """
    ids = config.ids
    if list(phi_tilde.generators) != list(ids):
        raise AxisMismatchError(f"phi_tilde generators {list(phi_tilde.generators)} are not the simulated ids {ids}")

    philautia = philautia_scores(phi_tilde)
    recovered = np.array([philautia[model] for model in ids])
    if phi_tilde.degenerate_rows >= set(ids) or np.ptp(recovered) == 0:
        error = DegenerateInputError("phi_tilde diagonal carries no signal (all rows degenerate or constant)")
        logger.error(f"{error}")
        raise error

    bias = np.asarray(config.bias)
    injected = np.diag(bias)
    excess = injected - bias.mean(axis=1)

    accuracy = float(np.mean((recovered >= 0) == (excess >= 0)))
    correlation = None
    if np.unique(injected).size > 1:
        correlation = kendall_tau_b(recovered, injected)
    return RecoveryReport(accuracy, correlation)


def simulate_judgments(
            config: SimConfig,
            human_noise_std: float = 0.05,
            seed: int = 0
        ) -> List[HumanJudgmentRecord]:
    """Human ratings q_i + u_ik + noise for every simulated caption.

    The item quality u_ik is the same draw simulate_scores uses, so judges and
    humans see the same captions. sample_id is the image id and generator the
    model id, matching the simulated ScoreRecords. Splits are 8:1:1.
    """
    u, _ = _draws(config)
    rng = np.random.default_rng(seed)
    human = np.asarray(config.quality)[None, :] + u + rng.normal(0.0, human_noise_std, u.shape)

    judgments = []
    for k, image_id in enumerate(config.image_ids):
        for i, generator in enumerate(config.ids):
            judgments.append(HumanJudgmentRecord(
                sample_id=image_id,
                image_id=image_id,
                candidate=f"synthetic caption of {image_id} by {generator}",
                human_score=float(human[k, i]),
                generator=generator,
            ))
    return assign_splits(judgments, seed=seed)
