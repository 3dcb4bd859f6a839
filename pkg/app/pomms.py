"""
POMMS: a panel of judge models combined by an elastic-net meta-learner.

Members are picked by greedy forward selection on validation Kendall tau_b.
The fitted ensemble can then sit in Phi as one more evaluator column.
"""

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.config import DEFAULT_MIN_COVERAGE, ZERO_VARIANCE_TOL
from app.exceptions import (
    AxisMismatchError,
    ConvergenceError,
    DegenerateInputError,
    MissingMemberScoreError,
)
from app.logger import logger
from app.matrix import StandardizedMatrix, phi_from_frame, scores_frame, standardize
from app.rank_metrics import kendall_tau_b, kendall_tau_c
from app.records import assign_splits
from app.schemas import EnsembleSpec, HumanJudgmentRecord, RunManifest, ScoreRecord, Setting

POMMS_ID = "POMMS"

DEFAULT_PENALTIES: Tuple[float, ...] = tuple(float(value) for value in np.logspace(-4, 1, 7))
DEFAULT_ALPHAS: Tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class HyperGrid:
    penalties: Tuple[float, ...] = DEFAULT_PENALTIES
    alphas: Tuple[float, ...] = DEFAULT_ALPHAS

    def __iter__(self):
        for penalty in self.penalties:
            for alpha in self.alphas:
                yield penalty, alpha


@dataclass(frozen=True)
class ElasticNetResult:
    weights: np.ndarray
    intercept: float
    n_iter: int
    objective_trace: Tuple[float, ...]


def _soft_threshold(value: float, threshold: float) -> float:
    if value > threshold:
        return value - threshold
    if value < -threshold:
        return value + threshold
    return 0.0


def fit_elastic_net(
            X: np.ndarray,
            y: np.ndarray,
            penalty: float,
            alpha: float,
            tol: float = 1e-6,
            max_iter: int = 10_000
        ) -> ElasticNetResult:
    """Elastic-net regression by cyclic coordinate descent.

    Minimizes (1/2n)||y - Xw - b||^2 + penalty * (alpha ||w||_1 + (1 - alpha)/2 ||w||^2)
    on internally standardized features; coefficients are mapped back to the
    original feature scale. Constant features get weight 0.

    Args:
        X (np.ndarray): n x p feature matrix
        y (np.ndarray): n targets
        penalty (float): overall penalty strength (lambda), >= 0
        alpha (float): L1 share of the penalty, in [0, 1]
        tol (float, optional): stop when the largest coefficient change in a sweep is below this. Defaults to 1e-6.
        max_iter (int, optional): maximum number of sweeps. Defaults to 10_000.

    Raises:
        ValueError: bad shapes, non-finite values or hyperparameters out of range
        ConvergenceError: max_iter sweeps without meeting tol

    Returns:
        ElasticNetResult: weights, intercept, sweeps used and per-sweep objective
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise ValueError(f"X must be n x p with n, p >= 1, got shape {X.shape}")
    if y.shape != (X.shape[0],):
        raise ValueError(f"y must have {X.shape[0]} entries, got shape {y.shape}")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ValueError("X and y must be finite")
    if penalty < 0 or not 0.0 <= alpha <= 1.0:
        raise ValueError(f"need penalty >= 0 and alpha in [0, 1], got {penalty}, {alpha}")

    n, p = X.shape
    x_mean = X.mean(axis=0)
    x_std = X.std(axis=0)
    active = x_std > ZERO_VARIANCE_TOL
    Z = np.zeros_like(X)
    Z[:, active] = (X[:, active] - x_mean[active]) / x_std[active]

    y_mean = float(y.mean())
    residual = y - y_mean
    w = np.zeros(p)
    l1 = penalty * alpha
    shrink = 1.0 + penalty * (1.0 - alpha)

    def objective() -> float:
        return float(residual @ residual / (2 * n) + l1 * np.abs(w).sum() + penalty * (1.0 - alpha) / 2 * (w @ w))

    trace = []
    last_delta = np.inf
    for sweep in range(1, max_iter + 1):
        last_delta = 0.0
        for j in np.flatnonzero(active):
            rho = float(Z[:, j] @ residual) / n + w[j]
            updated = _soft_threshold(rho, l1) / shrink
            delta = updated - w[j]
            if delta != 0.0:
                residual -= delta * Z[:, j]
                w[j] = updated
                last_delta = max(last_delta, abs(delta))
        trace.append(objective())
        if last_delta < tol:
            weights = np.zeros(p)
            weights[active] = w[active] / x_std[active]
            intercept = y_mean - float(weights @ x_mean)
            return ElasticNetResult(weights, intercept, sweep, tuple(trace))

    raise ConvergenceError(max_iter, last_delta)


def predict(spec: EnsembleSpec, features: np.ndarray) -> np.ndarray:
    """intercept + features @ weights, clipped to [0, 1] when spec.clamp is set"""
    features = np.asarray(features, dtype=float)
    if features.ndim != 2 or features.shape[1] != len(spec.members):
        raise AxisMismatchError(f"expected n x {len(spec.members)} member scores, got {features.shape}")
    prediction = spec.intercept + features @ np.asarray(spec.weights, dtype=float)
    if spec.clamp:
        prediction = np.clip(prediction, 0.0, 1.0)
    return prediction


@dataclass(frozen=True)
class SplitPart:
    keys: Tuple[Tuple[str, str], ...]
    X: np.ndarray
    y: np.ndarray

    def columns(self, indices: Sequence[int]) -> np.ndarray:
        return self.X[:, list(indices)]


@dataclass(frozen=True)
class SupervisedSplit:
    """Member-score features and human targets, split into train / val / test.
    Feature column order follows `members`."""

    members: Tuple[str, ...]
    train: SplitPart
    val: SplitPart
    test: SplitPart

    def member_indices(self, members: Iterable[str]) -> List[int]:
        indices = []
        for member in members:
            if member not in self.members:
                raise MissingMemberScoreError(f"no scores for member {member} in this split")
            indices.append(self.members.index(member))
        return indices


def build_supervised_split(
            judgments: Sequence[HumanJudgmentRecord],
            scores: Sequence[ScoreRecord],
            members: Sequence[str],
            setting: Setting,
            seed: int = 0
        ) -> SupervisedSplit:
    """Join human judgments to judge scores on (sample_id, generator).

    A judgment's scores are the ScoreRecords with image_id == sample_id and the
    same generator. Judgments without a split are assigned one with assign_splits.

    Args:
        judgments (Sequence[HumanJudgmentRecord]): human-rated samples
        scores (Sequence[ScoreRecord]): judge scores of those samples
        members (Sequence[str]): evaluators to use as features, in order
        setting (Setting): which prompt setting to read
        seed (int, optional): seed for missing split assignment. Defaults to 0.

    Raises:
        MissingMemberScoreError: a member has no score for some judgment

    Returns:
        SupervisedSplit: features and targets per split
    """
    if not members:
        raise ValueError("at least one member is required")
    keys = [judgment.key for judgment in judgments]
    if len(set(keys)) != len(keys):
        raise ValueError("judgment keys (sample_id, generator) must be unique")

    if any(judgment.split is None for judgment in judgments):
        logger.info("Some judgments have no split; assigning 8:1:1")
        judgments = assign_splits(judgments, seed=seed)

    wanted = set(members)
    lookup: Dict[Tuple[str, str, str], float] = {}
    for record in scores:
        if record.setting == setting and record.evaluator in wanted:
            lookup[(record.image_id, record.generator, record.evaluator)] = record.score

    parts: Dict[str, Tuple[list, list, list]] = {"train": ([], [], []), "val": ([], [], []), "test": ([], [], [])}
    for judgment in judgments:
        row = []
        for member in members:
            try:
                row.append(lookup[(judgment.sample_id, judgment.generator, member)])
            except KeyError as e:
                error = MissingMemberScoreError(
                    f"member {member} has no {setting.value} score for sample "
                    f"{judgment.sample_id} (generator {judgment.generator})"
                )
                logger.error(f"Cannot build supervised split: {error}")
                raise error from e
        part_keys, part_x, part_y = parts[judgment.split]
        part_keys.append(judgment.key)
        part_x.append(row)
        part_y.append(judgment.human_score)

    def make(name: str) -> SplitPart:
        part_keys, part_x, part_y = parts[name]
        X = np.asarray(part_x, dtype=float).reshape(len(part_x), len(members))
        return SplitPart(tuple(part_keys), X, np.asarray(part_y, dtype=float))

    split = SupervisedSplit(tuple(members), make("train"), make("val"), make("test"))
    logger.info(
        f"Supervised split over {len(members)} members: "
        f"{len(split.train.y)} train, {len(split.val.y)} val, {len(split.test.y)} test"
    )
    return split


@dataclass(frozen=True)
class SelectionStep:
    step: int
    added: Optional[str]
    members: Tuple[str, ...]
    penalty: Optional[float]
    alpha: Optional[float]
    val_tau_b: Optional[float]
    note: str = ""


@dataclass
class _Fit:
    members: Tuple[str, ...]
    penalty: float
    alpha: float
    result: ElasticNetResult
    val_tau_b: float


def _spec_from_fit(fit: _Fit, clamp: bool) -> EnsembleSpec:
    return EnsembleSpec(
        members=list(fit.members),
        weights=[float(weight) for weight in fit.result.weights],
        intercept=fit.result.intercept,
        penalty=fit.penalty,
        alpha=fit.alpha,
        clamp=clamp,
    )


def _tune(
            split: SupervisedSplit,
            members: Tuple[str, ...],
            hyper_grid: HyperGrid,
            clamp: bool
        ) -> Optional[_Fit]:
    """Best validation tau_b over the grid for one member set; None if every grid point is unusable"""
    indices = split.member_indices(members)
    X_train = split.train.columns(indices)
    X_val = split.val.columns(indices)
    best = None
    for penalty, alpha in hyper_grid:
        try:
            result = fit_elastic_net(X_train, split.train.y, penalty, alpha)
        except ConvergenceError as e:
            logger.warning(f"Skipping lambda={penalty:g}, alpha={alpha:g} for {list(members)}: {e}")
            continue
        fit = _Fit(members, penalty, alpha, result, float("nan"))
        prediction = predict(_spec_from_fit(fit, clamp), X_val)
        if np.ptp(prediction) <= ZERO_VARIANCE_TOL:
            continue
        fit.val_tau_b = kendall_tau_b(prediction, split.val.y)
        if best is None or fit.val_tau_b > best.val_tau_b:
            best = fit
    return best


def sfs_select(
            candidates: Sequence[str],
            split: SupervisedSplit,
            hyper_grid: Optional[HyperGrid] = None,
            max_size: Optional[int] = None,
            clamp: bool = True
        ) -> Tuple[EnsembleSpec, List[SelectionStep]]:
    """Greedy forward selection of ensemble members.

    Each step tries adding every remaining candidate, re-tunes lambda/alpha on
    train for each trial set and keeps the trial with the best validation tau_b.
    Selection stops when no addition strictly improves validation tau_b or
    max_size members are chosen. Ties go to the lexicographically smaller id.

    Args:
        candidates (Sequence[str]): evaluator ids available as members
        split (SupervisedSplit): features and targets
        hyper_grid (Optional[HyperGrid], optional): lambda/alpha grid. Defaults to 7 x 5 grid.
        max_size (Optional[int], optional): maximum members. Defaults to all candidates.
        clamp (bool, optional): clip ensemble predictions to [0, 1]. Defaults to True.

    Raises:
        ValueError: empty candidate list
        DegenerateInputError: validation targets all tied, or no candidate yields a usable fit

    Returns:
        Tuple[EnsembleSpec, List[SelectionStep]]: final ensemble and selection trace
    """
    if not candidates:
        raise ValueError("sfs_select needs at least one candidate")
    if len(set(candidates)) != len(candidates):
        raise ValueError("candidates must be unique")
    split.member_indices(candidates)
    if np.unique(split.val.y).size < 2:
        raise DegenerateInputError("validation targets are all tied; tau_b is undefined")

    hyper_grid = hyper_grid or HyperGrid()
    max_size = len(candidates) if max_size is None else max_size
    if max_size < 1:
        raise ValueError(f"max_size must be at least 1, got {max_size}")

    selected: Tuple[str, ...] = ()
    current: Optional[_Fit] = None
    trace: List[SelectionStep] = []
    remaining = sorted(candidates)

    while len(selected) < max_size and remaining:
        step_best: Optional[_Fit] = None
        step_added = None
        for candidate in remaining:
            fit = _tune(split, selected + (candidate,), hyper_grid, clamp)
            if fit is not None and (step_best is None or fit.val_tau_b > step_best.val_tau_b):
                step_best, step_added = fit, candidate

        if step_best is None or (current is not None and step_best.val_tau_b <= current.val_tau_b):
            trace.append(SelectionStep(
                step=len(selected) + 1,
                added=None,
                members=selected,
                penalty=current.penalty if current else None,
                alpha=current.alpha if current else None,
                val_tau_b=current.val_tau_b if current else None,
                note="no candidate improved validation tau_b",
            ))
            break

        current = step_best
        selected = step_best.members
        remaining.remove(step_added)
        trace.append(SelectionStep(
            step=len(selected),
            added=step_added,
            members=selected,
            penalty=current.penalty,
            alpha=current.alpha,
            val_tau_b=current.val_tau_b,
        ))
        logger.info(f"SFS step {len(selected)}: added {step_added}, validation tau_b {current.val_tau_b:.4f}")

    if current is None:
        raise DegenerateInputError("no candidate produced a non-constant validation prediction")

    return _spec_from_fit(current, clamp), trace


@dataclass(frozen=True)
class RankScores:
    tau_b: float
    tau_c: float
    n: int = field(default=0)


def _rank_scores(prediction: np.ndarray, target: np.ndarray) -> RankScores:
    if np.unique(target).size < 2:
        raise DegenerateInputError("test targets are all tied")
    return RankScores(kendall_tau_b(prediction, target), kendall_tau_c(prediction, target), int(target.size))


def evaluate_ensemble(spec: EnsembleSpec, split: SupervisedSplit) -> RankScores:
    """tau_b / tau_c between ensemble predictions and human scores on the test part"""
    indices = split.member_indices(spec.members)
    return _rank_scores(predict(spec, split.test.columns(indices)), split.test.y)


def evaluate_member(evaluator: str, split: SupervisedSplit) -> RankScores:
    """Single-judge baseline: raw member scores against human scores on the test part"""
    index = split.member_indices([evaluator])[0]
    return _rank_scores(split.test.X[:, index], split.test.y)


def correlate_with_humans(
            judgments: Sequence[HumanJudgmentRecord],
            scores: Sequence[ScoreRecord],
            evaluator: str,
            setting: Setting,
            split: Optional[str] = None
        ) -> RankScores:
    """tau_b / tau_c of one judge against human scores, over all judgments or one split.

    Judgments without a score from the judge are skipped.
    """
    lookup = {
        (record.image_id, record.generator): record.score
        for record in scores
        if record.evaluator == evaluator and record.setting == setting
    }
    pairs = [
        (lookup[judgment.key], judgment.human_score)
        for judgment in judgments
        if judgment.key in lookup and (split is None or judgment.split == split)
    ]
    skipped = sum(1 for judgment in judgments if judgment.key not in lookup)
    if skipped:
        logger.warning(f"{skipped} judgments have no {setting.value} score from {evaluator}")
    if len(pairs) < 2:
        raise DegenerateInputError(f"only {len(pairs)} judgments scored by {evaluator}")
    judge, human = (np.asarray(column, dtype=float) for column in zip(*pairs))
    return _rank_scores(judge, human)


def augment_phi_with_ensemble(
            scores: Sequence[ScoreRecord],
            manifest: RunManifest,
            setting: Setting,
            spec: EnsembleSpec,
            min_coverage: float = DEFAULT_MIN_COVERAGE
        ) -> StandardizedMatrix:
    """Add the ensemble to Phi as an extra evaluator column and standardize.

    Each (image, generator) pair gets the ensemble prediction from its member
    scores; pairs missing any member score are left out of the ensemble column
    and the coverage floor applies as usual.

    Raises:
        MissingMemberScoreError: a member has no scores at all
        AxisMismatchError: the manifest already has an evaluator named POMMS
    """
    if POMMS_ID in manifest.evaluators:
        raise AxisMismatchError(f"evaluator id {POMMS_ID} is reserved for the ensemble column")

    frame = scores_frame(scores, setting)
    frame = frame[frame["image_id"].isin(manifest.image_ids) & frame["generator"].isin(manifest.generators)]

    present = set(frame["evaluator"].unique())
    absent = [member for member in spec.members if member not in present]
    if absent:
        error = MissingMemberScoreError(f"ensemble members without {setting.value} scores: {absent}")
        logger.error(f"Cannot augment Phi: {error}")
        raise error

    wide = (
        frame[frame["evaluator"].isin(spec.members)]
        .pivot_table(index=["image_id", "generator"], columns="evaluator", values="score", aggfunc="first")
        .reindex(columns=list(spec.members))
    )
    complete = wide.dropna()
    if len(complete) < len(wide):
        logger.warning(f"{len(wide) - len(complete)} (image, generator) pairs lack a member score; left out of {POMMS_ID}")

    ensemble = pd.DataFrame({
        "image_id": complete.index.get_level_values("image_id"),
        "generator": complete.index.get_level_values("generator"),
        "evaluator": POMMS_ID,
        "score": predict(spec, complete.to_numpy(dtype=float)),
    })
    augmented = pd.concat([frame, ensemble], ignore_index=True)
    phi = phi_from_frame(
        augmented,
        manifest.generators,
        list(manifest.evaluators) + [POMMS_ID],
        manifest.n_images,
        setting,
        min_coverage,
    )
    logger.info(f"Augmented Phi to {phi.values.shape[0]}x{phi.values.shape[1]} with the {POMMS_ID} column")
    return standardize(phi)


def pomms_phi_score(augmented: StandardizedMatrix, spec: EnsembleSpec) -> float:
    """Mean of the ensemble column over members that are also generators.

    Raises:
        AxisMismatchError: no ensemble column, or no member is a generator
    """
    if POMMS_ID not in augmented.evaluators:
        raise AxisMismatchError(f"matrix has no {POMMS_ID} column")
    rows = [member for member in spec.members if member in augmented.generators]
    if not rows:
        raise AxisMismatchError("no ensemble member is also a generator")
    return float(np.mean([augmented.entry(member, POMMS_ID) for member in rows]))
