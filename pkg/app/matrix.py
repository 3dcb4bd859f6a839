"""
Philautia-Eval score matrices.

Phi holds mean evaluator scores (rows = generators, columns = evaluators).
Standardizing it column-wise and then row-wise gives Phi-tilde, whose
diagonal entries are the philautia (self-preference) scores.

Conventions: population standard deviation everywhere; vectors whose std is
at or below ZERO_VARIANCE_TOL standardize to zeros and are flagged; cell
means run over the scores present once a coverage floor is met.
"""

import dataclasses
import itertools
from dataclasses import dataclass, field
from math import comb
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.config import DEFAULT_MIN_COVERAGE, MAX_SUBSETS, ZERO_VARIANCE_TOL
from app.exceptions import (
    AxisMismatchError,
    CombinatorialGuardError,
    CoverageError,
    DegenerateInputError,
)
from app.logger import logger
from app.schemas import DiagonalZScore, RunManifest, ScoreRecord, Setting


def _frozen(values: np.ndarray, dtype=float) -> np.ndarray:
    array = np.array(values, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class ScoreMatrix:
    """Phi: mean score of each evaluator (column) over each generator's captions (row)"""

    generators: Tuple[str, ...]
    evaluators: Tuple[str, ...]
    values: np.ndarray
    counts: np.ndarray
    setting: Optional[Setting] = None

    def __post_init__(self):
        object.__setattr__(self, "generators", tuple(self.generators))
        object.__setattr__(self, "evaluators", tuple(self.evaluators))
        object.__setattr__(self, "values", _frozen(self.values))
        object.__setattr__(self, "counts", _frozen(self.counts, dtype=np.int64))
        shape = (len(self.generators), len(self.evaluators))
        if self.values.shape != shape or self.counts.shape != shape:
            raise AxisMismatchError(f"matrix shape {self.values.shape} does not match axes {shape}")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.values, index=list(self.generators), columns=list(self.evaluators))

    def to_csv(self, path: str) -> None:
        write_matrix_csv(self.to_frame(), path)


@dataclass(frozen=True)
class StandardizedMatrix:
    """Phi-tilde: Phi after column-wise then row-wise z-scoring"""

    generators: Tuple[str, ...]
    evaluators: Tuple[str, ...]
    values: np.ndarray
    degenerate_rows: FrozenSet[str] = field(default_factory=frozenset)
    degenerate_columns: FrozenSet[str] = field(default_factory=frozenset)
    setting: Optional[Setting] = None

    def __post_init__(self):
        object.__setattr__(self, "generators", tuple(self.generators))
        object.__setattr__(self, "evaluators", tuple(self.evaluators))
        object.__setattr__(self, "values", _frozen(self.values))
        object.__setattr__(self, "degenerate_rows", frozenset(self.degenerate_rows))
        object.__setattr__(self, "degenerate_columns", frozenset(self.degenerate_columns))
        if self.values.shape != (len(self.generators), len(self.evaluators)):
            raise AxisMismatchError(f"matrix shape {self.values.shape} does not match axes")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.values, index=list(self.generators), columns=list(self.evaluators))

    def to_csv(self, path: str) -> None:
        write_matrix_csv(self.to_frame(), path)

    def entry(self, generator: str, evaluator: str) -> float:
        return float(self.values[self.generators.index(generator), self.evaluators.index(evaluator)])

    @property
    def shared_ids(self) -> List[str]:
        """Models on both axes, in generator order"""
        evaluators = set(self.evaluators)
        return [model for model in self.generators if model in evaluators]


def write_matrix_csv(frame: pd.DataFrame, path: str) -> None:
    """Matrix CSV: header row of evaluator ids, one row per generator, 6 decimals"""
    frame.to_csv(path, float_format="%.6f", index_label="generator", lineterminator="\n")
    logger.info(f"Wrote {frame.shape[0]}x{frame.shape[1]} matrix to {path}")


def read_matrix_csv(path: str) -> pd.DataFrame:
    frame = pd.read_csv(path, index_col=0)
    frame.index = frame.index.astype(str)
    frame.columns = frame.columns.astype(str)
    return frame


def phi_from_csv(path: str, setting: Optional[Setting] = None) -> ScoreMatrix:
    """Load a Phi CSV; per-cell counts are not stored in the CSV and load as 1"""
    frame = read_matrix_csv(path)
    return ScoreMatrix(
        generators=tuple(frame.index),
        evaluators=tuple(frame.columns),
        values=frame.to_numpy(dtype=float),
        counts=np.ones(frame.shape, dtype=np.int64),
        setting=setting,
    )


def standardized_from_csv(path: str, setting: Optional[Setting] = None) -> StandardizedMatrix:
    """Load a Phi-tilde CSV written by StandardizedMatrix.to_csv (degeneracy flags are not stored)"""
    frame = read_matrix_csv(path)
    return StandardizedMatrix(
        generators=tuple(frame.index),
        evaluators=tuple(frame.columns),
        values=frame.to_numpy(dtype=float),
        setting=setting,
    )


def scores_frame(scores: Iterable[ScoreRecord], setting: Setting) -> pd.DataFrame:
    """Long frame (image_id, generator, evaluator, score) for one setting.
    Rows are sorted by key so cell means do not depend on journal order."""
    rows = sorted(
        (
            (record.image_id, record.generator, record.evaluator, record.score)
            for record in scores
            if record.setting == setting
        ),
        key=lambda row: row[:3],
    )
    return pd.DataFrame(rows, columns=["image_id", "generator", "evaluator", "score"])


def phi_from_frame(
            frame: pd.DataFrame,
            generators: Sequence[str],
            evaluators: Sequence[str],
            n_images: int,
            setting: Optional[Setting],
            min_coverage: float = DEFAULT_MIN_COVERAGE
        ) -> ScoreMatrix:
    """
    Average a long score frame into Phi over the given axes, enforcing the
    coverage floor on every cell.
    """
    frame = frame[frame["generator"].isin(generators) & frame["evaluator"].isin(evaluators)]
    grouped = frame.groupby(["generator", "evaluator"])["score"].agg(["mean", "count"])

    values = np.zeros((len(generators), len(evaluators)))
    counts = np.zeros((len(generators), len(evaluators)), dtype=np.int64)
    for i, generator in enumerate(generators):
        for j, evaluator in enumerate(evaluators):
            present = int(grouped["count"].get((generator, evaluator), 0))
            if present == 0 or present / n_images < min_coverage:
                error = CoverageError(generator, evaluator, present, n_images, min_coverage)
                logger.error(f"Cannot build Phi: {error}")
                raise error
            values[i, j] = grouped["mean"][(generator, evaluator)]
            counts[i, j] = present
            if present < n_images:
                logger.warning(f"Cell ({generator}, {evaluator}) averages {present}/{n_images} images")

    return ScoreMatrix(generators, evaluators, values, counts, setting)


def build_phi(
            scores: Sequence[ScoreRecord],
            manifest: RunManifest,
            setting: Setting,
            min_coverage: float = DEFAULT_MIN_COVERAGE
        ) -> ScoreMatrix:
    """Build Phi for one setting.

    Args:
        scores (Sequence[ScoreRecord]): validated score records
        manifest (RunManifest): axes and image count
        setting (Setting): which prompt setting to average
        min_coverage (float, optional): minimum present/N per cell. Defaults to 0.95.

    Raises:
        CoverageError: a cell is empty or below the floor

    Returns:
        ScoreMatrix: |generators| x |evaluators| mean scores with counts
    """
    logger.info(f"Building Phi ({setting.value}) from {len(scores)} records")
    frame = scores_frame(scores, setting)
    frame = frame[frame["image_id"].isin(manifest.image_ids)]
    return phi_from_frame(frame, manifest.generators, manifest.evaluators, manifest.n_images, setting, min_coverage)


def zscore(vector: np.ndarray) -> Tuple[np.ndarray, bool]:
    std = vector.std()
    if std <= ZERO_VARIANCE_TOL:
        return np.zeros_like(vector), True
    return (vector - vector.mean()) / std, False


def standardize(phi: ScoreMatrix) -> StandardizedMatrix:
    """Column-wise (evaluator) then row-wise (generator) z-scoring of Phi.

    Args:
        phi (ScoreMatrix): raw mean-score matrix

    Raises:
        DegenerateInputError: fewer than 2 rows or columns

    Returns:
        StandardizedMatrix: Phi-tilde with degenerate rows/columns flagged
    """
    n_rows, n_cols = phi.values.shape
    if n_rows < 2 or n_cols < 2:
        raise DegenerateInputError(f"standardization needs at least 2x2, got {n_rows}x{n_cols}")

    values = np.array(phi.values, dtype=float)
    degenerate_columns = set()
    for j in range(n_cols):
        values[:, j], flat = zscore(values[:, j])
        if flat:
            degenerate_columns.add(phi.evaluators[j])

    degenerate_rows = set()
    for i in range(n_rows):
        values[i, :], flat = zscore(values[i, :])
        if flat:
            degenerate_rows.add(phi.generators[i])

    if degenerate_columns or degenerate_rows:
        logger.warning(
            f"Zero-variance vectors set to 0: columns {sorted(degenerate_columns)}, rows {sorted(degenerate_rows)}"
        )

    return StandardizedMatrix(
        phi.generators,
        phi.evaluators,
        values,
        frozenset(degenerate_rows),
        frozenset(degenerate_columns),
        phi.setting,
    )


def philautia_scores(phi_tilde: StandardizedMatrix) -> Dict[str, float]:
    """Diagonal of Phi-tilde for every model that both generates and evaluates.

    Evaluator-only columns (an ensemble judge, say) are allowed; a generator
    without its own evaluator column is not.

    Raises:
        AxisMismatchError: a generator has no matching evaluator
    """
    unmatched = [model for model in phi_tilde.generators if model not in phi_tilde.evaluators]
    if unmatched:
        raise AxisMismatchError(f"generators without an evaluator column: {unmatched}")
    return {model: phi_tilde.entry(model, model) for model in phi_tilde.generators}


def diagonal_zscores(phi_tilde: StandardizedMatrix) -> Dict[str, DiagonalZScore]:
    """
    How far each evaluator's self-score sits from the rest of its column.
    z is None for zero-variance columns.
    """
    philautia = philautia_scores(phi_tilde)
    result = {}
    for model, diag in philautia.items():
        column = phi_tilde.values[:, phi_tilde.evaluators.index(model)]
        col_mean = float(column.mean())
        col_std = float(column.std())
        z = None
        if col_std > ZERO_VARIANCE_TOL:
            z = (diag - col_mean) / col_std
        else:
            logger.warning(f"Column {model} has zero variance; z-score undefined")
        result[model] = DiagonalZScore(diag=diag, col_mean=col_mean, col_std=col_std, z=z)
    return result


def reduce_manifest(
            manifest: RunManifest,
            drop_evaluators: Iterable[str] = (),
            drop_generators: Iterable[str] = ()
        ) -> RunManifest:
    """Manifest without the dropped models, axis order kept.

    Raises:
        DegenerateInputError: fewer than 2 generators or evaluators remain
    """
    drop_evaluators = set(drop_evaluators)
    drop_generators = set(drop_generators)
    generators = [model for model in manifest.generators if model not in drop_generators]
    evaluators = [model for model in manifest.evaluators if model not in drop_evaluators]
    if len(generators) < 2 or len(evaluators) < 2:
        raise DegenerateInputError(
            f"dropping leaves {len(generators)} generators x {len(evaluators)} evaluators; need 2x2"
        )
    if drop_evaluators or drop_generators:
        logger.info(f"Dropping evaluators {sorted(drop_evaluators)}, generators {sorted(drop_generators)}")
    return manifest.model_copy(update={"generators": generators, "evaluators": evaluators})


def exclude_models(
            scores: Sequence[ScoreRecord],
            manifest: RunManifest,
            setting: Setting,
            drop_evaluators: Iterable[str] = (),
            drop_generators: Iterable[str] = (),
            min_coverage: float = DEFAULT_MIN_COVERAGE
        ) -> StandardizedMatrix:
    """Recompute Phi-tilde from raw scores on reduced axes.

    Raises:
        DegenerateInputError: fewer than 2 generators or evaluators remain
    """
    reduced = reduce_manifest(manifest, drop_evaluators, drop_generators)
    return standardize(build_phi(scores, reduced, setting, min_coverage))


@dataclass(frozen=True)
class SubmatrixCount:
    ids: Tuple[str, ...]
    positive_offdiag_count: int


def submatrix_scan(phi_tilde: StandardizedMatrix, k: int) -> List[SubmatrixCount]:
    """
    Count strictly positive off-diagonal entries of every k x k principal
    submatrix over the models on both axes. Sorted by count descending, then
    by sorted member ids.

    Raises:
        ValueError: k outside 1..M
        CombinatorialGuardError: more than MAX_SUBSETS subsets
    """
    shared = sorted(phi_tilde.shared_ids)
    m = len(shared)
    if not 1 <= k <= m:
        raise ValueError(f"k must be in 1..{m}, got {k}")
    n_subsets = comb(m, k)
    if n_subsets > MAX_SUBSETS:
        raise CombinatorialGuardError(f"C({m},{k}) = {n_subsets} subsets exceeds the limit of {MAX_SUBSETS}")

    rows = [phi_tilde.generators.index(model) for model in shared]
    cols = [phi_tilde.evaluators.index(model) for model in shared]
    positive = (phi_tilde.values[np.ix_(rows, cols)] > 0).astype(np.int64)
    np.fill_diagonal(positive, 0)

    results = []
    for subset in itertools.combinations(range(m), k):
        index = list(subset)
        count = int(positive[np.ix_(index, index)].sum())
        results.append(SubmatrixCount(tuple(shared[a] for a in subset), count))

    results.sort(key=lambda item: (-item.positive_offdiag_count, item.ids))
    logger.info(f"Scanned {n_subsets} {k}x{k} submatrices")
    return results


def subset_rank(results: Sequence[SubmatrixCount], ids: Iterable[str]) -> Tuple[int, int]:
    """
    Position (1-based, in scan order) and competition rank (1 + number of
    distinct larger counts) of a subset in a submatrix_scan result.
    """
    wanted = tuple(sorted(ids))
    for position, item in enumerate(results, start=1):
        if item.ids == wanted:
            larger = {other.positive_offdiag_count for other in results if other.positive_offdiag_count > item.positive_offdiag_count}
            return position, len(larger) + 1
    raise KeyError(wanted)


def principal_submatrix(phi_tilde: StandardizedMatrix, ids: Sequence[str]) -> StandardizedMatrix:
    """Rows and columns of the given models, in the given order (no re-standardization)"""
    missing = [model for model in ids if model not in phi_tilde.generators or model not in phi_tilde.evaluators]
    if missing:
        raise AxisMismatchError(f"models not on both axes: {missing}")
    rows = [phi_tilde.generators.index(model) for model in ids]
    cols = [phi_tilde.evaluators.index(model) for model in ids]
    return StandardizedMatrix(
        tuple(ids),
        tuple(ids),
        phi_tilde.values[np.ix_(rows, cols)],
        phi_tilde.degenerate_rows & set(ids),
        phi_tilde.degenerate_columns & set(ids),
        phi_tilde.setting,
    )


def evaluator_extremes(phi_tilde: StandardizedMatrix) -> Dict[str, Tuple[str, float]]:
    """Per evaluator, the generator it scores most extremely (largest |entry|)"""
    extremes = {}
    for j, evaluator in enumerate(phi_tilde.evaluators):
        column = phi_tilde.values[:, j]
        i = int(np.argmax(np.abs(column)))
        extremes[evaluator] = (phi_tilde.generators[i], float(column[i]))
    return extremes


def settings_delta(ref_based: StandardizedMatrix, ref_free: StandardizedMatrix) -> Dict[str, float]:
    """Philautia score change when references are removed from the prompt (ref-free minus ref-based)"""
    if ref_based.generators != ref_free.generators or ref_based.evaluators != ref_free.evaluators:
        raise AxisMismatchError("reference-based and reference-free matrices have different axes")
    based = philautia_scores(ref_based)
    free = philautia_scores(ref_free)
    return {model: free[model] - based[model] for model in based}


def minmax_baseline(phi: ScoreMatrix) -> ScoreMatrix:
    """
    Per-column min-max scaling of Phi. Kept only as the comparison baseline:
    every column ends up containing both 0 and 1 whatever the evaluator thinks.

    Raises:
        DegenerateInputError: a column is constant
    """
    values = np.array(phi.values, dtype=float)
    low = values.min(axis=0)
    high = values.max(axis=0)
    flat = [phi.evaluators[j] for j in range(values.shape[1]) if high[j] - low[j] <= ZERO_VARIANCE_TOL]
    if flat:
        raise DegenerateInputError(f"min-max scaling undefined for constant columns {flat}")
    return dataclasses.replace(phi, values=(values - low) / (high - low))
