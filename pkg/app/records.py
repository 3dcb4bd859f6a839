"""
JSONL record files: loading with line diagnostics, the canonical writer,
manifest I/O and dataset coverage checks.
"""

import os
from collections import Counter
from typing import Dict, Iterable, Iterator, List, Sequence, Tuple, Type, TypeVar, Union

import numpy as np
import orjson
from pydantic import BaseModel, ValidationError
from pydantic_core import to_jsonable_python

from app.exceptions import DatasetValidationError, RecordValidationError
from app.logger import logger
from app.schemas import (
    CaptionRecord,
    CoverageCell,
    CoverageReport,
    HumanJudgmentRecord,
    MissingCellRecord,
    Record,
    RunManifest,
    ScoreRecord,
)

R = TypeVar("R", bound=Record)

RECORD_KINDS: Dict[str, Type[Record]] = {
    "caption": CaptionRecord,
    "score": ScoreRecord,
    "judgment": HumanJudgmentRecord,
    "missing": MissingCellRecord,
}


def _resolve_kind(kind: Union[str, Type[R]]) -> Type[R]:
    if isinstance(kind, str):
        try:
            return RECORD_KINDS[kind]
        except KeyError as e:
            raise ValueError(f"unknown record kind {kind!r}; expected one of {sorted(RECORD_KINDS)}") from e
    return kind


def _describe(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        location = ".".join(str(piece) for piece in item["loc"]) or "<record>"
        parts.append(f"{location}: {item['msg']}")
    return "; ".join(parts)


def iter_records(
            path: str,
            kind: Union[str, Type[R]]
        ) -> Iterator[Tuple[int, R]]:
    """Yield (line number, record) pairs from a JSONL file.

    Args:
        path (str): JSONL file, one JSON object per line
        kind (Union[str, Type[R]]): "caption", "score", "judgment", "missing" or a record class

    Raises:
        RecordValidationError: malformed JSON or a schema violation, naming the line

    Yields:
        Iterator[Tuple[int, R]]: 1-based line number and parsed record
    """
    record_type = _resolve_kind(kind)
    with open(path, "rb") as records_file:
        for line_number, line in enumerate(records_file, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            try:
                payload = orjson.loads(stripped)
            except orjson.JSONDecodeError as e:
                raise RecordValidationError(path, line_number, f"malformed JSON ({e})") from e
            if not isinstance(payload, dict):
                raise RecordValidationError(path, line_number, "expected a JSON object")
            try:
                yield line_number, record_type.model_validate(payload)
            except ValidationError as e:
                raise RecordValidationError(path, line_number, _describe(e)) from e


def load_records(
            path: str,
            kind: Union[str, Type[R]]
        ) -> List[R]:
    """Load every record of a JSONL file.

    Args:
        path (str): JSONL file
        kind (Union[str, Type[R]]): record kind name or class

    Returns:
        List[R]: records in file order
    """
    try:
        records = [record for _, record in iter_records(path, kind)]
    except RecordValidationError as e:
        logger.error(f"Failed to load records: {e}")
        raise e
    logger.info(f"Loaded {len(records)} {kind if isinstance(kind, str) else kind.__name__} records from {path}")
    return records


def encode_record(record: BaseModel) -> bytes:
    """Canonical single-line encoding: sorted keys, shortest round-trip floats.

    Declared optional fields are left out when None; unknown extra fields are
    written exactly as loaded, nulls included.
    """
    extra = record.model_extra or {}
    payload = record.model_dump(mode="json", exclude_none=True)
    payload.update(to_jsonable_python(extra))
    return orjson.dumps(payload, option=orjson.OPT_SORT_KEYS)


def save_records(
            path: str,
            records: Iterable[BaseModel]
        ) -> int:
    """Write records with the canonical writer, replacing the file atomically.

    Args:
        path (str): output JSONL file
        records (Iterable[BaseModel]): records to write, in order

    Returns:
        int: bytes written
    """
    payload = b"".join(encode_record(record) + b"\n" for record in records)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as records_file:
        records_file.write(payload)
    os.replace(tmp_path, path)
    logger.info(f"Wrote {len(payload)} bytes to {path}")
    return len(payload)


def append_record(
            path: str,
            record: BaseModel
        ) -> None:
    """Append one canonical line to a journal file."""
    with open(path, "ab") as journal_file:
        journal_file.write(encode_record(record) + b"\n")
        journal_file.flush()


def load_manifest(path: str) -> RunManifest:
    """Read manifest.json.

    Args:
        path (str): manifest file

    Returns:
        RunManifest: validated manifest
    """
    try:
        with open(path, "rb") as manifest_file:
            manifest = RunManifest.model_validate_json(manifest_file.read())
    except ValidationError as e:
        logger.error(f"Invalid manifest {path}: {e}")
        raise RecordValidationError(path, 1, _describe(e)) from e
    logger.info(
        f"Manifest {path}: {len(manifest.generators)} generators, "
        f"{len(manifest.evaluators)} evaluators, {manifest.n_images} images"
    )
    return manifest


def save_manifest(path: str, manifest: RunManifest) -> int:
    """Write manifest.json with sorted keys and two-space indentation."""
    payload = orjson.dumps(
        manifest.model_dump(mode="json", exclude_none=True),
        option=orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2,
    ) + b"\n"
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as manifest_file:
        manifest_file.write(payload)
    return len(payload)


def validate_dataset(
            manifest: RunManifest,
            scores: Sequence[ScoreRecord],
            strict: bool = True
        ) -> CoverageReport:
    """
    Check score records against the manifest universe and count coverage
    per (generator, evaluator, setting) cell.

    Args:
        manifest (RunManifest): ids that define the universe
        scores (Sequence[ScoreRecord]): records to check
        strict (bool, optional): raise when duplicates or orphans exist. Defaults to True.

    Raises:
        DatasetValidationError: duplicate keys or records outside the universe (strict only)

    Returns:
        CoverageReport: cell coverage plus flagged keys
    """
    generators = set(manifest.generators)
    evaluators = set(manifest.evaluators)
    images = set(manifest.image_ids)
    settings = set(manifest.settings)

    seen = set()
    duplicates = []
    orphans = []
    counts: Counter = Counter()

    for record in scores:
        if (
            record.generator not in generators
            or record.evaluator not in evaluators
            or record.image_id not in images
            or record.setting not in settings
        ):
            orphans.append(record.key)
            continue
        if record.key in seen:
            duplicates.append(record.key)
            continue
        seen.add(record.key)
        counts[(record.generator, record.evaluator, record.setting)] += 1

    n_images = manifest.n_images
    cells = [
        CoverageCell(
            generator=generator,
            evaluator=evaluator,
            setting=setting,
            present=counts[(generator, evaluator, setting)],
            expected=n_images,
            coverage=counts[(generator, evaluator, setting)] / n_images,
        )
        for setting in manifest.settings
        for generator in manifest.generators
        for evaluator in manifest.evaluators
    ]
    report = CoverageReport(cells=cells, duplicates=duplicates, orphans=orphans, total_valid=len(seen))

    if duplicates:
        logger.warning(f"{len(duplicates)} duplicate score keys, first: {duplicates[0]}")
    if orphans:
        logger.warning(f"{len(orphans)} orphan score records, first: {orphans[0]}")

    if strict and not report.ok:
        problems = []
        if duplicates:
            problems.append("duplicate keys: " + ", ".join(str(key) for key in duplicates[:5]))
        if orphans:
            problems.append("records outside the manifest: " + ", ".join(str(key) for key in orphans[:5]))
        raise DatasetValidationError("; ".join(problems), report=report)

    return report


def assign_splits(
            judgments: Sequence[HumanJudgmentRecord],
            fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1),
            seed: int = 0
        ) -> List[HumanJudgmentRecord]:
    """
    Give a train/val/test split to judgments that lack one. Assignment depends
    only on the seed and the sorted sample ids.

    Args:
        judgments (Sequence[HumanJudgmentRecord]): records, some possibly already split
        fractions (Tuple[float, float, float], optional): train/val/test shares. Defaults to (0.8, 0.1, 0.1).
        seed (int, optional): permutation seed. Defaults to 0.

    Returns:
        List[HumanJudgmentRecord]: records in input order with split filled in
    """
    if any(share < 0 for share in fractions) or not np.isclose(sum(fractions), 1.0):
        raise ValueError(f"split fractions must be non-negative and sum to 1, got {fractions}")

    pending = sorted(
        (index for index, record in enumerate(judgments) if record.split is None),
        key=lambda index: judgments[index].key,
    )
    order = np.random.default_rng(seed).permutation(len(pending))
    n_train = int(round(fractions[0] * len(pending)))
    n_val = int(round(fractions[1] * len(pending)))

    assigned = list(judgments)
    for rank, position in enumerate(order):
        index = pending[position]
        split = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
        assigned[index] = judgments[index].model_copy(update={"split": split})
    return assigned
