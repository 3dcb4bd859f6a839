"""
Caption and score collection against OpenAI-compatible chat endpoints.

Every finished cell is appended to a JSONL journal as soon as it completes,
so an interrupted run resumes where it stopped. Cells that keep failing are
written to a `.missing.jsonl` sidecar instead and are not retried on resume.
"""

import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Set

from langchain_core.language_models import BaseChatModel
from tenacity import Retrying, before_sleep_log, stop_after_attempt, wait_exponential

from app.config import RETRY_WAIT_SECONDS
from app.exceptions import CollectionAbortedError, ParseError, PromptRenderError
from app.logger import logger
from app.records import append_record, iter_records
from app.schemas import (
    CaptionRecord,
    EndpointConfig,
    HumanJudgmentRecord,
    ImageRef,
    MissingCellRecord,
    PromptBundle,
    Record,
    RunManifest,
    ScoreRecord,
    Setting,
)
from app.utils import build_messages, get_llm_object

LLMFactory = Callable[[EndpointConfig], BaseChatModel]

SCORE_PATTERN = re.compile(r"\$\s*(?:\{\{\s*)?(-?\d+)(?:\s*\}\})?\s*\$")
PLACEHOLDER_PATTERN = re.compile(r"\{\{(Reference|Caption)\}\}")


def render_prompt(
            bundle: PromptBundle,
            setting: Setting,
            caption: str,
            references: Optional[Sequence[str]] = None
        ) -> str:
    """Fill an evaluation template with the caption (and references).

    References are joined one per line. The reference-free template ignores
    any references passed in.

    Args:
        bundle (PromptBundle): evaluation templates
        setting (Setting): which template to use
        caption (str): caption under evaluation
        references (Optional[Sequence[str]], optional): human references. Defaults to None.

    Raises:
        PromptRenderError: references missing for ref-based, or "{{" left in the output

    Returns:
        str: prompt text
    """
    if setting == Setting.REFERENCE_BASED:
        if not references:
            raise PromptRenderError("reference-based evaluation needs at least one reference caption")
        template = bundle.eval_prompt_ref_based
        values = {"Reference": "\n".join(references), "Caption": caption}
    else:
        template = bundle.eval_prompt_ref_free
        values = {"Caption": caption}

    rendered = PLACEHOLDER_PATTERN.sub(lambda match: values[match.group(1)], template)
    if "{{" in rendered:
        raise PromptRenderError("rendered prompt still contains '{{'")
    return rendered


def parse_score(response: str) -> int:
    """Integer score from the last $...$ group of a judge reply.

    Args:
        response (str): full reply text

    Raises:
        ParseError: no dollar-wrapped integer, or one outside 0..100

    Returns:
        int: raw score in 0..100
    """
    matches = SCORE_PATTERN.findall(response or "")
    if not matches:
        raise ParseError("no dollar-wrapped integer score in reply", response)
    value = int(matches[-1])
    if not 0 <= value <= 100:
        raise ParseError(f"score {value} outside 0..100", response)
    return value


def _reply_text(reply) -> str:
    content = reply.content
    if isinstance(content, str):
        return content
    parts = []
    for part in content:
        if isinstance(part, str):
            parts.append(part)
        elif isinstance(part, dict) and part.get("type") == "text":
            parts.append(part.get("text", ""))
    return "".join(parts)


def missing_path(journal_path: str) -> str:
    """Sidecar for cells that exhausted their retries: scores.jsonl -> scores.missing.jsonl"""
    root, _ = os.path.splitext(journal_path)
    return f"{root}.missing.jsonl"


def _journaled_keys(path: str, kind: str) -> Set[tuple]:
    if not os.path.exists(path):
        return set()
    return {record.key for _, record in iter_records(path, kind)}


@dataclass(frozen=True)
class _Job:
    """One request: which endpoint, what to send, and how to turn the reply into a record"""

    model: str
    messages: list
    on_reply: Callable[[str], Record]
    on_failure: Callable[[Exception, int], Optional[Record]]
    label: str


def _run_job(llm: BaseChatModel, endpoint: EndpointConfig, job: _Job, retry_wait: float) -> Optional[Record]:
    retryer = Retrying(
        stop=stop_after_attempt(max(1, endpoint.max_retries)),
        wait=wait_exponential(multiplier=retry_wait, max=30),
        before_sleep=before_sleep_log(logger, logging.DEBUG),
        reraise=True,
    )
    try:
        for attempt in retryer:
            with attempt:
                reply = llm.invoke(job.messages)
                record = job.on_reply(_reply_text(reply))
        return record
    except Exception as e:
        attempts = retryer.statistics.get("attempt_number", 1)
        logger.warning(f"Giving up on {job.label} after {attempts} attempts: {e}")
        return job.on_failure(e, attempts)


def _run_jobs(
            jobs: Sequence[_Job],
            endpoints: Mapping[str, EndpointConfig],
            llm_factory: LLMFactory,
            retry_wait: float,
            write: Callable[[Record], None]
        ) -> int:
    """
    Run jobs with one bounded pool per endpoint. Results are written from
    this thread only, in completion order.
    """
    by_model: Dict[str, List[_Job]] = {}
    for job in jobs:
        by_model.setdefault(job.model, []).append(job)

    pools = {model: ThreadPoolExecutor(max_workers=endpoints[model].max_parallel, thread_name_prefix=model)
             for model in by_model}
    written = 0
    try:
        futures = []
        for model, model_jobs in by_model.items():
            endpoint = endpoints[model]
            llm = llm_factory(endpoint)
            for job in model_jobs:
                futures.append(pools[model].submit(_run_job, llm, endpoint, job, retry_wait))

        for future in as_completed(futures):
            record = future.result()
            if record is None:
                continue
            try:
                write(record)
            except OSError as e:
                logger.error(f"Journal write failed, aborting collection: {e}")
                raise CollectionAbortedError(f"journal write failed: {e}") from e
            written += 1
    finally:
        for pool in pools.values():
            pool.shutdown(wait=True, cancel_futures=True)
    return written


def _check_endpoints(models: Iterable[str], endpoints: Mapping[str, EndpointConfig]) -> None:
    missing = sorted(set(models) - set(endpoints))
    if missing:
        raise ValueError(f"no endpoint configured for {missing}")


def collect_scores(
            manifest: RunManifest,
            captions: Sequence[CaptionRecord],
            endpoints: Mapping[str, EndpointConfig],
            bundle: PromptBundle,
            journal_path: str,
            settings: Optional[Sequence[Setting]] = None,
            llm_factory: LLMFactory = get_llm_object,
            retry_wait: float = RETRY_WAIT_SECONDS,
            retry_missing: bool = False
        ) -> List[ScoreRecord]:
    """Score every caption with every evaluator, resuming from the journal.

    Args:
        manifest (RunManifest): generators, evaluators, images and references
        captions (Sequence[CaptionRecord]): captions to score
        endpoints (Mapping[str, EndpointConfig]): evaluator id -> endpoint
        bundle (PromptBundle): evaluation templates
        journal_path (str): scores.jsonl, appended to
        settings (Optional[Sequence[Setting]], optional): settings to collect. Defaults to the manifest's.
        llm_factory (LLMFactory, optional): builds the chat model for an endpoint. Defaults to get_llm_object.
        retry_wait (float, optional): exponential backoff base in seconds. Defaults to RETRY_WAIT_SECONDS.
        retry_missing (bool, optional): retry cells recorded as missing. Defaults to False.

    Raises:
        PromptRenderError: a ref-based cell has no references
        CollectionAbortedError: the journal could not be written

    Returns:
        List[ScoreRecord]: every score now in the journal
    """
    settings = list(settings or manifest.settings)
    _check_endpoints(manifest.evaluators, endpoints)

    done = _journaled_keys(journal_path, "score")
    sidecar = missing_path(journal_path)
    if not retry_missing:
        done |= _journaled_keys(sidecar, "missing")

    by_key = {caption.key: caption for caption in captions}
    jobs = []
    for setting in settings:
        for generator in manifest.generators:
            for image in manifest.images:
                caption = by_key.get((image.image_id, generator))
                if caption is None:
                    logger.warning(f"No caption from {generator} for {image.image_id}; skipping")
                    continue
                prompt = render_prompt(bundle, setting, caption.caption, manifest.references.get(image.image_id))
                for evaluator in manifest.evaluators:
                    if (image.image_id, generator, evaluator, setting) in done:
                        continue
                    jobs.append(_score_job(
                        prompt, image, image.image_id, generator, evaluator, setting, endpoints[evaluator],
                    ))

    logger.info(f"Collecting {len(jobs)} scores ({len(done)} cells already journaled)")
    written = _run_jobs(jobs, endpoints, llm_factory, retry_wait, lambda record: _write(record, journal_path, sidecar))
    logger.info(f"Collection finished: {written} records written")
    return [record for _, record in iter_records(journal_path, "score")] if os.path.exists(journal_path) else []


def _write(record: Record, journal_path: str, sidecar: str) -> None:
    append_record(sidecar if isinstance(record, MissingCellRecord) else journal_path, record)


def _score_job(
            prompt: str,
            image: Optional[ImageRef],
            image_id: str,
            generator: str,
            evaluator: str,
            setting: Setting,
            endpoint: EndpointConfig
        ) -> _Job:
    def on_reply(text: str) -> ScoreRecord:
        return ScoreRecord(
            image_id=image_id,
            generator=generator,
            evaluator=evaluator,
            setting=setting,
            raw_score=parse_score(text),
            raw_response=text,
        )

    def on_failure(error: Exception, attempts: int) -> MissingCellRecord:
        return MissingCellRecord(
            image_id=image_id,
            generator=generator,
            evaluator=evaluator,
            setting=setting,
            attempts=attempts,
            error=f"{type(error).__name__}: {error}",
        )

    return _Job(
        model=evaluator,
        messages=build_messages(prompt, image, endpoint.image_transport),
        on_reply=on_reply,
        on_failure=on_failure,
        label=f"{evaluator} on ({image_id}, {generator}, {setting.value})",
    )


def collect_judgment_scores(
            judgments: Sequence[HumanJudgmentRecord],
            endpoints: Mapping[str, EndpointConfig],
            bundle: PromptBundle,
            setting: Setting,
            journal_path: str,
            images: Optional[Mapping[str, ImageRef]] = None,
            llm_factory: LLMFactory = get_llm_object,
            retry_wait: float = RETRY_WAIT_SECONDS
        ) -> List[ScoreRecord]:
    """Score benchmark candidates with every endpoint so an ensemble can be trained.

    Records are keyed image_id = sample_id and generator = judgment.generator.

    Args:
        judgments (Sequence[HumanJudgmentRecord]): candidates with human scores
        endpoints (Mapping[str, EndpointConfig]): evaluator id -> endpoint
        bundle (PromptBundle): evaluation templates
        setting (Setting): prompt setting
        journal_path (str): JSONL journal, appended to
        images (Optional[Mapping[str, ImageRef]], optional): image_id -> image. Defaults to text-only prompts.
        llm_factory (LLMFactory, optional): chat model builder. Defaults to get_llm_object.
        retry_wait (float, optional): backoff base in seconds. Defaults to RETRY_WAIT_SECONDS.

    Returns:
        List[ScoreRecord]: every score now in the journal
    """
    images = images or {}
    done = _journaled_keys(journal_path, "score")
    sidecar = missing_path(journal_path)
    done |= _journaled_keys(sidecar, "missing")

    jobs = []
    for judgment in judgments:
        image = images.get(judgment.image_id)
        if image is None:
            logger.debug(f"No image for {judgment.image_id}; sending text only")
        prompt = render_prompt(bundle, setting, judgment.candidate, judgment.references)
        for evaluator in sorted(endpoints):
            if (judgment.sample_id, judgment.generator, evaluator, setting) in done:
                continue
            jobs.append(_score_job(
                prompt, image, judgment.sample_id, judgment.generator, evaluator, setting, endpoints[evaluator],
            ))

    logger.info(f"Scoring {len(jobs)} benchmark candidates")
    _run_jobs(jobs, endpoints, llm_factory, retry_wait, lambda record: _write(record, journal_path, sidecar))
    return [record for _, record in iter_records(journal_path, "score")] if os.path.exists(journal_path) else []


def collect_captions(
            manifest: RunManifest,
            endpoints: Mapping[str, EndpointConfig],
            bundle: PromptBundle,
            out_path: str,
            llm_factory: LLMFactory = get_llm_object,
            retry_wait: float = RETRY_WAIT_SECONDS
        ) -> List[CaptionRecord]:
    """Ask every generator for a one-sentence caption of every image.

    Resumes from out_path; images whose caption stays empty after every retry
    are logged and skipped.

    Args:
        manifest (RunManifest): generators and images
        endpoints (Mapping[str, EndpointConfig]): generator id -> endpoint
        bundle (PromptBundle): holds the generation prompt
        out_path (str): captions.jsonl, appended to
        llm_factory (LLMFactory, optional): chat model builder. Defaults to get_llm_object.
        retry_wait (float, optional): backoff base in seconds. Defaults to RETRY_WAIT_SECONDS.

    Returns:
        List[CaptionRecord]: every caption now in out_path
    """
    _check_endpoints(manifest.generators, endpoints)
    done = _journaled_keys(out_path, "caption")

    jobs = []
    for generator in manifest.generators:
        endpoint = endpoints[generator]
        for image in manifest.images:
            if (image.image_id, generator) in done:
                continue
            jobs.append(_caption_job(bundle.generation_prompt, image, generator, endpoint))

    logger.info(f"Generating {len(jobs)} captions ({len(done)} already present)")
    _run_jobs(jobs, endpoints, llm_factory, retry_wait, lambda record: append_record(out_path, record))
    return [record for _, record in iter_records(out_path, "caption")] if os.path.exists(out_path) else []


def _caption_job(prompt: str, image: ImageRef, generator: str, endpoint: EndpointConfig) -> _Job:
    def on_reply(text: str) -> CaptionRecord:
        caption = text.strip()
        if not caption:
            raise ParseError("empty caption", text)
        return CaptionRecord(image_id=image.image_id, generator=generator, caption=caption)

    return _Job(
        model=generator,
        messages=build_messages(prompt, image, endpoint.image_transport),
        on_reply=on_reply,
        on_failure=lambda error, attempts: None,
        label=f"{generator} caption for {image.image_id}",
    )
