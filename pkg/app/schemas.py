"""Schemas for Philautia-Eval records, manifests and configs"""

from enum import Enum
from typing import Annotated, Dict, List, Literal, Optional, Tuple

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    NonNegativeFloat,
    NonNegativeInt,
    PositiveInt,
    StringConstraints,
    field_validator,
    model_validator,
)

from app.config import DEFAULT_BASE_URL, DEFAULT_REQUEST_TIMEOUT


ModelId = Annotated[str, StringConstraints(min_length=1, pattern=r"^\S+$")]

BENCHMARK_GENERATOR = "benchmark"
SplitName = Literal["train", "val", "test"]


class Setting(str, Enum):
    """Whether the judge prompt includes human reference captions"""

    REFERENCE_BASED = "ref-based"
    REFERENCE_FREE = "ref-free"


class Record(BaseModel):
    """
    Base for every JSONL record. Unknown fields survive a load/save round trip
    but are ignored by the analytics.
    """

    model_config = ConfigDict(extra="allow", frozen=True)


class CaptionRecord(Record):
    """
    One generator's caption for one image
    """

    image_id: str = Field(..., min_length=1, description="Image the caption describes")
    generator: ModelId = Field(..., description="Model that wrote the caption")
    caption: str = Field(..., min_length=1, description="Generated caption text")

    @property
    def key(self) -> Tuple[str, str]:
        return (self.image_id, self.generator)


class ScoreRecord(Record):
    """
    One evaluator's normalized score for one (image, generator, setting) triple
    """

    image_id: str = Field(..., min_length=1, description="Image whose caption was scored")
    generator: ModelId = Field(..., description="Model that wrote the caption")
    evaluator: ModelId = Field(..., description="Model that scored the caption")
    setting: Setting = Field(..., description="Reference-based or reference-free prompt")
    raw_score: int = Field(..., ge=0, le=100, description="Integer score parsed from the reply")
    score: float = Field(..., ge=0.0, le=1.0, description="raw_score / 100")
    raw_response: Optional[str] = Field(default=None, description="Full evaluator reply")

    @model_validator(mode="before")
    @classmethod
    def fill_score(cls, data):
        if isinstance(data, dict) and data.get("score") is None and isinstance(data.get("raw_score"), int):
            data = dict(data)
            data["score"] = data["raw_score"] / 100
        return data

    @model_validator(mode="after")
    def check_normalisation(self):
        if self.score != self.raw_score / 100:
            raise ValueError(f"score {self.score!r} does not equal raw_score/100 ({self.raw_score}/100)")
        return self

    @property
    def key(self) -> Tuple[str, str, str, Setting]:
        return (self.image_id, self.generator, self.evaluator, self.setting)


class MissingCellRecord(Record):
    """
    A score cell that stayed empty after every retry
    """

    image_id: str = Field(..., min_length=1)
    generator: ModelId
    evaluator: ModelId
    setting: Setting
    attempts: NonNegativeInt = Field(..., description="Requests made before giving up")
    error: str = Field(..., description="Last error seen")

    @property
    def key(self) -> Tuple[str, str, str, Setting]:
        return (self.image_id, self.generator, self.evaluator, self.setting)


class HumanJudgmentRecord(Record):
    """
    Human rating of one candidate caption from a captioning-metric benchmark
    """

    sample_id: str = Field(..., min_length=1, description="Unique id of the rated candidate")
    image_id: str = Field(..., min_length=1, description="Image the candidate describes")
    candidate: str = Field(..., description="Candidate caption")
    references: List[str] = Field(default_factory=list, description="Human reference captions")
    human_score: float = Field(..., description="Human judgment")
    generator: ModelId = Field(
        default=BENCHMARK_GENERATOR,
        description="Generator id used to join judge scores (ScoreRecord.generator)",
    )
    split: Optional[SplitName] = Field(default=None, description="train, val or test")

    @property
    def key(self) -> Tuple[str, str]:
        return (self.sample_id, self.generator)


class ImageRef(BaseModel):
    """
    Image entry of a run manifest
    """

    model_config = ConfigDict(frozen=True)

    image_id: str = Field(..., min_length=1)
    path: Optional[str] = Field(default=None, description="Local image file")
    url: Optional[str] = Field(default=None, description="Remote image URL")


class RunManifest(BaseModel):
    """
    Universe of generators, evaluators, images and references for one run
    """

    model_config = ConfigDict(frozen=True)

    generators: List[ModelId] = Field(..., min_length=1)
    evaluators: List[ModelId] = Field(..., min_length=1)
    images: List[ImageRef] = Field(..., min_length=1)
    references: Dict[str, List[str]] = Field(default_factory=dict)
    settings: List[Setting] = Field(default_factory=lambda: [Setting.REFERENCE_BASED, Setting.REFERENCE_FREE])

    @field_validator("generators", "evaluators")
    @classmethod
    def unique_models(cls, ids: List[str]) -> List[str]:
        if len(set(ids)) != len(ids):
            raise ValueError(f"model ids must be unique: {ids}")
        return ids

    @field_validator("images")
    @classmethod
    def unique_images(cls, images: List[ImageRef]) -> List[ImageRef]:
        ids = [image.image_id for image in images]
        if len(set(ids)) != len(ids):
            raise ValueError("image ids must be unique")
        return images

    @property
    def image_ids(self) -> List[str]:
        return [image.image_id for image in self.images]

    @property
    def n_images(self) -> int:
        return len(self.images)

    def image(self, image_id: str) -> ImageRef:
        for image in self.images:
            if image.image_id == image_id:
                return image
        raise KeyError(image_id)


class CoverageCell(BaseModel):
    generator: str
    evaluator: str
    setting: Setting
    present: int
    expected: int
    coverage: float


class CoverageReport(BaseModel):
    """
    Per-cell coverage plus the records that broke the dataset invariants
    """

    cells: List[CoverageCell] = Field(default_factory=list)
    duplicates: List[Tuple[str, str, str, Setting]] = Field(default_factory=list)
    orphans: List[Tuple[str, str, str, Setting]] = Field(default_factory=list)
    total_valid: int = 0

    @property
    def ok(self) -> bool:
        return not self.duplicates and not self.orphans

    def cell(self, generator: str, evaluator: str, setting: Setting) -> CoverageCell:
        for cell in self.cells:
            if (cell.generator, cell.evaluator, cell.setting) == (generator, evaluator, setting):
                return cell
        raise KeyError((generator, evaluator, setting))


class EndpointConfig(BaseModel):
    """
    OpenAI-compatible chat endpoint serving one model
    """

    base_url: str = Field(default=DEFAULT_BASE_URL, description="Chat completion base URL")
    model_name: str = Field(..., min_length=1, description="Model name sent to the endpoint")
    api_key_env: str = Field(default="OPENAI_API_KEY", description="Env var holding the API key")
    max_parallel: PositiveInt = Field(default=4, description="Concurrent requests to this endpoint")
    requests_per_minute: PositiveInt = Field(default=60, description="Request rate ceiling")
    max_retries: NonNegativeInt = Field(default=3, description="Attempts before a cell is journaled missing")
    temperature: float = Field(default=1.0)
    top_p: float = Field(default=1.0)
    timeout: float = Field(default=DEFAULT_REQUEST_TIMEOUT, gt=0)
    image_transport: Literal["url", "base64", "none"] = Field(
        default="base64",
        description="How the image reaches the model: URL, base64 data URL, or not at all",
    )


class PromptBundle(BaseModel):
    """
    Generation prompt and the two evaluation templates
    """

    generation_prompt: str = Field(..., min_length=1)
    eval_prompt_ref_based: str = Field(..., description="Template with {{Reference}} and {{Caption}}")
    eval_prompt_ref_free: str = Field(..., description="Template with {{Caption}} only")

    @model_validator(mode="after")
    def check_placeholders(self):
        for name, template, needs_reference in (
            ("eval_prompt_ref_based", self.eval_prompt_ref_based, True),
            ("eval_prompt_ref_free", self.eval_prompt_ref_free, False),
        ):
            if template.count("{{Caption}}") != 1:
                raise ValueError(f"{name} must contain {{{{Caption}}}} exactly once")
            if needs_reference and template.count("{{Reference}}") != 1:
                raise ValueError(f"{name} must contain {{{{Reference}}}} exactly once")
            if not needs_reference and "{{Reference}}" in template:
                raise ValueError(f"{name} must not contain {{{{Reference}}}}")
        return self


class EnsembleSpec(BaseModel):
    """
    Selected evaluators and the elastic-net meta-learner on top of them
    """

    model_config = ConfigDict(populate_by_name=True)

    members: List[ModelId] = Field(..., min_length=1)
    weights: List[float] = Field(...)
    intercept: float = Field(...)
    penalty: NonNegativeFloat = Field(..., alias="lambda", description="Overall penalty strength")
    alpha: float = Field(..., ge=0.0, le=1.0, description="L1 share of the penalty")
    clamp: bool = Field(default=True, description="Clip predictions to [0, 1]")

    @model_validator(mode="after")
    def check_weights(self):
        if len(self.weights) != len(self.members):
            raise ValueError(f"{len(self.weights)} weights for {len(self.members)} members")
        return self


class SimConfig(BaseModel):
    """
    Generative model of a synthetic evaluator panel.
    score = clip(mu_j + sigma_j * (q_i + u_ik + B[i][j]) + eps, 0, 1)
    """

    M: int = Field(..., ge=2, description="Number of models (generators = evaluators)")
    N: int = Field(..., ge=1, description="Number of images")
    quality: List[float] = Field(..., description="q_i per generator")
    evaluator_offset: List[float] = Field(..., description="mu_j per evaluator")
    evaluator_scale: List[float] = Field(..., description="sigma_j > 0 per evaluator")
    bias: List[List[float]] = Field(..., description="B[i][j]: evaluator j's bias toward generator i")
    noise_std: NonNegativeFloat = Field(default=0.0)
    item_quality_std: NonNegativeFloat = Field(default=0.0, description="Per-(image, generator) quality spread")
    seed: int = Field(default=0)
    model_ids: Optional[List[ModelId]] = Field(default=None)

    @model_validator(mode="after")
    def check_shapes(self):
        if len(self.quality) != self.M:
            raise ValueError("quality must have M entries")
        if len(self.evaluator_offset) != self.M or len(self.evaluator_scale) != self.M:
            raise ValueError("evaluator_offset and evaluator_scale must have M entries")
        if any(scale <= 0 for scale in self.evaluator_scale):
            raise ValueError("evaluator_scale entries must be positive")
        if len(self.bias) != self.M or any(len(row) != self.M for row in self.bias):
            raise ValueError("bias must be an M x M matrix")
        if self.model_ids is not None and (len(self.model_ids) != self.M or len(set(self.model_ids)) != self.M):
            raise ValueError("model_ids must hold M unique ids")
        return self

    @property
    def ids(self) -> List[str]:
        if self.model_ids is not None:
            return list(self.model_ids)
        return [f"model-{i:02d}" for i in range(self.M)]

    @property
    def image_ids(self) -> List[str]:
        return [f"img-{k:05d}" for k in range(self.N)]


class DiagonalZScore(BaseModel):
    diag: float
    col_mean: float
    col_std: float
    z: Optional[float] = Field(default=None, description="None when the column has zero variance")


class AuditReport(BaseModel):
    """
    Everything one audit run found, in a form that round-trips through JSON
    """

    setting: Setting
    generators: List[str]
    evaluators: List[str]
    phi: List[List[float]]
    counts: List[List[int]]
    phi_tilde: List[List[float]]
    degenerate_rows: List[str] = Field(default_factory=list)
    degenerate_columns: List[str] = Field(default_factory=list)
    philautia: Dict[str, float] = Field(default_factory=dict)
    zscores: Dict[str, DiagonalZScore] = Field(default_factory=dict)
    notes: List[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def check_keys(self):
        both = set(self.generators) & set(self.evaluators)
        for name, mapping in (("philautia", self.philautia), ("zscores", self.zscores)):
            stray = set(mapping) - both
            if stray:
                raise ValueError(f"{name} keyed by models not on both axes: {sorted(stray)}")
        return self
