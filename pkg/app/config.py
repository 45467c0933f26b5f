import os
import json
import logging
from enum import Enum
from typing import List, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from app.errors import ConfigError
from app.utils import read_file, safe_file_operation

FINETUNE_PEAK_LR = 1e-4
FINETUNE_SMOOTHING = 0.1


class ReplacementPolicy(str, Enum):
    """Which target positions get corrupted for replaced token denoising."""

    MISCLASSIFIED = "misclassified"
    ALL_SAMPLED = "all_sampled"
    NONE = "none"


class DecoderChoice(str, Enum):
    GENERATOR = "generator"
    DISCRIMINATOR = "discriminator"


class FinetuneMode(str, Enum):
    G = "G"
    D = "D"
    GD = "G+D"


class TrainMode(str, Enum):
    PRETRAIN = "pretrain"
    FINETUNE = "finetune"


class Schedule(str, Enum):
    INVERSE_SQRT = "inverse_sqrt"
    CONSTANT = "constant"


class Strategy(str, Enum):
    GREEDY = "greedy"
    BEAM = "beam"


class ModelConfig(BaseModel):
    """Shape of the shared encoder and the two decoders."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    vocab_size: Optional[int] = Field(default=None, ge=2)
    d_model: int = Field(default=128, ge=1)
    ffn_dim: int = Field(default=512, ge=1)
    n_heads: int = Field(default=4, ge=1)
    enc_layers: int = Field(default=4, ge=0)
    gen_dec_layers: int = Field(default=4, ge=0)
    disc_dec_layers: int = Field(default=2, ge=0)
    max_positions: int = Field(default=256, ge=1)
    dropout: float = Field(default=0.1, ge=0.0, lt=1.0)
    tie_embeddings: bool = True
    layer_norm_eps: float = Field(default=1e-5, gt=0.0)
    init_std: float = Field(default=0.02, gt=0.0)

    @model_validator(mode="after")
    def _heads_divide_width(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        return self

    @property
    def head_dim(self):
        return self.d_model // self.n_heads


class ObjectiveOptions(BaseModel):
    """Knobs of the pre-training / fine-tuning losses."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    lambda_d: float = Field(default=10.0, ge=0.0)
    label_smoothing: float = Field(default=0.0, ge=0.0, lt=1.0)
    replacement_policy: ReplacementPolicy = ReplacementPolicy.MISCLASSIFIED
    denoise_decoder: DecoderChoice = DecoderChoice.GENERATOR
    use_denoising: bool = True
    threshold: float = Field(default=0.5, gt=0.0, lt=1.0)
    temperature: float = Field(default=1.0, gt=0.0)


class CorpusEntry(BaseModel):
    """One row of a multi-corpus manifest."""

    model_config = ConfigDict(extra="forbid")

    path: str
    language_tag: str = "en"


class TrainConfig(BaseModel):
    """Everything one training run needs; mirrored by the JSON config files."""

    model_config = ConfigDict(extra="forbid")

    mode: TrainMode = TrainMode.PRETRAIN
    finetune_mode: FinetuneMode = FinetuneMode.GD
    model: ModelConfig = Field(default_factory=ModelConfig)
    objective: ObjectiveOptions = Field(default_factory=ObjectiveOptions)

    peak_lr: float = Field(default=3e-4, gt=0.0)
    warmup_steps: int = Field(default=10000, ge=0)
    total_steps: int = Field(default=1000, ge=0)
    schedule: Schedule = Schedule.INVERSE_SQRT
    adam_beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(default=0.98, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-6, gt=0.0)
    clip_norm: Optional[float] = Field(default=1.0, gt=0.0)

    batch_rows: int = Field(default=32, ge=1)
    max_tokens: int = Field(default=4096, ge=1)
    seed: int = 1

    mask_ratio: float = Field(default=0.15, ge=0.0, lt=1.0)
    mean_span: float = Field(default=3.0, ge=1.0)
    max_span: int = Field(default=10, ge=1)
    min_freq: int = Field(default=1, ge=1)
    max_vocab: Optional[int] = Field(default=None, ge=5)

    corpora: List[CorpusEntry] = Field(default_factory=list)
    src_file: Optional[str] = None
    trg_file: Optional[str] = None
    init_checkpoint: Optional[str] = None

    checkpoint_every: int = Field(default=1000, ge=1)
    log_every: int = Field(default=50, ge=1)

    @field_validator("corpora")
    @classmethod
    def _unique_paths(cls, corpora):
        paths = [entry.path for entry in corpora]
        if len(set(paths)) != len(paths):
            raise ValueError("corpus manifest lists the same path twice")
        return corpora

    @model_validator(mode="after")
    def _mode_requirements(self):
        if self.mean_span > self.max_span:
            raise ValueError(f"mean_span {self.mean_span} exceeds max_span {self.max_span}")
        if self.mode == TrainMode.PRETRAIN and self.objective.lambda_d <= 0.0:
            raise ValueError("pre-training needs a positive discriminator weight lambda_d")
        if self.mode == TrainMode.FINETUNE:
            # fine-tuning recipe: lr 1e-4, label smoothing 0.1, unless stated
            if "peak_lr" not in self.model_fields_set:
                self.peak_lr = FINETUNE_PEAK_LR
            if "objective" not in self.model_fields_set:
                self.objective = self.objective.model_copy(update={"label_smoothing": FINETUNE_SMOOTHING})
        return self


class DecodeConfig(BaseModel):
    """Generator-only decoding settings; greedy is beam search with one beam."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    strategy: Strategy = Strategy.BEAM
    beam_size: int = Field(default=4, ge=1)
    max_len: int = Field(default=64, ge=1)
    length_penalty: float = Field(default=1.0, ge=0.0)
    decoder: DecoderChoice = DecoderChoice.GENERATOR

    @model_validator(mode="before")
    @classmethod
    def _greedy_is_one_beam(cls, data):
        if isinstance(data, dict) and Strategy(data.get("strategy", Strategy.BEAM)) == Strategy.GREEDY:
            data = {**data, "beam_size": 1}
        return data


def _validated(model_cls, payload, source):
    try:
        return model_cls.model_validate(payload)
    except ValidationError as e:
        logging.error(f"Invalid configuration in {source}: {e}")
        raise ConfigError(f"invalid configuration in {source}: {e}") from e


@safe_file_operation
def load_train_config(path, **overrides):
    """
    Reads a JSON training config and validates it.

    Args:
        path (str): Path to the JSON file.
        **overrides: Top-level fields replacing what the file says (e.g. seed from the CLI).

    Returns:
        TrainConfig: The validated configuration.
    """
    try:
        payload = json.loads(read_file(path))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e
    if not isinstance(payload, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    payload.update({k: v for k, v in overrides.items() if v is not None})
    return _validated(TrainConfig, payload, path)


@safe_file_operation
def load_corpus_manifest(path):
    """
    Reads a multi-corpus manifest: a JSON list of {path, language_tag}.

    Relative corpus paths are resolved against the manifest's directory.
    """
    try:
        payload = json.loads(read_file(path))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e
    if not isinstance(payload, list) or not payload:
        raise ConfigError(f"{path} must hold a non-empty JSON list")
    base = os.path.dirname(os.path.abspath(path))
    entries = [_validated(CorpusEntry, row, path) for row in payload]
    return [
        entry.model_copy(update={"path": entry.path if os.path.isabs(entry.path) else os.path.join(base, entry.path)})
        for entry in entries
    ]


def load_environment():
    """
    Loads `.env` and returns the process-level settings.

    Returns:
        dict: log_dir, log_max_age_days and checked (non-finite checks in every op).
    """
    load_dotenv()
    return {
        "log_dir": os.getenv("GANLM_LOG_DIR", "./logs"),
        "log_max_age_days": int(os.getenv("LOG_MAX_AGE_DAYS", "30")),
        "checked": os.getenv("GANLM_CHECKED", "0").lower() in ("1", "true", "yes"),
    }


def _experiment_model():
    return ModelConfig(
        d_model=32, ffn_dim=64, n_heads=2, enc_layers=2, gen_dec_layers=2, disc_dec_layers=1,
        max_positions=64, dropout=0.0,
    )


class ExperimentConfig(BaseModel):
    """Sizes of the desk-scale experiments; every run repeats over `seeds`."""

    model_config = ConfigDict(extra="forbid")

    seeds: List[int] = Field(default_factory=lambda: [1, 2, 3, 4, 5], min_length=1)
    model: ModelConfig = Field(default_factory=_experiment_model)
    pretrain_steps: int = Field(default=300, ge=0)
    finetune_steps: int = Field(default=200, ge=0)
    corpus_sentences: int = Field(default=256, ge=1)
    train_pairs: int = Field(default=128, ge=2)
    test_pairs: int = Field(default=32, ge=1)
    peak_lr: float = Field(default=1e-3, gt=0.0)
    warmup_steps: int = Field(default=50, ge=0)
    batch_rows: int = Field(default=16, ge=1)
    lambda_values: List[float] = Field(default_factory=lambda: [5.0, 10.0, 20.0, 50.0, 100.0], min_length=1)
    disc_layers: List[int] = Field(default_factory=lambda: [1, 2, 4], min_length=1)


@safe_file_operation
def load_experiment_config(path=None, **overrides):
    """ExperimentConfig from a JSON file (or the defaults when path is None)."""
    payload = {}
    if path:
        try:
            payload = json.loads(read_file(path))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path} is not valid JSON: {e}") from e
    payload.update({k: v for k, v in overrides.items() if v is not None})
    return _validated(ExperimentConfig, payload, path or "experiment defaults")
