"""
Run configuration: one JSON file per study, validated on load.

Unknown keys are rejected at every level. Secrets never live here; the config
only names the environment variable that holds them.
"""

import hashlib
import json
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

DEFAULT_SKIP_TRIGGERS = {
    "study_structure_created": False,
    "dataset_built": False,
    "model_trained": False,
    "user_embeddings_extracted": False,
    "users_clustered": False,
    "query_free_generated": False,
    "query_aware_generated": False,
    "creatives_filtered": False,
    "evaluation_completed": False,
}


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class WorkflowConfig(_Section):
    name: str
    description: str = ""
    seed: int = Field(default=0, ge=0)


class PathsConfig(_Section):
    output_directory: str
    raw_logs: Optional[str] = None
    dataset: Optional[str] = None
    ads: Optional[str] = None
    eval_dataset: Optional[str] = None


class TransformerDims(_Section):
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    max_positions: int = 128
    ffn_multiplier: int = 4

    @model_validator(mode="after")
    def _heads_divide_width(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        return self


class PredictorDims(_Section):
    n_layers: int = 2
    hidden_dim: int = 64


class ModelConfig(_Section):
    item_encoder: TransformerDims = Field(default_factory=lambda: TransformerDims(max_positions=65))
    user_encoder: TransformerDims = Field(default_factory=lambda: TransformerDims(max_positions=501))
    creative_decoder: TransformerDims = Field(default_factory=lambda: TransformerDims(d_model=128, max_positions=256))
    predictor: PredictorDims = Field(default_factory=PredictorDims)
    vocab_min_freq: int = 1
    vocab_max_size: Optional[int] = None
    init_std: float = 0.02


class LossWeights(_Section):
    cls: float = Field(default=1.0, ge=0.0)
    align: float = Field(default=1.0, ge=0.0)
    recon: float = Field(default=1.0, ge=0.0)
    temperature: float = Field(default=0.07, gt=0.0)


class TrainConfig(_Section):
    learning_rate: float = Field(default=2e-5, gt=0.0)
    epochs: int = Field(default=1, ge=1)
    max_steps: Optional[int] = Field(default=None, ge=1)
    batch_size: int = Field(default=8, ge=1)
    seed: int = Field(default=0, ge=0)
    max_history: int = Field(default=500, ge=1)
    max_item_tokens: int = Field(default=64, ge=1)
    max_ad_tokens: int = Field(default=96, ge=1)
    max_query_tokens: int = Field(default=16, ge=1)
    max_response_tokens: int = Field(default=32, ge=1)
    max_interest_tokens: int = Field(default=64, ge=1)
    loss_weights: LossWeights = Field(default_factory=LossWeights)
    n_neg: int = Field(default=1, ge=0)
    max_positives: int = Field(default=1, ge=1)
    share_decoder_weights: bool = True
    freeze_interest_extractor: bool = False
    log_disabled_losses: bool = False
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip_norm: float = Field(default=1.0, gt=0.0)
    dtype: Literal["float32", "float64"] = "float32"
    checkpoint_every: Optional[int] = Field(default=None, ge=1)
    include_selling_points: bool = True
    include_original_title: bool = True
    use_user_prefix: bool = True


class DecodeConfig(_Section):
    mode: Literal["greedy", "sampling"] = "greedy"
    temperature: float = Field(default=1.0, gt=0.0)
    seed: int = Field(default=0, ge=0)
    max_new_tokens: int = Field(default=32, ge=0)


class InferenceConfig(_Section):
    num_clusters: int = Field(default=256, ge=1)
    kmeans_max_iters: int = Field(default=100, ge=1)
    kmeans_init: Literal["random", "kmeans++"] = "random"
    topk_query_aware: int = Field(default=1, ge=1)
    topk_query_free: int = Field(default=5, ge=1)
    batch_size: int = Field(default=64, ge=1)
    workers: int = Field(default=1, ge=1)


class BadcaseConfig(_Section):
    min_chars: int = 2
    max_chars: int = 120
    location_lexicon: List[str] = Field(
        default_factory=lambda: ["beijing", "shanghai", "paris", "london", "new york", "tokyo"]
    )
    brand_lexicon: List[str] = Field(default_factory=lambda: ["apple", "nike", "gucci", "samsung", "adidas"])
    sensitive_terms: List[str] = Field(
        default_factory=lambda: ["best in the world", "guaranteed", "cure", "no. 1", "100% effective", "free money"]
    )


class LLMConfig(_Section):
    client: Literal["mock", "http"] = "mock"
    base_url: str = "https://api.openai.com/v1"
    model_name: str = "gpt-4.1"
    api_key_env: str = "CREATIVE_LLM_API_KEY"
    max_concurrency: int = Field(default=4, ge=1)
    max_retries: int = Field(default=3, ge=1)
    retry_delay: float = Field(default=1.0, ge=0.0)
    cot_mode: Literal["two_round", "single_round", "profile_only", "direct"] = "two_round"
    mock_pass_modulus: int = Field(default=4, ge=1)


class EvaluationConfig(_Section):
    eval_size: int = Field(default=500, ge=1)
    judge_max_concurrency: int = Field(default=4, ge=1)


class RunConfig(_Section):
    workflow: WorkflowConfig
    paths: PathsConfig
    model: ModelConfig = Field(default_factory=ModelConfig)
    training: TrainConfig = Field(default_factory=TrainConfig)
    inference: InferenceConfig = Field(default_factory=InferenceConfig)
    decoding: DecodeConfig = Field(default_factory=DecodeConfig)
    badcase: BadcaseConfig = Field(default_factory=BadcaseConfig)
    llm: LLMConfig = Field(default_factory=LLMConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    skip_triggers: Dict[str, bool] = Field(default_factory=dict, validate_default=True)

    @field_validator("skip_triggers")
    @classmethod
    def _merge_default_triggers(cls, triggers: Dict[str, bool]) -> Dict[str, bool]:
        merged = dict(DEFAULT_SKIP_TRIGGERS)
        merged.update(triggers)
        return merged

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with the global seed applied to every seeded section."""
        return self.model_copy(
            update={
                "workflow": self.workflow.model_copy(update={"seed": seed}),
                "training": self.training.model_copy(update={"seed": seed}),
                "decoding": self.decoding.model_copy(update={"seed": seed}),
            }
        )


def load_run_config(config_path: Union[str, Path]) -> RunConfig:
    """
    Load and validate a run configuration from a JSON file.

    Raises:
        FileNotFoundError: If the configuration file doesn't exist
        json.JSONDecodeError: If the file contains invalid JSON
        pydantic.ValidationError: On unknown keys or invalid values
    """
    with open(config_path, "r") as f:
        payload = json.load(f)
    return RunConfig.model_validate(payload)


def config_hash(config: RunConfig) -> str:
    """sha256 over the canonical dump, excluding stage-completion state."""
    payload = config.model_dump(mode="json", exclude={"skip_triggers"})
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]
