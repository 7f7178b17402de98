"""
Creative Generation Study Management

A configurable workflow over one study directory, providing:
- CoT dataset construction with an LLM teacher
- Joint training of the item/user/creative/predictor networks
- User embedding extraction, k-means clustering and pruned batch generation
- Badcase filtering into the creative library
- Offline GSB and hallucination evaluation

Each stage is idempotent and guarded by a skip trigger persisted in the
study's JSON config, so a study can be re-run from where it stopped.
"""

import json
import logging
import os
from pathlib import Path
from typing import Dict, Optional, Union

from creative_dp_utils.config import DEFAULT_SKIP_TRIGGERS, RunConfig, config_hash
from creative_dp_utils.workflow_manager_mixins import (
    skip_if_complete,
    CreativeInferenceManager,
    DatasetConstructionManager,
    EvaluationManager,
    LLMWorkflowManagerMixin,
    ModelTrainingManager,
)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

STUDY_DIRECTORIES = (
    "records", "checkpoints", "embeddings", "clusters", "plans", "candidates", "library", "reports",
)


def configure_logger(name: str) -> logging.Logger:
    """
    Logger ``creative.<name>`` plus the package loggers, to stderr.

    Level comes from CREATIVE_LOG_LEVEL (default INFO); CREATIVE_LOG_FILE adds a
    file handler. Handlers are attached at most once per destination.
    """
    logger = logging.getLogger(f"creative.{name}")
    package_logger = logging.getLogger("creative_dp_utils")
    level_name = os.getenv("CREATIVE_LOG_LEVEL", "INFO").upper()
    level = getattr(logging, level_name, logging.INFO)

    for target in (logger, package_logger):
        if not target.handlers:
            handler = logging.StreamHandler()
            handler.setFormatter(logging.Formatter(LOG_FORMAT))
            target.addHandler(handler)
        target.setLevel(level)

    log_file = os.getenv("CREATIVE_LOG_FILE")
    if log_file:
        abs_log_file = os.path.abspath(log_file)
        for target in (logger, package_logger):
            has_same_file_handler = any(
                isinstance(h, logging.FileHandler) and getattr(h, "baseFilename", None) == abs_log_file
                for h in target.handlers
            )
            if not has_same_file_handler:
                file_handler = logging.FileHandler(abs_log_file)
                file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
                target.addHandler(file_handler)
        logger.info(f"File logging enabled: {abs_log_file}")
    return logger


class CreativeWorkflowManager(
    DatasetConstructionManager,
    ModelTrainingManager,
    CreativeInferenceManager,
    EvaluationManager,
    LLMWorkflowManagerMixin,
):
    """
    A configurable class for managing a personalized creative generation study.

    Example:
        >>> manager = CreativeWorkflowManager('studies/example_search_ads/example_search_ads_config.json')
        >>> manager.create_workflow_structure()
        >>> manager.construct_dataset()
        >>> manager.train_model()
        >>> manager.extract_embeddings()
        >>> manager.cluster_users()
        >>> manager.run_query_free_generation()
        >>> manager.filter_creatives()
        >>> manager.evaluate_creatives()
    """

    def __init__(self, config_path: Union[str, Path], seed: Optional[int] = None, persist_triggers: bool = True):
        """
        Args:
            config_path: Path to the study's JSON run configuration
            seed: Overrides every seed in the configuration when given
            persist_triggers: When False, trigger changes stay in memory and the config file is never rewritten

        Raises:
            FileNotFoundError: If the configuration file doesn't exist
            json.JSONDecodeError: If the configuration file is invalid JSON
            pydantic.ValidationError: On unknown keys or invalid values
        """
        self.config_path = str(Path(config_path).resolve())
        self.persist_triggers = persist_triggers
        self._raw_config = self.load_raw_config(self.config_path)
        self.config = RunConfig.model_validate(self._raw_config)
        if seed is not None:
            self.config = self.config.with_seed(seed)
        self.workflow_name = self.config.workflow.name
        self.logger = configure_logger(self.workflow_name)

        output_directory = Path(self.config.paths.output_directory)
        if not output_directory.is_absolute():
            output_directory = Path(self.config_path).parent / output_directory
        self.workflow_path = output_directory

        self.logger.info(
            f"Loaded workflow {self.workflow_name} (config hash {self.config_hash}, seed {self.config.workflow.seed})"
        )
        super().__init__()

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def load_raw_config(self, config_path: str) -> Dict:
        """The config file as written, with default skip triggers filled in."""
        with open(config_path, "r") as f:
            raw = json.load(f)
        triggers = dict(DEFAULT_SKIP_TRIGGERS)
        triggers.update(raw.get("skip_triggers", {}))
        raw["skip_triggers"] = triggers
        return raw

    def resolve_path(self, path: Optional[Union[str, Path]]) -> Optional[Path]:
        """Config paths are relative to the config file's directory."""
        if path is None:
            return None
        path = Path(path)
        return path if path.is_absolute() else Path(self.config_path).parent / path

    def study_path(self, directory: str, filename: str) -> Path:
        return self.workflow_path / directory / filename

    def should_skip(self, trigger_name: str) -> bool:
        return self.config.skip_triggers.get(trigger_name, False)

    def set_skip_trigger(self, trigger_name: str, value: bool, save: bool = True):
        """
        Set a skip trigger value and optionally save it to the config file.

        Only the ``skip_triggers`` section of the file is rewritten; every other
        key keeps its original value.
        """
        self.config.skip_triggers[trigger_name] = value
        self._raw_config["skip_triggers"][trigger_name] = value
        if save and self.persist_triggers:
            with open(self.config_path, "w") as f:
                json.dump(self._raw_config, f, indent=4)

    def reset_all_triggers(self, save: bool = True):
        """Reset all skip triggers to False so every stage runs again."""
        for trigger_name in list(self.config.skip_triggers):
            self.config.skip_triggers[trigger_name] = False
            self._raw_config["skip_triggers"][trigger_name] = False
        if save and self.persist_triggers:
            with open(self.config_path, "w") as f:
                json.dump(self._raw_config, f, indent=4)

    @skip_if_complete("study_structure_created", return_value=True)
    def create_workflow_structure(self) -> bool:
        """
        Create the study output tree:
        records/, checkpoints/, embeddings/, clusters/, plans/, candidates/, library/, reports/

        Returns:
            True if structure creation completed successfully, False otherwise
        """
        try:
            for directory in (self.workflow_path, *(self.workflow_path / name for name in STUDY_DIRECTORIES)):
                directory.mkdir(parents=True, exist_ok=True)
            self.logger.info(f"Created study structure for {self.workflow_name} at {self.workflow_path}")
            self.set_skip_trigger("study_structure_created", True)
            return True
        except Exception as e:
            self.logger.error(f"Error creating workflow structure: {e}")
            return False

    def get_workflow_info(self) -> Dict:
        """Summary of the study configuration and stage state."""
        return {
            "workflow_name": self.workflow_name,
            "workflow_path": str(self.workflow_path),
            "config_hash": self.config_hash,
            "seed": self.config.workflow.seed,
            "llm_client": self.config.llm.client,
            "num_clusters": self.config.inference.num_clusters,
            "completed_stages": [name for name, done in self.config.skip_triggers.items() if done],
        }
