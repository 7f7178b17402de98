"""
CoT-driven construction of the personalized-title dataset.

Per raw log row: profile interests -> generate the title -> hallucination
filter. Rows run concurrently under a semaphore; output order always follows
input order. A row whose stage raises is quarantined, never the whole batch.
"""

import asyncio
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd
from pydantic import BaseModel, Field
from tqdm.asyncio import tqdm_asyncio

from creative_dp_utils.config import LLMConfig
from creative_dp_utils.datamodel import DatasetRecord, RawLogRow
from creative_dp_utils.llm.llm_client import BaseLLMClient
from creative_dp_utils.llm.llm_conversation_manager import ConversationManager
from creative_dp_utils.llm.llm_pipeline import (
    COT_TEMPLATES,
    RetryPolicy,
    generate_personalized_title,
    hallucination_filter,
    profile_user_interests,
)
from creative_dp_utils.llm.prompt_templates import (
    HALLUCINATION_FILTER,
    INTEREST_PROFILING,
    PromptTemplate,
    load_templates,
)

logger = logging.getLogger(__name__)

STAGES = ("profile", "generate", "filter")


@dataclass
class RowOutcome:
    index: int
    row: RawLogRow
    record: Optional[DatasetRecord] = None
    stage: Optional[str] = None
    status: str = "kept"  # kept | filtered | error
    reason: Optional[str] = None


class DatasetStats(BaseModel):
    input_rows: int = 0
    output_rows: int = 0
    retention: float = 0.0
    errors_by_stage: Dict[str, int] = Field(default_factory=lambda: {stage: 0 for stage in STAGES})
    filtered_out: int = 0
    cot_mode: str = "two_round"
    teacher_model: str = ""
    template_hashes: Dict[str, str] = Field(default_factory=dict)


async def process_row(index: int, row: RawLogRow, client: BaseLLMClient, llm_cfg: LLMConfig,
                      templates: Dict[str, PromptTemplate]) -> RowOutcome:
    """Profile, generate and filter one row; exceptions become an error outcome for that stage."""
    policy = RetryPolicy(max_retries=llm_cfg.max_retries, retry_delay=llm_cfg.retry_delay)
    outcome = RowOutcome(index=index, row=row)
    query = row.ad.query
    conversation = ConversationManager("data_construction")
    try:
        outcome.stage = "profile"
        interests = await profile_user_interests(row.history, query, client, conversation,
                                                 templates[INTEREST_PROFILING], policy)
        interests = " ".join(interests.split())
        if not interests:
            raise ValueError("teacher returned an empty interest profile")

        outcome.stage = "generate"
        result = await generate_personalized_title(
            row.history, interests, row.ad, query, client, conversation,
            cot_mode=llm_cfg.cot_mode, template=templates[COT_TEMPLATES[llm_cfg.cot_mode]], policy=policy,
        )

        outcome.stage = "filter"
        verdict = await hallucination_filter(result.title, row.ad, client, templates[HALLUCINATION_FILTER], policy)
    except Exception as e:
        outcome.status = "error"
        outcome.reason = f"{type(e).__name__}: {e}"
        logger.warning(f"Row {index} (user {row.user_id}) quarantined at {outcome.stage}: {outcome.reason}")
        return outcome

    if not verdict.passed:
        outcome.status = "filtered"
        outcome.reason = verdict.reason
        return outcome
    outcome.record = DatasetRecord(
        user_id=row.user_id, history=row.history, ad=row.ad, interest_text=interests,
        response=result.title, click_labels=row.click_labels,
    )
    return outcome


def summarize(outcomes: Sequence[RowOutcome], llm_cfg: LLMConfig, teacher_model: str,
              templates: Dict[str, PromptTemplate]) -> DatasetStats:
    stats = DatasetStats(
        input_rows=len(outcomes), cot_mode=llm_cfg.cot_mode, teacher_model=teacher_model,
        template_hashes={name: template.sha256 for name, template in sorted(templates.items())},
    )
    if not outcomes:
        return stats
    frame = pd.DataFrame([{"status": o.status, "stage": o.stage} for o in outcomes])
    errors = frame[frame["status"] == "error"]["stage"].value_counts()
    stats.errors_by_stage = {stage: int(errors.get(stage, 0)) for stage in STAGES}
    stats.filtered_out = int((frame["status"] == "filtered").sum())
    stats.output_rows = int((frame["status"] == "kept").sum())
    stats.retention = stats.output_rows / stats.input_rows
    return stats


def write_quarantine(outcomes: Sequence[RowOutcome], path: Union[str, Path]) -> int:
    """Failed rows (stage + reason) as JSON lines; returns how many were written."""
    rows = [
        {"row_index": o.index, "user_id": o.row.user_id, "ad_id": o.row.ad.ad_id, "stage": o.stage, "reason": o.reason}
        for o in outcomes if o.status == "error"
    ]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if rows:
        pd.DataFrame(rows).to_json(path, orient="records", lines=True, force_ascii=False)
    else:
        path.write_text("", encoding="utf-8")
    return len(rows)


async def abuild_dataset(raw_logs: Sequence[RawLogRow], client: BaseLLMClient, llm_cfg: Optional[LLMConfig] = None,
                         templates: Optional[Dict[str, PromptTemplate]] = None,
                         quarantine_path: Optional[Union[str, Path]] = None,
                         show_progress: bool = False) -> Tuple[List[DatasetRecord], DatasetStats]:
    llm_cfg = llm_cfg or LLMConfig()
    templates = templates or load_templates()
    semaphore = asyncio.Semaphore(llm_cfg.max_concurrency)

    async def bounded(index: int, row: RawLogRow) -> RowOutcome:
        async with semaphore:
            return await process_row(index, row, client, llm_cfg, templates)

    tasks = [bounded(i, row) for i, row in enumerate(raw_logs)]
    outcomes = await tqdm_asyncio.gather(*tasks, desc="Constructing dataset", disable=not show_progress)
    outcomes = sorted(outcomes, key=lambda o: o.index)

    stats = summarize(outcomes, llm_cfg, getattr(client, "model_name", "unknown"), templates)
    if quarantine_path is not None:
        write_quarantine(outcomes, quarantine_path)
    logger.info(
        f"Dataset construction: {stats.input_rows} rows in, {stats.output_rows} kept "
        f"(retention {stats.retention:.3f}), {stats.filtered_out} filtered, errors {stats.errors_by_stage}"
    )
    return [o.record for o in outcomes if o.record is not None], stats


def build_dataset(raw_logs: Sequence[RawLogRow], client: BaseLLMClient, llm_cfg: Optional[LLMConfig] = None,
                  templates: Optional[Dict[str, PromptTemplate]] = None,
                  quarantine_path: Optional[Union[str, Path]] = None,
                  show_progress: bool = False) -> Tuple[List[DatasetRecord], DatasetStats]:
    """
    Run the three-stage pipeline over ``raw_logs``.

    Returns:
        (records that passed every stage, in input order; stage statistics)
    """
    return asyncio.run(abuild_dataset(raw_logs, client, llm_cfg, templates, quarantine_path, show_progress))
