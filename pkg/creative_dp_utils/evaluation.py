"""
Offline evaluation: dual-order GSB judging, the advantage score, hallucination
pass rate and the ablation report tables.

GSB protocol: the judge sees (A, B) and then (B, A). A verdict counts as Good
or Bad only when both orders agree on the same title; otherwise it is Same.
advantage = (good - bad) / (good + same + bad).
"""

import asyncio
import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, ConfigDict

from creative_dp_utils.config import LLMConfig, RunConfig
from creative_dp_utils.creative import generate_title
from creative_dp_utils.datamodel import Ad, DatasetRecord
from creative_dp_utils.inference import (
    NO_CLUSTERING,
    extract_user_embeddings,
    identity_clustering,
    kmeans,
    users_from_records,
)
from creative_dp_utils.llm.llm_client import BaseLLMClient, ClientCallError
from creative_dp_utils.llm.llm_pipeline import RetryPolicy, hallucination_filter, judge_pair
from creative_dp_utils.modeling import HierarchicalCreativeModel
from creative_dp_utils.training import Checkpoint, train

logger = logging.getLogger(__name__)

DEFAULT_K_VALUES = (8, 16, 32, 64, 128, 256)


class GSBVerdict(str, Enum):
    GOOD = "Good"
    SAME = "Same"
    BAD = "Bad"


@dataclass(frozen=True)
class GSBCounts:
    """Good/Same/Bad tallies; fractional values (per-hundred shares) are accepted."""

    n_good: float = 0
    n_same: float = 0
    n_bad: float = 0

    def __post_init__(self):
        if min(self.n_good, self.n_same, self.n_bad) < 0:
            raise ValueError("GSB counts must be nonnegative")

    @classmethod
    def from_verdicts(cls, verdicts: Iterable[GSBVerdict]) -> "GSBCounts":
        verdicts = [GSBVerdict(v) for v in verdicts]
        return cls(
            n_good=sum(v == GSBVerdict.GOOD for v in verdicts),
            n_same=sum(v == GSBVerdict.SAME for v in verdicts),
            n_bad=sum(v == GSBVerdict.BAD for v in verdicts),
        )

    @property
    def total(self) -> float:
        return self.n_good + self.n_same + self.n_bad

    def swapped(self) -> "GSBCounts":
        return GSBCounts(n_good=self.n_bad, n_same=self.n_same, n_bad=self.n_good)

    def percentages(self) -> Tuple[float, float, float]:
        if self.total <= 0:
            raise ValueError("no GSB judgments to express as percentages")
        return (self.n_good / self.total, self.n_same / self.total, self.n_bad / self.total)


def advantage(counts: GSBCounts) -> float:
    """(good - bad) / total, in [-1, 1]."""
    if counts.total <= 0:
        raise ValueError("advantage is undefined for zero judgments")
    return (counts.n_good - counts.n_bad) / counts.total


def format_percent(value: float) -> str:
    """0.436 -> '43.6%'."""
    return f"{value * 100:.1f}%"


def combine_orders(first: str, second: str) -> GSBVerdict:
    """
    Merge the (A, B) answer and the (B, A) answer into one verdict for A.

    Each answer names the slot it prefers: 'A' (first shown), 'B' or 'Same'.
    """
    if first == "A" and second == "B":
        return GSBVerdict.GOOD
    if first == "B" and second == "A":
        return GSBVerdict.BAD
    return GSBVerdict.SAME


class JudgeContext(BaseModel):
    """What the judge sees about the user and the ad."""

    model_config = ConfigDict(frozen=True)

    interests: str
    ad: Ad

    @classmethod
    def from_record(cls, record: DatasetRecord) -> "JudgeContext":
        return cls(interests=record.interest_text, ad=record.ad)


async def gsb_judge(title_a: str, title_b: str, context: JudgeContext, judge_client: BaseLLMClient,
                    policy: Optional[RetryPolicy] = None) -> GSBVerdict:
    """Verdict for ``title_a`` against ``title_b`` under the dual-order protocol."""
    if not title_a.strip() or not title_b.strip():
        raise ValueError("GSB judging needs two non-empty titles")
    first = await judge_pair(title_a, title_b, context.interests, context.ad, judge_client, policy=policy)
    second = await judge_pair(title_b, title_a, context.interests, context.ad, judge_client, policy=policy)
    return combine_orders(first, second)


async def evaluate_gsb(titles_a: Sequence[str], titles_b: Sequence[str], contexts: Sequence[JudgeContext],
                       judge_client: BaseLLMClient, max_concurrency: int = 4,
                       policy: Optional[RetryPolicy] = None) -> Tuple[GSBCounts, List[GSBVerdict]]:
    """Judge aligned title lists; verdicts come back in input order."""
    if not len(titles_a) == len(titles_b) == len(contexts):
        raise ValueError("titles_a, titles_b and contexts must have the same length")
    semaphore = asyncio.Semaphore(max_concurrency)

    async def one(a: str, b: str, context: JudgeContext) -> GSBVerdict:
        async with semaphore:
            return await gsb_judge(a, b, context, judge_client, policy)

    verdicts = await asyncio.gather(*(one(a, b, c) for a, b, c in zip(titles_a, titles_b, contexts)))
    return GSBCounts.from_verdicts(verdicts), list(verdicts)


class PassRateReport(BaseModel):
    passed: int
    evaluated: int
    errors: int
    pass_rate: float


async def hallucination_pass_rate(titles_with_ads: Sequence[Tuple[str, Ad]], client: BaseLLMClient,
                                  max_concurrency: int = 4, policy: Optional[RetryPolicy] = None) -> PassRateReport:
    """
    Share of titles the hallucination checker passes. Titles whose check keeps
    failing are excluded from the rate and counted in ``errors``.
    """
    if not titles_with_ads:
        raise ValueError("pass rate needs at least one title")
    semaphore = asyncio.Semaphore(max_concurrency)

    async def one(title: str, ad: Ad) -> Optional[bool]:
        async with semaphore:
            try:
                return (await hallucination_filter(title, ad, client, policy=policy)).passed
            except (ClientCallError, ValueError) as e:
                logger.warning(f"Hallucination check for ad {ad.ad_id} excluded: {e}")
                return None

    results = await asyncio.gather(*(one(title, ad) for title, ad in titles_with_ads))
    evaluated = [r for r in results if r is not None]
    errors = len(results) - len(evaluated)
    if not evaluated:
        raise ValueError(f"all {errors} hallucination checks failed")
    passed = sum(evaluated)
    return PassRateReport(passed=passed, evaluated=len(evaluated), errors=errors, pass_rate=passed / len(evaluated))


# ---------------------------------------------------------------------------
# Ablation reports
# ---------------------------------------------------------------------------

class AblationSpec(BaseModel):
    """One row of an ablation grid: a loss-toggle setting or a cluster count."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str
    align: bool = True
    cls: bool = True
    recon: bool = True
    k: Optional[Union[int, str]] = None

    def run_config(self, base: RunConfig) -> RunConfig:
        weights = base.training.loss_weights.model_copy(update={
            "align": base.training.loss_weights.align if self.align else 0.0,
            "cls": base.training.loss_weights.cls if self.cls else 0.0,
            "recon": base.training.loss_weights.recon if self.recon else 0.0,
        })
        return base.model_copy(update={"training": base.training.model_copy(update={"loss_weights": weights})})


class AblationRow(BaseModel):
    name: str
    align: bool
    cls: bool
    recon: bool
    k: Optional[str] = None
    status: str = "ok"
    note: str = ""
    n_good: int = 0
    n_same: int = 0
    n_bad: int = 0
    advantage: Optional[float] = None


def aux_loss_grid() -> List[AblationSpec]:
    """No aux loss, each one alone, align+cls, all three."""
    toggles = [
        (False, False, False), (True, False, False), (False, True, False),
        (False, False, True), (True, True, False), (True, True, True),
    ]
    specs = []
    for align, cls, recon in toggles:
        enabled = [name for name, on in (("align", align), ("cls", cls), ("recon", recon)) if on]
        specs.append(AblationSpec(name="+".join(enabled) or "none", align=align, cls=cls, recon=recon))
    return specs


def cluster_grid(k_values: Sequence[int] = DEFAULT_K_VALUES, include_unclustered: bool = True) -> List[AblationSpec]:
    specs = [AblationSpec(name=f"kmeans-{k}", k=k) for k in k_values]
    if include_unclustered:
        specs.append(AblationSpec(name=f"kmeans-{NO_CLUSTERING}", k=NO_CLUSTERING))
    return specs


def load_grid(path: Union[str, Path]) -> List[AblationSpec]:
    """Grid file: a JSON list of rows, or {"grid": "aux_loss" | "clusters"} for the built-in grids."""
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    if isinstance(payload, dict):
        builders = {"aux_loss": aux_loss_grid, "clusters": cluster_grid}
        if payload.get("grid") not in builders:
            raise ValueError(f"unknown built-in grid {payload.get('grid')!r}, expected one of {tuple(builders)}")
        return builders[payload["grid"]]()
    return [AblationSpec.model_validate(row) for row in payload]


def group_centers_for_users(model: HierarchicalCreativeModel, records: Sequence[DatasetRecord],
                            k: Optional[Union[int, str]], seed: int, max_iters: int,
                            population: Optional[Sequence[DatasetRecord]] = None) -> Tuple[Dict[str, np.ndarray], str]:
    """
    U used for each evaluated user: the center of its k-means cluster over
    ``population`` (defaults to ``records``), or its own U when k is None or inf.
    K above the number of users is clamped and reported in the note.
    """
    users = users_from_records(list(population or []) + list(records))
    embeddings = extract_user_embeddings(users, model)
    note = ""
    if k is None or str(k) == NO_CLUSTERING:
        clusters = identity_clustering(embeddings.vectors, embeddings.user_ids)
    else:
        k_eff = min(int(k), len(embeddings.user_ids))
        if k_eff != int(k):
            note = f"k clamped from {k} to {k_eff} users"
            logger.warning(note)
        clusters = kmeans(embeddings.vectors, k_eff, max_iters=max_iters, seed=seed, user_ids=embeddings.user_ids)
    return {user_id: clusters.centers[cluster] for user_id, cluster in clusters.assignment.items()}, note


@torch.no_grad()
def generate_for_records(model: HierarchicalCreativeModel, records: Sequence[DatasetRecord],
                         user_vectors: Mapping[str, np.ndarray], config: RunConfig) -> List[str]:
    """One title per record from the given per-user U, with the record's query."""
    model.eval()
    titles = []
    for record in records:
        user = torch.as_tensor(user_vectors[record.user_id], dtype=model.dtype, device=model.device)
        prompt = model.build_prompt(user, record.ad, record.ad.query)
        titles.append(generate_title(prompt, model.creative, model.vocab, config.decoding,
                                     use_user_prefix=config.training.use_user_prefix))
    return titles


def run_ablation_report(grid: Sequence[AblationSpec], train_records: Sequence[DatasetRecord],
                        eval_records: Sequence[DatasetRecord], judge_client: BaseLLMClient, config: RunConfig,
                        checkpoints: Optional[Mapping[str, Checkpoint]] = None, base_checkpoint: Optional[Checkpoint] = None,
                        train_missing: bool = False, baseline_titles: Optional[Sequence[str]] = None) -> List[AblationRow]:
    """
    One row per grid entry, in grid order: the row's titles judged against the
    baseline titles (default: each ad's original title).

    Loss-toggle rows use ``checkpoints[name]``; cluster rows use ``base_checkpoint``.
    A missing checkpoint trains one when ``train_missing`` is set, otherwise the
    row is marked skipped.
    """
    checkpoints = dict(checkpoints or {})
    baseline = list(baseline_titles) if baseline_titles is not None else [r.ad.original_title for r in eval_records]
    contexts = [JudgeContext.from_record(r) for r in eval_records]
    llm_cfg: LLMConfig = config.llm
    policy = RetryPolicy(max_retries=llm_cfg.max_retries, retry_delay=llm_cfg.retry_delay)
    rows = []
    for spec in grid:
        row = AblationRow(name=spec.name, align=spec.align, cls=spec.cls, recon=spec.recon,
                          k=None if spec.k is None else str(spec.k))
        ckpt = base_checkpoint if spec.k is not None else checkpoints.get(spec.name)
        if ckpt is None and train_missing:
            logger.info(f"Training checkpoint for ablation row {spec.name}")
            ckpt = train(train_records, spec.run_config(config))
            if spec.k is None:
                checkpoints[spec.name] = ckpt
            else:
                base_checkpoint = ckpt
        if ckpt is None:
            row.status, row.note = "skipped", "no trained checkpoint"
            rows.append(row)
            continue

        model = ckpt.build_model()
        user_vectors, row.note = group_centers_for_users(
            model, eval_records, spec.k, seed=config.workflow.seed,
            max_iters=config.inference.kmeans_max_iters, population=train_records,
        )
        titles = generate_for_records(model, eval_records, user_vectors, ckpt.config)
        titles = [title if title.strip() else r.ad.original_title for title, r in zip(titles, eval_records)]
        counts, _ = asyncio.run(evaluate_gsb(titles, baseline, contexts, judge_client,
                                             config.evaluation.judge_max_concurrency, policy))
        row.n_good, row.n_same, row.n_bad = int(counts.n_good), int(counts.n_same), int(counts.n_bad)
        row.advantage = advantage(counts) if counts.total else None
        rows.append(row)
    return rows


def report_frame(rows: Sequence[AblationRow]) -> pd.DataFrame:
    frame = pd.DataFrame([row.model_dump() for row in rows])
    if frame.empty:
        return frame
    totals = frame[["n_good", "n_same", "n_bad"]].sum(axis=1).replace(0, np.nan)
    for column, label in (("n_good", "Good"), ("n_same", "Same"), ("n_bad", "Bad")):
        frame[label] = (frame[column] / totals).map(lambda v: format_percent(v) if pd.notna(v) else "-")
    frame["Advantage"] = frame["advantage"].map(lambda v: format_percent(v) if pd.notna(v) else "-")
    return frame


def render_table(rows: Sequence[AblationRow]) -> str:
    frame = report_frame(rows)
    if frame.empty:
        return "(no rows)"
    columns = ["name", "align", "cls", "recon", "k", "status", "Good", "Same", "Bad", "Advantage", "note"]
    return frame[columns].to_string(index=False)


def read_titles(path: Union[str, Path]) -> List[str]:
    """One title per line; JSON-object lines contribute their "title" field."""
    titles = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("{"):
                try:
                    titles.append(str(json.loads(line)["title"]))
                except (json.JSONDecodeError, KeyError) as e:
                    raise ValueError(f"line {line_number} of {path} has no readable title: {e}") from e
            else:
                titles.append(line)
    return titles


def write_report(rows: Sequence[BaseModel], jsonl_path: Union[str, Path], table: Optional[str] = None,
                 table_path: Optional[Union[str, Path]] = None) -> None:
    jsonl_path = Path(jsonl_path)
    jsonl_path.parent.mkdir(parents=True, exist_ok=True)
    with open(jsonl_path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row.model_dump(mode="json"), ensure_ascii=False) + "\n")
    if table is not None and table_path is not None:
        Path(table_path).write_text(table + "\n", encoding="utf-8")
