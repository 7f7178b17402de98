"""
Deployment-side generation workflow.

1. extract user embeddings with the trained encoders
2. k-means the embeddings into K user groups
3. score every group center against each ad with the Item-User Predictor
4. keep the top-k groups (1 for query-aware, 5 for query-free)
5. decode one title per (ad, group[, query]) from the group center U_k
6. run the badcase filter and store passing titles in the creative library
"""

import hashlib
import json
import logging
import os
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator
from tqdm import tqdm

from creative_dp_utils.config import BadcaseConfig, DecodeConfig, InferenceConfig
from creative_dp_utils.creative import generate_title
from creative_dp_utils.datamodel import (
    Ad,
    CreativeCandidate,
    DatasetRecord,
    FilterVerdict,
    GenerationMode,
    Item,
    parse_line,
    write_jsonl,
)
from creative_dp_utils.modeling import HierarchicalCreativeModel
from creative_dp_utils.objectives import predict_click

logger = logging.getLogger(__name__)

NO_CLUSTERING = "inf"


# ---------------------------------------------------------------------------
# User embeddings
# ---------------------------------------------------------------------------

@dataclass
class UserEmbeddings:
    user_ids: List[str]
    vectors: np.ndarray
    skipped: int = 0

    def save(self, path: Union[str, Path]) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        np.savez(path, user_ids=np.array(self.user_ids, dtype=str), vectors=self.vectors)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "UserEmbeddings":
        with np.load(path, allow_pickle=False) as archive:
            return cls(user_ids=[str(u) for u in archive["user_ids"]], vectors=archive["vectors"])

    def as_dict(self) -> Dict[str, np.ndarray]:
        return dict(zip(self.user_ids, self.vectors))


def users_from_records(records: Iterable[DatasetRecord]) -> Dict[str, List[Item]]:
    """First-seen history per user id."""
    users: Dict[str, List[Item]] = {}
    for record in records:
        users.setdefault(record.user_id, list(record.history))
    return users


@torch.no_grad()
def extract_user_embeddings(users: Mapping[str, Sequence[Item]], model: HierarchicalCreativeModel,
                            batch_size: int = 64, show_progress: bool = False) -> UserEmbeddings:
    """
    U for every user, in input order. Users with an empty history are skipped
    and counted in ``skipped``.
    """
    model.eval()
    kept = [(user_id, history) for user_id, history in users.items() if len(history) > 0]
    skipped = len(users) - len(kept)
    if skipped:
        logger.warning(f"Skipped {skipped} users with empty histories")

    vectors = []
    batches = range(0, len(kept), batch_size)
    for start in tqdm(batches, desc="Embedding users", disable=not show_progress):
        chunk = kept[start: start + batch_size]
        vectors.append(model.user_embeddings([history for _, history in chunk]).double().cpu().numpy())
    d_model = model.user_encoder.d_model
    matrix = np.concatenate(vectors) if vectors else np.zeros((0, d_model))
    return UserEmbeddings(user_ids=[user_id for user_id, _ in kept], vectors=matrix, skipped=skipped)


# ---------------------------------------------------------------------------
# Clustering
# ---------------------------------------------------------------------------

def squared_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """
    (N, D), (K, D) -> (N, K) squared Euclidean distances.

    Expanded as |p|^2 - 2 p.c + |c|^2 so memory stays O(N K); rounding
    negatives are clipped to 0.
    """
    distances = (points ** 2).sum(axis=1)[:, None] - 2.0 * points @ centers.T + (centers ** 2).sum(axis=1)[None, :]
    return np.maximum(distances, 0.0, out=distances)


@dataclass
class ClusterModel:
    centers: np.ndarray
    assignment: Dict[str, int]
    inertia: float
    inertia_history: List[float] = field(default_factory=list)
    n_iter: int = 0
    clustered: bool = True

    @property
    def k(self) -> int:
        return int(self.centers.shape[0])

    def assign(self, points: np.ndarray) -> np.ndarray:
        """Nearest center per point; ties go to the smaller cluster id."""
        return squared_distances(np.asarray(points, dtype=np.float64), self.centers).argmin(axis=1)

    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(np.fromiter(self.assignment.values(), dtype=int), minlength=self.k)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        user_ids = list(self.assignment)
        np.savez(
            path,
            centers=self.centers,
            user_ids=np.array(user_ids, dtype=str),
            labels=np.array([self.assignment[u] for u in user_ids], dtype=np.int64),
            inertia_history=np.array(self.inertia_history, dtype=np.float64),
            meta=np.array([self.inertia, self.n_iter, int(self.clustered)], dtype=np.float64),
        )

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ClusterModel":
        with np.load(path, allow_pickle=False) as archive:
            inertia, n_iter, clustered = archive["meta"]
            return cls(
                centers=archive["centers"],
                assignment={str(u): int(c) for u, c in zip(archive["user_ids"], archive["labels"])},
                inertia=float(inertia),
                inertia_history=[float(v) for v in archive["inertia_history"]],
                n_iter=int(n_iter),
                clustered=bool(clustered),
            )


def _init_centers(points: np.ndarray, k: int, rng: np.random.Generator, init: str) -> np.ndarray:
    n = points.shape[0]
    if init == "random":
        return points[rng.choice(n, size=k, replace=False)].copy()
    if init != "kmeans++":
        raise ValueError(f"unknown kmeans init '{init}'")
    chosen = [int(rng.integers(n))]
    closest = squared_distances(points, points[chosen]).min(axis=1)
    while len(chosen) < k:
        total = closest.sum()
        if total > 0:
            candidate = int(rng.choice(n, p=closest / total))
        else:
            remaining = np.setdiff1d(np.arange(n), chosen)
            candidate = int(rng.choice(remaining))
        chosen.append(candidate)
        closest = np.minimum(closest, squared_distances(points, points[[candidate]])[:, 0])
    return points[chosen].copy()


def kmeans(embeddings: np.ndarray, k: int, max_iters: int = 100, seed: int = 0, init: str = "random",
           user_ids: Optional[Sequence[str]] = None) -> ClusterModel:
    """
    Lloyd's algorithm from seeded initial centers.

    Stops at an assignment fixpoint or after ``max_iters`` updates. An empty
    cluster's center is moved onto the point farthest from its own center.

    Raises:
        ValueError: k < 1 or k larger than the number of points
    """
    points = np.asarray(embeddings, dtype=np.float64)
    n = points.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"k must be in [1, {n}] for {n} points, got {k}")
    user_ids = list(user_ids) if user_ids is not None else [str(i) for i in range(n)]
    rng = np.random.default_rng(seed)
    centers = _init_centers(points, k, rng, init)

    previous = None
    history: List[float] = []
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        distances = squared_distances(points, centers)
        labels = distances.argmin(axis=1)
        history.append(float(distances[np.arange(n), labels].sum()))
        if previous is not None and np.array_equal(labels, previous):
            break
        previous = labels.copy()

        for cluster in range(k):
            members = points[labels == cluster]
            if len(members):
                centers[cluster] = members.mean(axis=0)
        counts = np.bincount(labels, minlength=k)
        for cluster in np.flatnonzero(counts == 0):
            own = ((points - centers[labels]) ** 2).sum(axis=1)
            farthest = int(own.argmax())
            centers[cluster] = points[farthest]
            labels[farthest] = cluster

    distances = squared_distances(points, centers)
    labels = distances.argmin(axis=1)
    inertia = float(distances[np.arange(n), labels].sum())
    if inertia < history[-1]:
        history.append(inertia)
    logger.info(f"kmeans: k={k}, n={n}, iterations={n_iter}, inertia={inertia:.6g}")
    return ClusterModel(
        centers=centers,
        assignment={user_id: int(label) for user_id, label in zip(user_ids, labels)},
        inertia=inertia,
        inertia_history=history,
        n_iter=n_iter,
    )


def identity_clustering(embeddings: np.ndarray, user_ids: Sequence[str]) -> ClusterModel:
    """No clustering (K = inf): every user is its own group."""
    points = np.asarray(embeddings, dtype=np.float64)
    return ClusterModel(
        centers=points.copy(),
        assignment={user_id: i for i, user_id in enumerate(user_ids)},
        inertia=0.0,
        inertia_history=[0.0],
        n_iter=0,
        clustered=False,
    )


# ---------------------------------------------------------------------------
# Cluster scoring and pruning
# ---------------------------------------------------------------------------

@torch.no_grad()
def score_clusters(centers: np.ndarray, ad: Ad, model: HierarchicalCreativeModel) -> np.ndarray:
    """Click probability of ``ad`` for each cluster center."""
    model.eval()
    users = torch.as_tensor(np.asarray(centers), dtype=model.dtype, device=model.device)
    target = model.ad_embedding(ad)
    probs = predict_click(users, target.expand_as(users), model.predictor)
    return probs.double().cpu().numpy()


def select_topk(scores: Sequence[float], k: int) -> List[int]:
    """Ids of the ``k`` largest scores, descending; ties go to the smaller id."""
    scores = np.asarray(scores, dtype=np.float64)
    if k < 1 or k > scores.shape[0]:
        raise ValueError(f"k must be in [1, {scores.shape[0]}], got {k}")
    order = np.lexsort((np.arange(scores.shape[0]), -scores))
    return [int(i) for i in order[:k]]


class GenerationPlan(BaseModel):
    """Which clusters (and queries) to generate for one ad in one mode."""

    model_config = ConfigDict(extra="forbid")

    ad_id: str
    mode: GenerationMode
    clusters: List[Tuple[int, float]]
    queries: List[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def _mode_shape(self):
        if self.mode == GenerationMode.QUERY_AWARE:
            if len(self.clusters) != 1:
                raise ValueError("query-aware plans target exactly one cluster")
            if not self.queries:
                raise ValueError("query-aware plans need at least one query")
        elif self.queries:
            raise ValueError("query-free plans carry no queries")
        return self


def plan_generation(ads: Sequence[Ad], cluster_model: ClusterModel, model: HierarchicalCreativeModel,
                    mode: GenerationMode, inference_cfg: InferenceConfig) -> Tuple[List[GenerationPlan], List[Tuple[str, str]]]:
    """
    Plans per ad plus ``(ad_id, reason)`` for every skipped ad.

    k is capped at the number of clusters.
    """
    mode = GenerationMode(mode)
    k = inference_cfg.topk_query_aware if mode == GenerationMode.QUERY_AWARE else inference_cfg.topk_query_free
    k = min(k, cluster_model.k)
    plans, skipped = [], []
    for ad in ads:
        queries = ad.all_queries() if mode == GenerationMode.QUERY_AWARE else []
        if mode == GenerationMode.QUERY_AWARE and not queries:
            skipped.append((ad.ad_id, "query-aware generation needs at least one query"))
            continue
        scores = score_clusters(cluster_model.centers, ad, model)
        selected = select_topk(scores, k)
        plans.append(GenerationPlan(ad_id=ad.ad_id, mode=mode,
                                    clusters=[(cid, float(scores[cid])) for cid in selected], queries=queries))
    for ad_id, reason in skipped:
        logger.warning(f"Skipped ad {ad_id}: {reason}")
    return plans, skipped


def write_plans(plans: Iterable[GenerationPlan], path: Union[str, Path]) -> None:
    write_jsonl(plans, path)


def read_plans(path: Union[str, Path]) -> List[GenerationPlan]:
    with open(path, "r", encoding="utf-8") as f:
        return [parse_line(GenerationPlan, line, n) for n, line in enumerate(f, start=1) if line.strip()]


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def task_seed(base_seed: int, ad_id: str, cluster_id: int, query: Optional[str]) -> int:
    """Stable per-candidate sampling seed, independent of task order."""
    digest = hashlib.sha256(f"{base_seed}:{ad_id}:{cluster_id}:{query or ''}".encode("utf-8")).hexdigest()
    return int(digest[:8], 16)


def generate_from_plans(plans: Sequence[GenerationPlan], ads: Mapping[str, Ad], cluster_model: ClusterModel,
                        model: HierarchicalCreativeModel, decode_cfg: DecodeConfig, workers: int = 1,
                        show_progress: bool = False) -> List[CreativeCandidate]:
    """One candidate per (ad, cluster[, query]); output order follows the plans."""
    model.eval()
    tasks = []
    for plan in plans:
        queries = plan.queries or [None]
        for cluster_id, score in plan.clusters:
            for query in queries:
                tasks.append((plan, cluster_id, score, query))

    def run(task) -> CreativeCandidate:
        plan, cluster_id, score, query = task
        ad = ads[plan.ad_id]
        center = torch.as_tensor(cluster_model.centers[cluster_id], dtype=model.dtype, device=model.device)
        task_cfg = decode_cfg.model_copy(update={"seed": task_seed(decode_cfg.seed, ad.ad_id, cluster_id, query)})
        title = generate_title(model.build_prompt(center, ad, query), model.creative, model.vocab, task_cfg,
                               use_user_prefix=model.config.training.use_user_prefix)
        return CreativeCandidate(ad_id=ad.ad_id, cluster_id=cluster_id, mode=plan.mode, title=title,
                                 match_score=min(max(score, 0.0), 1.0), query=query)

    with torch.no_grad():
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(tqdm(pool.map(run, tasks), total=len(tasks), desc="Generating",
                                    disable=not show_progress))
        else:
            results = [run(task) for task in tqdm(tasks, desc="Generating", disable=not show_progress)]
    return results


def batch_generate(ads: Sequence[Ad], cluster_model: ClusterModel, model: HierarchicalCreativeModel,
                   mode: GenerationMode, decode_cfg: DecodeConfig,
                   inference_cfg: Optional[InferenceConfig] = None) -> List[CreativeCandidate]:
    inference_cfg = inference_cfg or InferenceConfig()
    plans, _ = plan_generation(ads, cluster_model, model, mode, inference_cfg)
    return generate_from_plans(plans, {ad.ad_id: ad for ad in ads}, cluster_model, model, decode_cfg,
                               workers=inference_cfg.workers)


# ---------------------------------------------------------------------------
# Badcase filter
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BadcaseRule:
    """``violates(title, source_text)`` is True when the title breaks the rule."""

    name: str
    violates: Callable[[str, str], bool]


_NUMBER = re.compile(r"\d+(?:[.,]\d+)*")


def _term_pattern(term: str) -> re.Pattern:
    return re.compile(r"(?<!\w)" + re.escape(term.lower()) + r"(?!\w)")


def _lexicon_rule(name: str, terms: Sequence[str], allow_from_source: bool) -> BadcaseRule:
    patterns = [_term_pattern(term) for term in terms]

    def violates(title: str, source: str) -> bool:
        title, source = title.lower(), source.lower()
        for pattern in patterns:
            if pattern.search(title) and not (allow_from_source and pattern.search(source)):
                return True
        return False

    return BadcaseRule(name, violates)


def default_rules(cfg: Optional[BadcaseConfig] = None) -> List[BadcaseRule]:
    """
    Ordered rules:
    length, fabricated-number, location, brand, sensitive-term.

    Numbers, locations and brands are allowed when the ad's own text has them;
    sensitive terms never are.
    """
    cfg = cfg or BadcaseConfig()

    def bad_length(title: str, source: str) -> bool:
        return not cfg.min_chars <= len(title.strip()) <= cfg.max_chars

    def fabricated_number(title: str, source: str) -> bool:
        return bool(set(_NUMBER.findall(title)) - set(_NUMBER.findall(source)))

    return [
        BadcaseRule("length", bad_length),
        BadcaseRule("fabricated-number", fabricated_number),
        _lexicon_rule("location", cfg.location_lexicon, allow_from_source=True),
        _lexicon_rule("brand", cfg.brand_lexicon, allow_from_source=True),
        _lexicon_rule("sensitive-term", cfg.sensitive_terms, allow_from_source=False),
    ]


def ad_source_text(ad: Ad) -> str:
    return " ".join([ad.original_title, *ad.selling_points])


def badcase_filter(candidate: CreativeCandidate, ad: Ad, rules: Sequence[BadcaseRule]) -> FilterVerdict:
    source = ad_source_text(ad)
    for rule in rules:
        if rule.violates(candidate.title, source):
            return FilterVerdict.fail(rule.name)
    return FilterVerdict.ok()


def apply_badcase_filter(candidates: Iterable[CreativeCandidate], ads: Mapping[str, Ad],
                         rules: Sequence[BadcaseRule]) -> List[CreativeCandidate]:
    """Candidates with their verdicts attached."""
    return [
        candidate.model_copy(update={"verdict": badcase_filter(candidate, ads[candidate.ad_id], rules)})
        for candidate in candidates
    ]


# ---------------------------------------------------------------------------
# Creative library
# ---------------------------------------------------------------------------

class CreativeLibrary:
    """
    Append-only JSON-lines store of passing candidates with an in-memory index.

    Writes go through one lock; a key already present with the same content is
    not written again, otherwise the new version replaces it.
    """

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._index: Dict[Tuple[str, int, str, str], CreativeCandidate] = {}
        self._order: Dict[Tuple[str, int, str, str], int] = {}
        if self.path.exists():
            with open(self.path, "r", encoding="utf-8") as f:
                for line_number, line in enumerate(f, start=1):
                    if line.strip():
                        self._remember(parse_line(CreativeCandidate, line, line_number))

    def _remember(self, candidate: CreativeCandidate) -> None:
        key = candidate.library_key
        if key not in self._order:
            self._order[key] = len(self._order)
        self._index[key] = candidate

    def __len__(self) -> int:
        return len(self._index)

    def put(self, candidates: Iterable[CreativeCandidate]) -> int:
        """Store passing candidates; returns how many lines were written."""
        rejected = 0
        written = []
        with self._lock:
            for candidate in candidates:
                if candidate.verdict is None or not candidate.verdict.passed:
                    rejected += 1
                    continue
                if self._index.get(candidate.library_key) == candidate:
                    continue
                self._remember(candidate)
                written.append(candidate)
            if written:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as f:
                    for candidate in written:
                        f.write(json.dumps(candidate.model_dump(mode="json"), ensure_ascii=False) + "\n")
                    f.flush()
                    os.fsync(f.fileno())
        if rejected:
            logger.warning(f"Library refused {rejected} candidates without a pass verdict")
        return len(written)

    def query(self, ad_id: str, mode: Union[GenerationMode, str]) -> List[CreativeCandidate]:
        """Stored candidates for (ad_id, mode) by match score, descending; ties keep insertion order."""
        mode = GenerationMode(mode)
        with self._lock:
            hits = [(self._order[key], candidate) for key, candidate in self._index.items()
                    if candidate.ad_id == ad_id and candidate.mode == mode]
        hits.sort(key=lambda pair: (-pair[1].match_score, pair[0]))
        return [candidate for _, candidate in hits]

    def all(self) -> List[CreativeCandidate]:
        with self._lock:
            return [self._index[key] for key in sorted(self._order, key=self._order.get)]

    def compact(self) -> None:
        """Rewrite the log with one line per key."""
        with self._lock:
            tmp_path = self.path.with_name(self.path.name + ".tmp")
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(tmp_path, "w", encoding="utf-8") as f:
                for key in sorted(self._order, key=self._order.get):
                    f.write(json.dumps(self._index[key].model_dump(mode="json"), ensure_ascii=False) + "\n")
            os.replace(tmp_path, self.path)
