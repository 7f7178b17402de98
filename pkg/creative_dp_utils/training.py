"""
Joint end-to-end trainer.

Batches are drawn in a seeded order per epoch and negatives are sampled with a
per-step seed, so every step is a pure function of (config, dataset, step):
a run resumed from a checkpoint replays the uninterrupted run exactly.
"""

import copy
import hashlib
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
import torch
from tqdm import tqdm

from creative_dp_utils.config import RunConfig, TrainConfig, config_hash
from creative_dp_utils.datamodel import (
    DatasetRecord,
    Item,
    Vocabulary,
    ad_as_item,
    corpus_texts,
)
from creative_dp_utils.encoders import extract_interest_features
from creative_dp_utils.modeling import HierarchicalCreativeModel, build_model
from creative_dp_utils.objectives import (
    align_loss,
    cls_loss_from_logits,
    masked_sequence_loss,
    total_loss,
)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "creative-checkpoint"
CHECKPOINT_VERSION = 1
LOSS_NAMES = ("gen", "cls", "align", "recon")


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, losses: Dict[str, Optional[float]]):
        super().__init__(f"non-finite loss at step {step}: {losses}")
        self.step = step
        self.losses = losses


class CheckpointError(ValueError):
    """Checkpoint file is unreadable."""


class ChecksumMismatchError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    """Header hashes disagree with the body, or the vocabulary is not the expected one."""


class CheckpointVersionError(CheckpointError):
    def __init__(self, found, expected: int = CHECKPOINT_VERSION):
        super().__init__(f"checkpoint version {found} is not supported (this build reads version {expected})")
        self.found = found
        self.expected = expected


@dataclass
class Checkpoint:
    config: RunConfig
    vocab: Vocabulary
    model_state: Dict[str, torch.Tensor]
    step: int = 0
    optimizer_state: Optional[dict] = None
    rng_state: Dict[str, object] = field(default_factory=dict)
    metrics: List[Dict[str, Optional[float]]] = field(default_factory=list)

    def build_model(self) -> HierarchicalCreativeModel:
        model = build_model(self.config, self.vocab)
        model.load_state_dict(self.model_state)
        model.eval()
        return model


@dataclass
class TrainingBatch:
    records: List[DatasetRecord]
    prompts: List[List[int]]
    responses: List[List[int]]
    cls_rows: List[int]
    cls_items: List[Item]
    cls_labels: List[int]
    interests: List[List[int]]


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

def build_item_corpus(records: Sequence[DatasetRecord]) -> Dict[str, Item]:
    """
    Every history item and target ad (as an item), keyed by id.

    The first occurrence of an id wins; ids seen again with different content
    are logged as a warning.
    """
    corpus: Dict[str, Item] = {}
    conflicts: Set[str] = set()
    for record in records:
        for item in (*record.history, ad_as_item(record.ad)):
            kept = corpus.setdefault(item.item_id, item)
            if kept != item:
                conflicts.add(item.item_id)
    if conflicts:
        shown = ", ".join(sorted(conflicts)[:5])
        logger.warning(f"{len(conflicts)} item ids appear with different content; keeping the first of each ({shown})")
    return dict(sorted(corpus.items()))


def sample_negatives(history_ids: Sequence[str], corpus_ids: Sequence[str], n: int,
                     rng: np.random.Generator, exclude: Sequence[str] = ()) -> List[str]:
    """
    ``n`` ids drawn uniformly from ``corpus_ids`` minus the user's history (and ``exclude``).

    Draws with replacement only when fewer than ``n`` candidates remain.
    """
    blocked = set(history_ids) | set(exclude)
    candidates = sorted(set(corpus_ids) - blocked)
    if n <= 0 or not candidates:
        return []
    picks = rng.choice(len(candidates), size=n, replace=len(candidates) < n)
    return [candidates[i] for i in picks]


def _labelled_items(record: DatasetRecord) -> List[Tuple[str, int]]:
    if record.click_labels:
        return list(record.click_labels)
    return [(record.ad.ad_id, 1)]


def build_batch(records: Sequence[DatasetRecord], corpus: Dict[str, Item], cfg: TrainConfig,
                rng: np.random.Generator, model: HierarchicalCreativeModel) -> TrainingBatch:
    """
    Per record: one generative example, one align/recon interest target and the
    cls pairs (labelled positives capped at max_positives, labelled negatives,
    plus n_neg sampled negatives per positive).
    """
    if not records:
        raise ValueError("cannot build a batch from zero records")
    weights = cfg.loss_weights
    needs_interest = weights.align > 0 or weights.recon > 0

    prompts, responses, interests = [], [], []
    cls_rows, cls_items, cls_labels = [], [], []
    corpus_ids = list(corpus)
    for row, record in enumerate(records):
        prompts.append(model.prompt_token_ids(record.ad, record.ad.query))
        responses.append(model.response_tokens(record.response))

        if record.interest_text:
            interests.append(model.interest_tokens(record.interest_text))
        elif needs_interest:
            raise ValueError(f"record for user {record.user_id} has no interest_text but align/recon are enabled")
        else:
            interests.append([])

        history_ids = [item.item_id for item in record.history]
        positives = 0
        for item_id, label in _labelled_items(record):
            if item_id not in corpus:
                logger.warning(f"click label for unknown item {item_id} ignored")
                continue
            if label == 1:
                if positives == cfg.max_positives:
                    continue
                positives += 1
                negatives = sample_negatives(history_ids, corpus_ids, cfg.n_neg, rng, exclude=[item_id])
                pairs = [(item_id, 1)] + [(neg, 0) for neg in negatives]
            else:
                pairs = [(item_id, 0)]
            for pair_id, pair_label in pairs:
                cls_rows.append(row)
                cls_items.append(corpus[pair_id])
                cls_labels.append(pair_label)

    return TrainingBatch(list(records), prompts, responses, cls_rows, cls_items, cls_labels, interests)


def batch_indices(n_records: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Record indices for a global step: seeded permutation per epoch, sliced by batch position."""
    steps_per_epoch = math.ceil(n_records / batch_size)
    epoch, position = divmod(step, steps_per_epoch)
    order = np.random.default_rng([seed, epoch]).permutation(n_records)
    return order[position * batch_size: (position + 1) * batch_size]


# ---------------------------------------------------------------------------
# Loss computation
# ---------------------------------------------------------------------------

def compute_losses(model: HierarchicalCreativeModel, batch: TrainingBatch,
                   cfg: TrainConfig) -> Tuple[torch.Tensor, Dict[str, Optional[float]]]:
    """Weighted total plus every component as a float (None when neither trained nor logged)."""
    weights = cfg.loss_weights
    vocab = model.vocab
    user = model.user_embeddings([record.history for record in batch.records])

    prefix = model.creative.prefix(user, cfg.use_user_prefix)
    logits, labels = model.creative.lm.teacher_forcing(prefix, batch.prompts, batch.responses, vocab.pad_id)
    gen = masked_sequence_loss(logits, labels)

    def cls_term():
        if not batch.cls_items:
            return None
        items = model.item_embeddings(batch.cls_items)
        rows = torch.as_tensor(batch.cls_rows, device=user.device)
        targets = torch.as_tensor(batch.cls_labels, device=user.device)
        return cls_loss_from_logits(model.predictor(user[rows], items), targets)

    def align_term():
        if any(len(tokens) == 0 for tokens in batch.interests):
            return None
        projected = model.creative.project_user(user)
        interest = extract_interest_features(batch.interests, model.interest_extractor,
                                             detach=cfg.freeze_interest_extractor)
        return align_loss(projected, interest, weights.temperature)

    def recon_term():
        if any(len(tokens) == 0 for tokens in batch.interests):
            return None
        projected = model.creative.project_user(user)
        contexts = [[vocab.bos_id]] * len(batch.interests)
        recon_logits, recon_labels = model.recon_lm.teacher_forcing(projected, contexts, batch.interests, vocab.pad_id)
        return masked_sequence_loss(recon_logits, recon_labels)

    terms = {}
    for name, weight, term in (("cls", weights.cls, cls_term), ("align", weights.align, align_term),
                               ("recon", weights.recon, recon_term)):
        if weight > 0:
            terms[name] = term()
        elif cfg.log_disabled_losses:
            with torch.no_grad():
                value = term()
            terms[name] = value.detach() if value is not None else None
        else:
            terms[name] = None

    active = {name: (terms[name] if getattr(weights, name) > 0 and terms[name] is not None else 0.0)
              for name in ("cls", "align", "recon")}
    total = total_loss(gen, active["cls"], active["align"], active["recon"], weights)

    logged = {"gen": float(gen.detach())}
    for name in ("cls", "align", "recon"):
        logged[name] = float(terms[name].detach()) if terms[name] is not None else None
    logged["total"] = float(total.detach())
    return total, logged


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    """
    Write a checkpoint: one JSON header line (format, version, sha256 of the
    body, config and vocab hashes) followed by the torch-serialized body.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "config": ckpt.config.model_dump(mode="json"),
        "vocab": ckpt.vocab.tokens,
        "model_state": ckpt.model_state,
        "step": ckpt.step,
        "optimizer_state": ckpt.optimizer_state,
        "rng_state": ckpt.rng_state,
        "metrics": ckpt.metrics,
    }
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    body = buffer.getvalue()
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "sha256": hashlib.sha256(body).hexdigest(),
        "config_hash": config_hash(ckpt.config),
        "vocab_hash": ckpt.vocab.vocab_hash,
        "step": ckpt.step,
    }
    tmp_path = path.with_name(path.name + ".tmp")
    with open(tmp_path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        f.write(body)
    os.replace(tmp_path, path)
    return path


def load_checkpoint(path: Union[str, Path], expected_vocab: Optional[Vocabulary] = None) -> Checkpoint:
    """
    Read a checkpoint written by ``save_checkpoint``.

    ``expected_vocab``, when given, must hash to the checkpoint's vocab hash.

    Raises:
        CheckpointVersionError: written by an unsupported format version
        ChecksumMismatchError: body bytes do not match the recorded digest
        CheckpointMismatchError: config or vocab hash differs from the header or from ``expected_vocab``
        CheckpointError: header missing or unreadable
    """
    with open(path, "rb") as f:
        raw = f.read()
    header_bytes, sep, body = raw.partition(b"\n")
    try:
        header = json.loads(header_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: missing or unreadable checkpoint header") from e
    if not sep or not isinstance(header, dict) or header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a creative checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(header.get("version"))
    digest = hashlib.sha256(body).hexdigest()
    if digest != header.get("sha256"):
        raise ChecksumMismatchError(f"{path}: checksum mismatch (expected {header.get('sha256')}, got {digest})")

    payload = torch.load(io.BytesIO(body), map_location="cpu", weights_only=False)
    config = RunConfig.model_validate(payload["config"])
    vocab = Vocabulary(payload["vocab"])
    for field_name, actual in (("config_hash", config_hash(config)), ("vocab_hash", vocab.vocab_hash)):
        if actual != header.get(field_name):
            raise CheckpointMismatchError(f"{path}: {field_name} {actual} does not match header {header.get(field_name)}")
    if expected_vocab is not None and expected_vocab.vocab_hash != vocab.vocab_hash:
        raise CheckpointMismatchError(
            f"{path}: built with vocab {vocab.vocab_hash}, expected {expected_vocab.vocab_hash}"
        )
    return Checkpoint(
        config=config,
        vocab=vocab,
        model_state=payload["model_state"],
        step=payload["step"],
        optimizer_state=payload["optimizer_state"],
        rng_state=payload["rng_state"],
        metrics=payload["metrics"],
    )


def write_metrics(metrics: Sequence[Dict[str, Optional[float]]], path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for row in metrics:
            f.write(json.dumps(row) + "\n")


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def build_vocabulary(records: Sequence[DatasetRecord], config: RunConfig) -> Vocabulary:
    return Vocabulary.build(corpus_texts(records), min_freq=config.model.vocab_min_freq,
                            max_size=config.model.vocab_max_size)


def total_steps(n_records: int, cfg: TrainConfig) -> int:
    steps = cfg.epochs * math.ceil(n_records / cfg.batch_size)
    return min(steps, cfg.max_steps) if cfg.max_steps is not None else steps


def train(records: Sequence[DatasetRecord], config: RunConfig, vocab: Optional[Vocabulary] = None,
          resume_from: Optional[Checkpoint] = None, checkpoint_dir: Optional[Union[str, Path]] = None,
          stop_after: Optional[int] = None, show_progress: bool = False) -> Checkpoint:
    """
    Train all networks jointly and return the final checkpoint.

    Args:
        records: Training dataset; histories already truncated on ingestion
        config: Run configuration (training section drives the loop)
        vocab: Vocabulary to use; built from ``records`` when omitted
        resume_from: Checkpoint to continue from (its step, weights and optimizer state)
        checkpoint_dir: Where periodic checkpoints go when ``checkpoint_every`` is set
        stop_after: Stop once this global step is reached (for interrupted runs)

    Raises:
        ValueError: If ``records`` is empty
        TrainingDivergedError: On a non-finite loss, carrying the 1-based step
    """
    if not records:
        raise ValueError("cannot train on an empty dataset")
    cfg = config.training

    if resume_from is not None:
        vocab = resume_from.vocab
        model = resume_from.build_model()
        start_step = resume_from.step
        metrics = list(resume_from.metrics)
    else:
        vocab = vocab or build_vocabulary(records, config)
        model = build_model(config, vocab)
        start_step = 0
        metrics = []

    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps)
    if resume_from is not None and resume_from.optimizer_state is not None:
        optimizer.load_state_dict(resume_from.optimizer_state)
    if resume_from is not None and resume_from.rng_state.get("torch") is not None:
        torch.set_rng_state(resume_from.rng_state["torch"])

    corpus = build_item_corpus(records)
    n_steps = total_steps(len(records), cfg)
    if stop_after is not None:
        n_steps = min(n_steps, stop_after)
    logger.info(
        f"Training {len(records)} records for {n_steps - start_step} steps "
        f"(vocab={len(vocab)}, seed={cfg.seed}, dtype={cfg.dtype})"
    )

    model.train()
    for step in tqdm(range(start_step, n_steps), desc="Training", disable=not show_progress):
        indices = batch_indices(len(records), cfg.batch_size, cfg.seed, step)
        rng = np.random.default_rng([cfg.seed, step])
        batch = build_batch([records[i] for i in indices], corpus, cfg, rng, model)

        optimizer.zero_grad(set_to_none=True)
        loss, logged = compute_losses(model, batch, cfg)
        if not all(math.isfinite(v) for v in logged.values() if v is not None):
            raise TrainingDivergedError(step + 1, logged)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip_norm)
        optimizer.step()

        metrics.append({"step": step + 1, **{name: logged[name] for name in (*LOSS_NAMES, "total")}})
        if (step + 1) % 50 == 0 or step == start_step:
            logger.debug(f"step {step + 1}: {metrics[-1]}")

        if cfg.checkpoint_every and checkpoint_dir and (step + 1) % cfg.checkpoint_every == 0:
            path = save_checkpoint(_snapshot(model, optimizer, config, vocab, step + 1, metrics),
                                   Path(checkpoint_dir) / f"step_{step + 1:06d}.ckpt")
            logger.info(f"Saved periodic checkpoint {path}")

    model.eval()
    return _snapshot(model, optimizer, config, vocab, max(n_steps, start_step), metrics)


def _snapshot(model, optimizer, config: RunConfig, vocab: Vocabulary, step: int, metrics) -> Checkpoint:
    return Checkpoint(
        config=config,
        vocab=vocab,
        model_state={name: tensor.detach().clone() for name, tensor in model.state_dict().items()},
        step=step,
        optimizer_state=copy.deepcopy(optimizer.state_dict()),
        rng_state={"torch": torch.get_rng_state(), "seed": config.training.seed},
        metrics=list(metrics),
    )
