"""
Training objectives and the Item-User Predictor.

    total = gen + lambda_cls * cls + lambda_align * align + lambda_recon * recon

gen and recon are next-token cross-entropies restricted to target positions,
cls is binary cross-entropy of the predictor's click logit, align is InfoNCE
over cosine similarities with the diagonal as positives.
"""

from typing import Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from creative_dp_utils.config import LossWeights, PredictorDims
from creative_dp_utils.creative import IGNORE_INDEX, CreativeDecoder, PrefixLanguageModel
from creative_dp_utils.encoders import init_weights


class MixerLayer(nn.Module):
    """Token mixing across the (U, E) rows, then channel mixing within each row."""

    def __init__(self, d_model: int, hidden_dim: int, n_tokens: int = 2):
        super().__init__()
        self.token_norm = nn.LayerNorm(d_model)
        self.token_mlp = nn.Sequential(nn.Linear(n_tokens, hidden_dim), nn.GELU(), nn.Linear(hidden_dim, n_tokens))
        self.channel_norm = nn.LayerNorm(d_model)
        self.channel_mlp = nn.Sequential(nn.Linear(d_model, hidden_dim), nn.GELU(), nn.Linear(hidden_dim, d_model))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, 2, D)
        x = x + self.token_mlp(self.token_norm(x).transpose(1, 2)).transpose(1, 2)
        return x + self.channel_mlp(self.channel_norm(x))


class ItemUserPredictor(nn.Module):
    """MLP-Mixer over the two-row sequence [U; E] with a scalar click-logit head."""

    def __init__(self, d_model: int, dims: Optional[PredictorDims] = None, init_std: float = 0.02):
        super().__init__()
        dims = dims or PredictorDims()
        self.d_model = d_model
        self.layers = nn.ModuleList(MixerLayer(d_model, dims.hidden_dim) for _ in range(dims.n_layers))
        self.head_norm = nn.LayerNorm(d_model)
        self.head = nn.Linear(d_model, 1)
        init_weights(self, init_std)

    def zero_head(self) -> None:
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, user_embeddings: torch.Tensor, item_embeddings: torch.Tensor) -> torch.Tensor:
        """(B, D), (B, D) -> click logits (B,)."""
        if user_embeddings.shape != item_embeddings.shape or user_embeddings.shape[-1] != self.d_model:
            raise ValueError(
                f"predictor expects matching (B, {self.d_model}) inputs, got "
                f"{tuple(user_embeddings.shape)} and {tuple(item_embeddings.shape)}"
            )
        x = torch.stack([user_embeddings, item_embeddings], dim=1)
        for layer in self.layers:
            x = layer(x)
        return self.head(self.head_norm(x).mean(dim=1)).squeeze(-1)


def generative_loss(logits: torch.Tensor, response_tokens) -> torch.Tensor:
    """Mean negative log-likelihood of ``response_tokens`` under ``logits`` (L, V)."""
    targets = torch.as_tensor(response_tokens, dtype=torch.long, device=logits.device)
    if logits.dim() != 2 or logits.shape[0] != targets.shape[0]:
        raise ValueError(f"logits {tuple(logits.shape)} do not line up with {targets.shape[0]} response tokens")
    if targets.shape[0] == 0:
        raise ValueError("response is empty")
    return F.cross_entropy(logits, targets)


def masked_sequence_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """
    Per-sample mean cross-entropy over labelled positions, averaged over the batch.

    logits (B, T, V) and labels (B, T) are aligned: labels[b, t] is the target
    read off logits[b, t], IGNORE_INDEX elsewhere.
    """
    token_losses = F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), labels.reshape(-1), ignore_index=IGNORE_INDEX, reduction="none"
    ).view(labels.shape)
    counts = (labels != IGNORE_INDEX).sum(dim=1)
    if (counts == 0).any():
        raise ValueError("every sample needs at least one target position")
    return (token_losses.sum(dim=1) / counts).mean()


def predict_click(user_embedding: torch.Tensor, item_embedding: torch.Tensor, predictor: ItemUserPredictor) -> torch.Tensor:
    """Click probability for one (U, E) pair, or a batch of pairs."""
    single = user_embedding.dim() == 1
    if single:
        user_embedding, item_embedding = user_embedding.unsqueeze(0), item_embedding.unsqueeze(0)
    probs = torch.sigmoid(predictor(user_embedding, item_embedding))
    return probs[0] if single else probs


def cls_loss_from_logits(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if logits.numel() == 0:
        raise ValueError("cls batch is empty")
    return F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype))


def cls_loss(pairs: Sequence[Tuple[torch.Tensor, torch.Tensor]], labels: Sequence[int],
             predictor: ItemUserPredictor) -> torch.Tensor:
    """Mean binary cross-entropy of the predictor over (U, E) pairs."""
    if not pairs or len(pairs) != len(labels):
        raise ValueError(f"cls needs a non-empty batch with one label per pair ({len(pairs)} pairs, {len(labels)} labels)")
    users = torch.stack([u for u, _ in pairs])
    items = torch.stack([e for _, e in pairs])
    targets = torch.as_tensor(list(labels), device=users.device)
    return cls_loss_from_logits(predictor(users, items), targets)


def align_loss(user_batch: torch.Tensor, interest_batch: torch.Tensor, temperature: float = 0.07) -> torch.Tensor:
    """
    InfoNCE with cosine similarity: row i of ``user_batch`` should pick row i of
    ``interest_batch`` among all rows.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if user_batch.shape[0] == 0 or user_batch.shape != interest_batch.shape:
        raise ValueError(
            f"align needs equally shaped non-empty batches, got {tuple(user_batch.shape)} and {tuple(interest_batch.shape)}"
        )
    user_norms = user_batch.norm(dim=-1, keepdim=True)
    interest_norms = interest_batch.norm(dim=-1, keepdim=True)
    if (user_norms == 0).any() or (interest_norms == 0).any():
        raise ValueError("cosine similarity is undefined for a zero-norm vector")
    similarity = (user_batch / user_norms) @ (interest_batch / interest_norms).T / temperature
    labels = torch.arange(user_batch.shape[0], device=user_batch.device)
    return F.cross_entropy(similarity, labels)


def recon_loss(user_embedding: torch.Tensor, interest_tokens: Sequence[int], decoder: CreativeDecoder,
               bos_id: int, pad_id: int = 0, interest_lm: Optional[PrefixLanguageModel] = None) -> torch.Tensor:
    """
    Mean next-token cross-entropy of the interest text given only the projected U.

    ``interest_lm`` defaults to the creative decoder's own language model (shared weights).
    """
    if len(interest_tokens) == 0:
        raise ValueError("interest text is empty")
    lm = interest_lm if interest_lm is not None else decoder.lm
    prefix = decoder.project_user(user_embedding.unsqueeze(0))
    logits, labels = lm.teacher_forcing(prefix, [[bos_id]], [interest_tokens], pad_id)
    return masked_sequence_loss(logits, labels)


def total_loss(gen: torch.Tensor, cls=0.0, align=0.0, recon=0.0, weights: Optional[LossWeights] = None):
    weights = weights or LossWeights()
    return gen + weights.cls * cls + weights.align * align + weights.recon * recon
