"""
Prefix-conditioned creative decoder.

The user embedding U is projected into the decoder's width by a single affine
layer and occupies exactly one soft-token slot at position 0. The ad
constraints follow as ordinary tokens:

    [U-slot] f_1 .. f_a [sep] q_1 .. q_b [bos] r_1 .. r_L

Logits at [bos] predict r_1; the loss only ever covers response positions.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from creative_dp_utils.config import DecodeConfig, TransformerDims
from creative_dp_utils.datamodel import (
    ATTRIBUTE_SEPARATOR,
    RESERVED_TOKENS,
    Ad,
    Vocabulary,
    detokenize,
    tokenize,
)
from creative_dp_utils.encoders import CausalTransformer, init_weights, pad_token_batch

IGNORE_INDEX = -100


def ad_constraint_text(ad: Ad, include_original_title: bool = True, include_selling_points: bool = True) -> str:
    parts = []
    if include_original_title:
        parts.append(ad.original_title)
    if include_selling_points:
        parts.extend(ad.selling_points)
    return ATTRIBUTE_SEPARATOR.join(parts)


@dataclass(frozen=True)
class CreativePrompt:
    """User embedding plus the token plan that follows the U-slot."""

    user_embedding: torch.Tensor
    ad: Ad
    query: Optional[str]
    token_ids: List[int] = field(default_factory=list)
    ad_token_count: int = 0

    @classmethod
    def build(cls, user_embedding: torch.Tensor, ad: Ad, query: Optional[str], vocab: Vocabulary,
              max_ad_tokens: int = 96, max_query_tokens: int = 16,
              include_original_title: bool = True, include_selling_points: bool = True) -> "CreativePrompt":
        token_ids = prompt_token_ids(ad, query, vocab, max_ad_tokens, max_query_tokens,
                                     include_original_title, include_selling_points)
        ad_token_count = token_ids.index(vocab.sep_id)
        return cls(user_embedding=user_embedding, ad=ad, query=query, token_ids=token_ids,
                   ad_token_count=ad_token_count)


def prompt_token_ids(ad: Ad, query: Optional[str], vocab: Vocabulary, max_ad_tokens: int = 96,
                     max_query_tokens: int = 16, include_original_title: bool = True,
                     include_selling_points: bool = True) -> List[int]:
    """Tokens after the U-slot: ad text, [sep], query, [bos]."""
    ad_text = ad_constraint_text(ad, include_original_title, include_selling_points)
    ad_ids = tokenize(ad_text, vocab, max_ad_tokens) if ad_text else []
    query_ids = tokenize(query, vocab, max_query_tokens) if query else []
    return ad_ids + [vocab.sep_id] + query_ids + [vocab.bos_id]


class PrefixLanguageModel(nn.Module):
    """Causal transformer + output head, reading one soft prefix vector before the tokens."""

    def __init__(self, dims: TransformerDims, vocab_size: int, init_std: float = 0.02):
        super().__init__()
        self.transformer = CausalTransformer(dims, vocab_size, init_std)
        self.lm_head = nn.Linear(dims.d_model, vocab_size, bias=False)
        init_weights(self.lm_head, init_std)

    @property
    def d_model(self) -> int:
        return self.transformer.d_model

    def logits(self, prefix: torch.Tensor, token_ids: torch.Tensor) -> torch.Tensor:
        """prefix (B, D), token_ids (B, T) -> logits (B, T + 1, V)."""
        inputs = torch.cat([prefix.unsqueeze(1), self.transformer.embed_tokens(token_ids)], dim=1)
        return self.lm_head(self.transformer(inputs))

    def teacher_forcing(self, prefix: torch.Tensor, contexts: Sequence[Sequence[int]],
                        targets: Sequence[Sequence[int]], pad_id: int) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Logits over a padded batch together with aligned targets.

        Each context must end with the token whose output predicts targets[0];
        the fed sequence is context + targets[:-1].

        Returns:
            (logits (B, T + 1, V), labels (B, T + 1)) with IGNORE_INDEX outside targets
        """
        fed, label_rows = [], []
        for context, target in zip(contexts, targets):
            if len(target) == 0:
                raise ValueError("target sequence is empty")
            fed.append(list(context) + list(target[:-1]))
            start = len(context)  # U-slot shifts every token by one
            label_rows.append([IGNORE_INDEX] * start + list(target))
        device = prefix.device
        ids = pad_token_batch(fed, pad_id, device=device)
        width = ids.shape[1] + 1
        labels = torch.full((len(fed), width), IGNORE_INDEX, dtype=torch.long, device=device)
        for row, label in enumerate(label_rows):
            labels[row, : len(label)] = torch.tensor(label, dtype=torch.long, device=device)
        return self.logits(prefix, ids), labels


class CreativeDecoder(nn.Module):
    """Creative LLM analogue: projection of U into the decoder space plus the prefix LM."""

    def __init__(self, dims: TransformerDims, vocab_size: int, user_dim: int, init_std: float = 0.02):
        super().__init__()
        self.projection = nn.Linear(user_dim, dims.d_model)
        init_weights(self.projection, init_std)
        self.lm = PrefixLanguageModel(dims, vocab_size, init_std)
        self.user_dim = user_dim

    def project_user(self, user_embedding: torch.Tensor) -> torch.Tensor:
        return project_user(user_embedding, self.projection)

    def prefix(self, user_embeddings: torch.Tensor, use_user_prefix: bool = True) -> torch.Tensor:
        projected = self.project_user(user_embeddings)
        return projected if use_user_prefix else torch.zeros_like(projected)


def project_user(user_embedding: torch.Tensor, projection: nn.Linear) -> torch.Tensor:
    """Affine map of U (or a batch of U) into the decoder's embedding space."""
    if user_embedding.shape[-1] != projection.in_features:
        raise ValueError(
            f"user embedding width {user_embedding.shape[-1]} != projection input {projection.in_features}"
        )
    return projection(user_embedding)


def creative_forward(prompt: CreativePrompt, response_tokens: Sequence[int], decoder: CreativeDecoder,
                     pad_id: int = 0, use_user_prefix: bool = True) -> torch.Tensor:
    """
    Teacher-forced logits (L, V): row t is the distribution for response_tokens[t]
    given the U-slot, the prompt tokens and response_tokens[:t].
    """
    prefix = decoder.prefix(prompt.user_embedding.unsqueeze(0), use_user_prefix)
    logits, labels = decoder.lm.teacher_forcing(prefix, [prompt.token_ids], [response_tokens], pad_id)
    start = len(prompt.token_ids)
    return logits[0, start: start + len(response_tokens)]


def _blocked_ids(vocab: Vocabulary) -> List[int]:
    return [vocab.token_to_id[token] for token in RESERVED_TOKENS if token != "[eos]"]


@torch.no_grad()
def generate_token_ids(prompt: CreativePrompt, decoder: CreativeDecoder, vocab: Vocabulary,
                       decode_cfg: DecodeConfig, use_user_prefix: bool = True) -> List[int]:
    """Autoregressive decoding without caching; stops at [eos] or max_new_tokens."""
    prefix = decoder.prefix(prompt.user_embedding.unsqueeze(0), use_user_prefix)
    max_positions = decoder.lm.transformer.max_positions
    blocked = _blocked_ids(vocab)
    generator = None
    if decode_cfg.mode == "sampling":
        generator = torch.Generator(device="cpu").manual_seed(decode_cfg.seed)

    context = list(prompt.token_ids)
    generated: List[int] = []
    for _ in range(decode_cfg.max_new_tokens):
        if len(context) + 1 > max_positions:
            break
        ids = torch.tensor([context], dtype=torch.long, device=prefix.device)
        next_logits = decoder.lm.logits(prefix, ids)[0, -1].clone()
        next_logits[blocked] = float("-inf")
        if decode_cfg.mode == "greedy":
            next_id = int(torch.argmax(next_logits))
        else:
            probs = F.softmax(next_logits.double() / decode_cfg.temperature, dim=-1).cpu()
            next_id = int(torch.multinomial(probs, 1, generator=generator))
        if next_id == vocab.eos_id:
            break
        generated.append(next_id)
        context.append(next_id)
    return generated


def generate_title(prompt: CreativePrompt, decoder: CreativeDecoder, vocab: Vocabulary,
                   decode_cfg: DecodeConfig, use_user_prefix: bool = True) -> str:
    """Decode one title for ``prompt``; greedy mode and seeded sampling are both deterministic."""
    return detokenize(generate_token_ids(prompt, decoder, vocab, decode_cfg, use_user_prefix), vocab)
