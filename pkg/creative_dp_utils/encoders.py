"""
Hierarchical user-interest encoders.

- ItemEncoder: item text tokens + trailing [item] -> item embedding E
- UserEncoder: item embeddings E_1..E_n + trailing learned [user] -> user embedding U
- interest feature extractor: interest text tokens + trailing special token -> V

All three read the final-layer hidden state at the appended special-token
position of a small causal (decoder-only) transformer. Sequences are right
padded; causal masking keeps every real position blind to the padding after it.
"""

import math
from typing import Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from creative_dp_utils.config import TransformerDims


class SequenceTooLongError(ValueError):
    """Input sequence exceeds the network's positional table."""


def init_weights(module: nn.Module, std: float) -> None:
    """Scaled-normal initialization for linear and embedding weights, zero biases."""
    for sub in module.modules():
        if isinstance(sub, nn.Linear):
            nn.init.normal_(sub.weight, mean=0.0, std=std)
            if sub.bias is not None:
                nn.init.zeros_(sub.bias)
        elif isinstance(sub, nn.Embedding):
            nn.init.normal_(sub.weight, mean=0.0, std=std)
        elif isinstance(sub, nn.LayerNorm):
            nn.init.ones_(sub.weight)
            nn.init.zeros_(sub.bias)


class CausalSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads != 0:
            raise ValueError(f"d_model ({d_model}) must be divisible by n_heads ({n_heads})")
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        batch, length, width = x.shape
        q, k, v = self.qkv(x).split(width, dim=-1)
        q = q.view(batch, length, self.n_heads, self.head_dim).transpose(1, 2)
        k = k.view(batch, length, self.n_heads, self.head_dim).transpose(1, 2)
        v = v.view(batch, length, self.n_heads, self.head_dim).transpose(1, 2)

        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        future = torch.ones(length, length, dtype=torch.bool, device=x.device).triu(1)
        scores = scores.masked_fill(future, float("-inf"))
        attended = F.softmax(scores, dim=-1) @ v
        attended = attended.transpose(1, 2).reshape(batch, length, width)
        return self.out(attended)


class DecoderBlock(nn.Module):
    """Pre-norm block: causal self-attention then a GELU feed-forward, both residual."""

    def __init__(self, d_model: int, n_heads: int, ffn_multiplier: int = 4):
        super().__init__()
        self.attn_norm = nn.LayerNorm(d_model)
        self.attn = CausalSelfAttention(d_model, n_heads)
        self.ffn_norm = nn.LayerNorm(d_model)
        self.ffn = nn.Sequential(
            nn.Linear(d_model, ffn_multiplier * d_model),
            nn.GELU(),
            nn.Linear(ffn_multiplier * d_model, d_model),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.attn_norm(x))
        return x + self.ffn(self.ffn_norm(x))


class CausalTransformer(nn.Module):
    """
    Token embedding table, learned positions, L decoder blocks and a final norm.

    ``forward`` takes already-embedded inputs so soft tokens (item embeddings,
    the projected user prefix) can be mixed with looked-up token rows.
    """

    def __init__(self, dims: TransformerDims, vocab_size: int, init_std: float = 0.02):
        super().__init__()
        self.dims = dims
        self.d_model = dims.d_model
        self.max_positions = dims.max_positions
        self.token_embedding = nn.Embedding(vocab_size, dims.d_model)
        self.position_embedding = nn.Embedding(dims.max_positions, dims.d_model)
        self.blocks = nn.ModuleList(
            DecoderBlock(dims.d_model, dims.n_heads, dims.ffn_multiplier) for _ in range(dims.n_layers)
        )
        self.final_norm = nn.LayerNorm(dims.d_model)
        init_weights(self, init_std)

    def embed_tokens(self, token_ids: torch.Tensor) -> torch.Tensor:
        return self.token_embedding(token_ids)

    def forward(self, inputs_embeds: torch.Tensor) -> torch.Tensor:
        length = inputs_embeds.shape[1]
        if length > self.max_positions:
            raise SequenceTooLongError(
                f"sequence of length {length} exceeds max_positions={self.max_positions}"
            )
        positions = torch.arange(length, device=inputs_embeds.device)
        hidden = inputs_embeds + self.position_embedding(positions)
        for block in self.blocks:
            hidden = block(hidden)
        return self.final_norm(hidden)


def pad_token_batch(sequences: Sequence[Sequence[int]], pad_id: int, device=None) -> torch.Tensor:
    longest = max(len(seq) for seq in sequences)
    padded = [list(seq) + [pad_id] * (longest - len(seq)) for seq in sequences]
    return torch.tensor(padded, dtype=torch.long, device=device)


def gather_positions(hidden: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
    """hidden (B, T, D), positions (B,) -> (B, D)."""
    return hidden[torch.arange(hidden.shape[0], device=hidden.device), positions]


class SpecialTokenEncoder(nn.Module):
    """
    Encodes token sequences into one vector: append ``special_id`` and read the
    final hidden state at that position. Used for items ([item]) and for the
    interest feature extractor.
    """

    def __init__(self, transformer: CausalTransformer, special_id: int, pad_id: int, max_tokens: int):
        super().__init__()
        self.transformer = transformer
        self.special_id = special_id
        self.pad_id = pad_id
        self.max_tokens = max_tokens

    @property
    def d_model(self) -> int:
        return self.transformer.d_model

    def forward(self, token_batch: Sequence[Sequence[int]]) -> torch.Tensor:
        if not token_batch:
            raise ValueError("empty batch")
        sequences = []
        for tokens in token_batch:
            if len(tokens) == 0:
                raise ValueError("cannot encode an empty token sequence")
            if len(tokens) > self.max_tokens:
                raise ValueError(f"{len(tokens)} tokens exceed max_tokens={self.max_tokens}")
            sequences.append(list(tokens) + [self.special_id])
        device = self.transformer.token_embedding.weight.device
        ids = pad_token_batch(sequences, self.pad_id, device=device)
        hidden = self.transformer(self.transformer.embed_tokens(ids))
        last = torch.tensor([len(seq) - 1 for seq in sequences], device=device)
        return gather_positions(hidden, last)


class ItemEncoder(SpecialTokenEncoder):
    """Item LLM analogue."""

    def __init__(self, dims: TransformerDims, vocab_size: int, item_token_id: int, pad_id: int,
                 max_item_tokens: int = 64, init_std: float = 0.02):
        if max_item_tokens + 1 > dims.max_positions:
            raise ValueError("item encoder max_positions must cover max_item_tokens + 1")
        super().__init__(CausalTransformer(dims, vocab_size, init_std), item_token_id, pad_id, max_item_tokens)


class UserEncoder(nn.Module):
    """
    User LLM analogue over item embeddings. Its embedding table holds a single
    learned row, the [user] token, appended after the sequence.
    """

    USER_TOKEN_ROW = 0

    def __init__(self, dims: TransformerDims, max_history: int = 500, init_std: float = 0.02):
        super().__init__()
        if max_history + 1 > dims.max_positions:
            raise ValueError("user encoder max_positions must cover max_history + 1")
        self.transformer = CausalTransformer(dims, vocab_size=1, init_std=init_std)
        self.max_history = max_history

    @property
    def d_model(self) -> int:
        return self.transformer.d_model

    def _inputs(self, sequences: Sequence[torch.Tensor]) -> Tuple[torch.Tensor, torch.Tensor]:
        if not sequences:
            raise ValueError("empty batch")
        user_row = self.transformer.token_embedding.weight[self.USER_TOKEN_ROW]
        longest = max(seq.shape[0] for seq in sequences) + 1
        rows = []
        for seq in sequences:
            if seq.dim() != 2 or seq.shape[0] == 0:
                raise ValueError("user encoder needs a non-empty (n, d_model) sequence")
            if seq.shape[1] != self.d_model:
                raise ValueError(f"item embedding width {seq.shape[1]} != user encoder d_model {self.d_model}")
            if seq.shape[0] > self.max_history:
                raise ValueError(f"history of {seq.shape[0]} exceeds max_history={self.max_history}")
            padding = seq.new_zeros(longest - seq.shape[0] - 1, self.d_model)
            rows.append(torch.cat([seq, user_row.unsqueeze(0), padding], dim=0))
        lengths = torch.tensor([seq.shape[0] for seq in sequences], device=user_row.device)
        return torch.stack(rows), lengths

    def hidden_states(self, sequence: torch.Tensor) -> torch.Tensor:
        """Final hidden states of one sequence, [user] position last: (n + 1, D)."""
        inputs, _ = self._inputs([sequence])
        return self.transformer(inputs)[0]

    def forward(self, sequences: Sequence[torch.Tensor]) -> torch.Tensor:
        inputs, lengths = self._inputs(sequences)
        return gather_positions(self.transformer(inputs), lengths)


def truncate_history(items: Sequence, max_history: int = 500) -> list:
    """Keep the most recent ``max_history`` entries (history is most-recent-last)."""
    return list(items)[-max_history:]


def encode_item(item_tokens: Sequence[int], encoder: SpecialTokenEncoder) -> torch.Tensor:
    """Item embedding E for one token list."""
    return encoder([item_tokens])[0]


def encode_user(item_embeddings, encoder: UserEncoder) -> torch.Tensor:
    """User embedding U for one sequence of item embeddings (tensor (n, D) or list of (D,))."""
    if isinstance(item_embeddings, (list, tuple)):
        if not item_embeddings:
            raise ValueError("cannot encode an empty history")
        item_embeddings = torch.stack(list(item_embeddings))
    return encoder([item_embeddings])[0]


def extract_interest_feature(interest_tokens: Sequence[int], extractor: SpecialTokenEncoder,
                             detach: Optional[bool] = False) -> torch.Tensor:
    """Interest feature V for one interest text."""
    if len(interest_tokens) == 0:
        raise ValueError("interest text is empty")
    feature = extractor([interest_tokens])[0]
    return feature.detach() if detach else feature


def encode_items(token_batch: Sequence[Sequence[int]], encoder: SpecialTokenEncoder) -> torch.Tensor:
    """Batched encode_item: (B, D)."""
    return encoder(token_batch)


def encode_users(histories: Sequence[torch.Tensor], encoder: UserEncoder) -> torch.Tensor:
    """Batched encode_user over (n_i, D) histories of different lengths: (B, D)."""
    return encoder(histories)


def extract_interest_features(token_batch: Sequence[Sequence[int]], extractor: SpecialTokenEncoder,
                              detach: bool = False) -> torch.Tensor:
    features = extractor(token_batch)
    return features.detach() if detach else features
