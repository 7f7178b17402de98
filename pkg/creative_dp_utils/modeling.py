"""
The four networks trained jointly, bundled with the vocabulary they read.

    item encoder -> user encoder -> U -> projection -> creative decoder
                                    U -> Item-User Predictor (with E)
    interest text -> interest extractor -> V   (align)
    projected U -> interest decoder -> interest text   (recon)

With ``share_decoder_weights`` the interest extractor and the interest decoder
reuse the creative decoder's transformer.
"""

from typing import List, Optional, Sequence

import torch
import torch.nn as nn

from creative_dp_utils.config import RunConfig
from creative_dp_utils.creative import CreativeDecoder, CreativePrompt, PrefixLanguageModel, prompt_token_ids
from creative_dp_utils.datamodel import Ad, Item, Vocabulary, ad_as_item, flatten_item_text, tokenize
from creative_dp_utils.encoders import (
    CausalTransformer,
    ItemEncoder,
    SpecialTokenEncoder,
    UserEncoder,
    encode_items,
    encode_users,
    truncate_history,
)
from creative_dp_utils.objectives import ItemUserPredictor

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class HierarchicalCreativeModel(nn.Module):
    def __init__(self, config: RunConfig, vocab: Vocabulary):
        super().__init__()
        model_cfg, train_cfg = config.model, config.training
        if model_cfg.item_encoder.d_model != model_cfg.user_encoder.d_model:
            raise ValueError("item and user encoders must share d_model (E feeds the user encoder directly)")
        self.config = config
        self.vocab = vocab
        vocab_size = len(vocab)

        self.item_encoder = ItemEncoder(
            model_cfg.item_encoder, vocab_size, vocab.item_id, vocab.pad_id,
            max_item_tokens=train_cfg.max_item_tokens, init_std=model_cfg.init_std,
        )
        self.user_encoder = UserEncoder(model_cfg.user_encoder, max_history=train_cfg.max_history,
                                        init_std=model_cfg.init_std)
        self.creative = CreativeDecoder(model_cfg.creative_decoder, vocab_size,
                                        user_dim=model_cfg.user_encoder.d_model, init_std=model_cfg.init_std)
        if train_cfg.share_decoder_weights:
            extractor_transformer = self.creative.lm.transformer
            self.interest_lm: Optional[PrefixLanguageModel] = None
        else:
            extractor_transformer = CausalTransformer(model_cfg.creative_decoder, vocab_size, model_cfg.init_std)
            self.interest_lm = PrefixLanguageModel(model_cfg.creative_decoder, vocab_size, model_cfg.init_std)
        self.interest_extractor = SpecialTokenEncoder(
            extractor_transformer, vocab.user_id, vocab.pad_id, train_cfg.max_interest_tokens
        )
        self.predictor = ItemUserPredictor(model_cfg.user_encoder.d_model, model_cfg.predictor, model_cfg.init_std)

    @property
    def device(self) -> torch.device:
        return self.creative.projection.weight.device

    @property
    def dtype(self) -> torch.dtype:
        return self.creative.projection.weight.dtype

    @property
    def recon_lm(self) -> PrefixLanguageModel:
        return self.interest_lm if self.interest_lm is not None else self.creative.lm

    # -- tokenization helpers -------------------------------------------------

    def item_tokens(self, item: Item) -> List[int]:
        return tokenize(flatten_item_text(item), self.vocab, self.config.training.max_item_tokens)

    def response_tokens(self, text: str) -> List[int]:
        cfg = self.config.training
        return tokenize(text, self.vocab, cfg.max_response_tokens) + [self.vocab.eos_id]

    def interest_tokens(self, text: str) -> List[int]:
        return tokenize(text, self.vocab, self.config.training.max_interest_tokens)

    def prompt_token_ids(self, ad: Ad, query: Optional[str]) -> List[int]:
        cfg = self.config.training
        return prompt_token_ids(
            ad, query, self.vocab,
            max_ad_tokens=cfg.max_ad_tokens, max_query_tokens=cfg.max_query_tokens,
            include_original_title=cfg.include_original_title,
            include_selling_points=cfg.include_selling_points,
        )

    def build_prompt(self, user_embedding: torch.Tensor, ad: Ad, query: Optional[str]) -> CreativePrompt:
        token_ids = self.prompt_token_ids(ad, query)
        return CreativePrompt(user_embedding=user_embedding, ad=ad, query=query, token_ids=token_ids,
                              ad_token_count=token_ids.index(self.vocab.sep_id))

    # -- embeddings -----------------------------------------------------------

    def item_embeddings(self, items: Sequence[Item]) -> torch.Tensor:
        return encode_items([self.item_tokens(item) for item in items], self.item_encoder)

    def ad_embedding(self, ad: Ad) -> torch.Tensor:
        """E_tgt: the ad through the item encoder."""
        return self.item_embeddings([ad_as_item(ad)])[0]

    def user_embeddings(self, histories: Sequence[Sequence[Item]]) -> torch.Tensor:
        """U for each history (most-recent-last), truncated to max_history first."""
        histories = [truncate_history(history, self.config.training.max_history) for history in histories]
        if any(len(history) == 0 for history in histories):
            raise ValueError("cannot embed a user with an empty history")
        flat = [item for history in histories for item in history]
        embedded = self.item_embeddings(flat)
        sequences, offset = [], 0
        for history in histories:
            sequences.append(embedded[offset: offset + len(history)])
            offset += len(history)
        return encode_users(sequences, self.user_encoder)


def build_model(config: RunConfig, vocab: Vocabulary) -> HierarchicalCreativeModel:
    """Fresh randomly initialized model; seeded from ``config.training.seed``."""
    torch.manual_seed(config.training.seed)
    model = HierarchicalCreativeModel(config, vocab)
    return model.to(DTYPES[config.training.dtype])
