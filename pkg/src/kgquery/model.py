"""Transformer query/entity encoder with attention intersection and maxout union.

The same encoder (shared parameters) embeds linearized queries and
``[CLS] [target] <name>`` candidate sequences. A query's branches are
mean-pooled over their token spans; several branches are combined by an
additive-attention layer (intersection) or a maxout layer (union).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from kgquery.errors import DataError, ModeError, TruncationError
from kgquery.text import PAD, SPECIAL_TOKENS, LinearizedQuery

PAD_ID = SPECIAL_TOKENS.index(PAD)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    dim: int = 64
    blocks: int = 2
    heads: int = 4
    max_length: int = 128
    maxout_pieces: int = 2
    num_entities: Optional[int] = None  # classification head only when set
    init_std: float = 0.02
    union_init: str = "identity"  # "identity" or "normal"

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.union_init not in ("identity", "normal"):
            raise ValueError(f"unknown union_init {self.union_init!r}")

    def to_dict(self):
        return asdict(self)


class EncoderBlock(nn.Module):
    """Post-norm block: self-attention and a 4x feed-forward, each with residual + LayerNorm."""

    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.norm1 = nn.LayerNorm(dim)
        self.ff1 = nn.Linear(dim, 4 * dim)
        self.ff2 = nn.Linear(4 * dim, dim)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x, pad_mask):
        b, t, d = x.shape
        hd = d // self.heads
        q, k, v = self.qkv(x).view(b, t, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        if pad_mask is not None:
            scores = scores.masked_fill(pad_mask[:, None, None, :], float("-inf"))
        attn = scores.softmax(dim=-1) @ v
        x = self.norm1(x + self.out(attn.transpose(1, 2).reshape(b, t, d)))
        return self.norm2(x + self.ff2(F.gelu(self.ff1(x))))


class QueryAnswerModel(nn.Module):
    def __init__(self, config: ModelConfig, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.config = config
        d = config.dim
        self.token_embedding = nn.Embedding(config.vocab_size, d)
        self.position_embedding = nn.Embedding(config.max_length, d)
        self.blocks = nn.ModuleList(EncoderBlock(d, config.heads) for _ in range(config.blocks))
        self.inter_weight = nn.Parameter(torch.empty(d, d))
        self.inter_bias = nn.Parameter(torch.empty(d))
        self.inter_context = nn.Parameter(torch.empty(d))
        self.union_weight = nn.Parameter(torch.empty(config.maxout_pieces, d, d))
        self.union_bias = nn.Parameter(torch.empty(config.maxout_pieces, d))
        self.classifier = nn.Linear(d, config.num_entities) if config.num_entities else None
        self.reset_parameters(generator)

    @torch.no_grad()
    def reset_parameters(self, generator=None):
        std = self.config.init_std
        for name, p in self.named_parameters():
            if "norm" in name:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                p.normal_(0.0, std, generator=generator)
        if self.config.union_init == "identity":
            eye = torch.eye(self.config.dim, dtype=self.union_weight.dtype)
            self.union_weight.add_(eye)

    @property
    def has_classifier(self) -> bool:
        return self.classifier is not None

    # -- encoder ------------------------------------------------------------

    def _pad(self, sequences: Sequence[Sequence[int]], pad_id: int = PAD_ID):
        longest = max(len(s) for s in sequences)
        if longest > self.config.max_length:
            raise TruncationError(f"sequence of length {longest} exceeds max length {self.config.max_length}")
        ids = torch.full((len(sequences), longest), pad_id, dtype=torch.long)
        mask = torch.ones((len(sequences), longest), dtype=torch.bool)
        for i, s in enumerate(sequences):
            ids[i, : len(s)] = torch.as_tensor(s, dtype=torch.long)
            mask[i, : len(s)] = False
        return ids, mask

    def encode_sequence(self, token_ids: torch.Tensor, pad_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Hidden states ``(batch, length, dim)`` (a 1-D input gives ``(length, dim)``)."""
        single = token_ids.dim() == 1
        if single:
            token_ids = token_ids[None]
            pad_mask = None if pad_mask is None else pad_mask[None]
        t = token_ids.shape[1]
        if t > self.config.max_length:
            raise TruncationError(f"sequence of length {t} exceeds max length {self.config.max_length}")
        x = self.token_embedding(token_ids) + self.position_embedding.weight[:t]
        if pad_mask is not None and not pad_mask.any():
            pad_mask = None
        for block in self.blocks:
            x = block(x, pad_mask)
        return x[0] if single else x

    # -- structural operators ------------------------------------------------

    def attention_weights(self, branches: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        scores = torch.tanh(branches @ self.inter_weight.T + self.inter_bias) @ self.inter_context
        if mask is not None:
            scores = scores.masked_fill(mask, float("-inf"))
        return scores.softmax(dim=-1)

    def intersect(self, branches: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Attention-weighted sum of branch vectors: ``(n, d)`` or ``(batch, n, d)`` with padding ``mask``."""
        if branches.shape[-2] < 2:
            raise DataError("intersection needs at least two branches")
        w = self.attention_weights(branches, mask)
        return (w.unsqueeze(-1) * branches).sum(dim=-2)

    def union(self, branches: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Elementwise max over every branch and every maxout piece."""
        if branches.shape[-2] < 2:
            raise DataError("union needs at least two branches")
        pieces = torch.einsum("...nd,ked->...nke", branches, self.union_weight) + self.union_bias
        if mask is not None:
            pieces = pieces.masked_fill(mask[..., None, None], float("-inf"))
        return pieces.flatten(-3, -2).amax(dim=-2)

    # -- queries and candidates ------------------------------------------------

    def encode_queries(self, queries: Sequence[LinearizedQuery]) -> torch.Tensor:
        """Query embeddings ``(batch, dim)``."""
        ids, pad_mask = self._pad([q.token_ids for q in queries])
        hidden = self.encode_sequence(ids, pad_mask)
        b, t, _ = hidden.shape
        n_max = max(len(q.path_spans) for q in queries)
        pool = torch.zeros((b, n_max, t), dtype=hidden.dtype)
        branch_mask = torch.ones((b, n_max), dtype=torch.bool)
        for i, q in enumerate(queries):
            shared = range(*q.shared_span) if q.shared_span else range(0)
            for j, (start, end) in enumerate(q.path_spans):
                rows = list(range(start, end)) + list(shared)
                if not rows:
                    raise DataError("empty path span")
                pool[i, j, rows] = 1.0 / len(rows)
                branch_mask[i, j] = False
        branches = pool @ hidden

        out = branches[:, 0]
        for op, fn in (("intersection", self.intersect), ("union", self.union)):
            sel = [i for i, q in enumerate(queries) if q.operator == op]
            if sel:
                idx = torch.as_tensor(sel)
                combined = fn(branches[idx], branch_mask[idx])
                out = out.index_copy(0, idx, combined)
        return out

    def encode_query(self, query: LinearizedQuery) -> torch.Tensor:
        return self.encode_queries([query])[0]

    def encode_candidates(self, token_ids: Sequence[Sequence[int]]) -> torch.Tensor:
        """Entity embeddings ``(n, dim)``: mean hidden state over each sequence."""
        ids, pad_mask = self._pad(token_ids)
        hidden = self.encode_sequence(ids, pad_mask)
        keep = (~pad_mask).to(hidden.dtype).unsqueeze(-1)
        return (hidden * keep).sum(dim=1) / keep.sum(dim=1)

    def encode_candidate(self, token_ids: Sequence[int]) -> torch.Tensor:
        return self.encode_candidates([token_ids])[0]

    def logits(self, query_embeddings: torch.Tensor) -> torch.Tensor:
        if self.classifier is None:
            raise ModeError("model has no classification head (matching-only mode)")
        return self.classifier(query_embeddings)

    def classify(self, query_embeddings: torch.Tensor) -> torch.Tensor:
        """Softmax plausibility over the closed entity table."""
        return self.logits(query_embeddings).softmax(dim=-1)

    @torch.no_grad()
    def extend_vocabulary(self, new_size: int, word_start: int) -> None:
        """Grow the token table; new rows start at the mean of the trained word rows (ids >= ``word_start``)."""
        old = self.token_embedding.weight
        if new_size <= old.shape[0]:
            return
        table = nn.Embedding(new_size, old.shape[1], dtype=old.dtype)
        table.weight[: old.shape[0]] = old
        words = old[word_start:] if old.shape[0] > word_start else old
        table.weight[old.shape[0] :] = words.mean(dim=0)
        self.token_embedding = table
        self.config = ModelConfig(**{**self.config.to_dict(), "vocab_size": new_size})


def pool_path(hidden: torch.Tensor, span) -> torch.Tensor:
    """Mean of the hidden-state rows in ``[start, end)``."""
    start, end = span
    if not 0 <= start < end <= hidden.shape[0]:
        raise DataError(f"invalid span {span} for {hidden.shape[0]} positions")
    return hidden[start:end].mean(dim=0)
