"""Context encoder: self-attention over projected context vectors.

Input rows are the per-context vectors from the vectorizer. Document
rows get a learned distance embedding added in vector space (distance 0
is the current source sentence); metadata rows get none, since their
order carries no information. Rows are then projected to the model
dimension and run through pre-norm self-attention layers.

The self-attention uses query-key normalization: query and key rows are
L2-normalized before the dot product and the usual 1/sqrt(d) scaling is
replaced by one learned scalar per head, so every pre-softmax logit is
bounded by that scalar regardless of input magnitudes. Plain projected
sentence vectors can be large enough to blow up standard dot-product
scores; this keeps the first layer tame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .contexts import ContextSet

QKNORM_EPS = 1e-6


class DimensionMismatchError(ValueError):
    pass


class SeededDropout(nn.Module):
    """Dropout driven by an explicitly assigned generator.

    Keeps training runs reproducible without touching global RNG state;
    evaluation-mode forwards never draw from the generator.
    """

    def __init__(self, p: float):
        super().__init__()
        self.p = float(p)
        self.generator: torch.Generator | None = None

    def forward(self, x):
        if not self.training or self.p == 0.0:
            return x
        keep = (
            torch.rand(x.shape, generator=self.generator, device=x.device, dtype=x.dtype)
            >= self.p
        )
        return x * keep.to(x.dtype) / (1.0 - self.p)


def l2_normalize(x, eps: float = QKNORM_EPS):
    return x / x.norm(dim=-1, keepdim=True).clamp_min(eps)


def masked_softmax(logits, key_mask=None):
    """Softmax over the last dim; masked keys get zero weight.

    Rows with no valid key at all come out as all-zero weights rather
    than NaN, which realizes the "no context means no contribution"
    rule.
    """
    if key_mask is None:
        return torch.softmax(logits, dim=-1)
    neg = torch.finfo(logits.dtype).min
    logits = logits.masked_fill(~key_mask, neg)
    weights = torch.softmax(logits, dim=-1)
    any_valid = key_mask.any(dim=-1, keepdim=True)
    return weights * any_valid.to(weights.dtype)


def qknorm_attention(q, k, v, g, key_mask=None, eps: float = QKNORM_EPS,
                     return_logits: bool = False, weight_dropout=None):
    """Single attention with L2-normalized queries/keys and learned scale g.

    ``q``/``k``/``v`` are (..., n, d) head matrices; ``g`` broadcasts over
    the leading dims. Every pre-softmax logit lies in [-g, g].
    """
    if q.shape[-1] != k.shape[-1]:
        raise DimensionMismatchError(f"q dim {q.shape[-1]} != k dim {k.shape[-1]}")
    logits = g * (l2_normalize(q, eps) @ l2_normalize(k, eps).transpose(-2, -1))
    weights = masked_softmax(logits, key_mask)
    if weight_dropout is not None:
        weights = weight_dropout(weights)
    out = weights @ v
    if return_logits:
        return out, logits
    return out


def scaled_dot_attention(q, k, v, key_mask=None, weight_dropout=None):
    logits = (q @ k.transpose(-2, -1)) / (q.shape[-1] ** 0.5)
    weights = masked_softmax(logits, key_mask)
    if weight_dropout is not None:
        weights = weight_dropout(weights)
    return weights @ v


class MultiheadAttention(nn.Module):
    """Multi-head attention, optionally with QK-Norm in place of 1/sqrt(d)."""

    def __init__(self, d_model: int, heads: int, dropout: float = 0.0,
                 qknorm: bool = False, g_init: float = 1.0):
        super().__init__()
        if d_model % heads != 0:
            raise DimensionMismatchError(f"d_model {d_model} not divisible by {heads} heads")
        self.d_model = d_model
        self.heads = heads
        self.d_head = d_model // heads
        self.qknorm = qknorm
        self.wq = nn.Linear(d_model, d_model)
        self.wk = nn.Linear(d_model, d_model)
        self.wv = nn.Linear(d_model, d_model)
        self.wo = nn.Linear(d_model, d_model)
        self.drop = SeededDropout(dropout)
        if qknorm:
            self.g = nn.Parameter(torch.full((heads,), float(g_init)))

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.d_head).transpose(1, 2)

    def forward(self, query, kv, key_mask=None, causal: bool = False):
        b, nq, _ = query.shape
        nk = kv.shape[1]
        q = self._split(self.wq(query))
        k = self._split(self.wk(kv))
        v = self._split(self.wv(kv))
        mask = None
        if key_mask is not None:
            mask = key_mask[:, None, None, :].expand(b, 1, nq, nk)
        if causal:
            tri = torch.ones(nq, nk, dtype=torch.bool, device=query.device).tril()
            tri = tri[None, None]
            mask = tri if mask is None else mask & tri
        if self.qknorm:
            g = self.g.view(1, self.heads, 1, 1)
            out = qknorm_attention(q, k, v, g, key_mask=mask, weight_dropout=self.drop)
        else:
            out = scaled_dot_attention(q, k, v, key_mask=mask, weight_dropout=self.drop)
        out = out.transpose(1, 2).reshape(b, nq, self.d_model)
        out = self.wo(out)
        if key_mask is not None:
            # a query whose key set is entirely masked contributes nothing,
            # not the output bias
            out = out * mask.any(dim=-1).transpose(1, 2).to(out.dtype)
        return out


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, dropout: float = 0.0):
        super().__init__()
        self.lin1 = nn.Linear(d_model, d_ff)
        self.lin2 = nn.Linear(d_ff, d_model)
        self.drop = SeededDropout(dropout)

    def forward(self, x):
        return self.lin2(self.drop(torch.relu(self.lin1(x))))


class SelfAttentionLayer(nn.Module):
    """Pre-norm residual block: self-attention then feed-forward."""

    def __init__(self, d_model, heads, d_ff, dropout=0.0, qknorm=False, g_init=1.0):
        super().__init__()
        self.norm_attn = nn.LayerNorm(d_model)
        self.attn = MultiheadAttention(d_model, heads, dropout, qknorm=qknorm, g_init=g_init)
        self.norm_ffn = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_ff, dropout)
        self.drop = SeededDropout(dropout)

    def forward(self, x, key_mask=None, causal=False):
        h = self.norm_attn(x)
        x = x + self.drop(self.attn(h, h, key_mask=key_mask, causal=causal))
        x = x + self.drop(self.ffn(self.norm_ffn(x)))
        return x


@dataclass
class ContextBatch:
    """Padded batch of vectorized context sets.

    ``emb``: (B, K, r) float rows; ``pos_ids``: (B, K) distance per doc
    row, -1 for metadata and padding; ``mask``: (B, K) True on real rows.
    """

    emb: torch.Tensor
    pos_ids: torch.Tensor
    mask: torch.Tensor

    def __len__(self):
        return self.emb.shape[0]

    @property
    def is_empty(self) -> bool:
        return self.emb.shape[1] == 0 or not bool(self.mask.any())

    def to(self, dtype):
        return ContextBatch(self.emb.to(dtype), self.pos_ids, self.mask)


def vectorize_context_set(cs: ContextSet, backend) -> ContextSet:
    """Replace text items with backend embeddings; vector items pass through."""
    doc = tuple(
        (item if not isinstance(item, str) else backend.embed(item), dist)
        for item, dist in cs.doc
    )
    meta = tuple(item if not isinstance(item, str) else backend.embed(item) for item in cs.meta)
    return ContextSet(doc=doc, meta=meta, t=cs.t)


def context_rows(cs: ContextSet, r: int):
    """Single-sample assembly: (k, r) rows plus per-row distance ids (-1 = meta)."""
    rows = []
    pos_ids = []
    for item, dist in cs.items():
        vec = np.asarray(item, dtype=np.float32)
        if vec.shape != (r,):
            raise DimensionMismatchError(f"context vector shape {vec.shape} != ({r},)")
        rows.append(vec)
        pos_ids.append(-1 if dist is None else dist)
    if rows:
        emb = torch.from_numpy(np.stack(rows))
    else:
        emb = torch.zeros((0, r))
    return emb, torch.tensor(pos_ids, dtype=torch.long)


def collate_context_sets(sets, r: int) -> ContextBatch:
    """Pad a list of vectorized ContextSets into one ContextBatch."""
    per_sample = [context_rows(cs, r) for cs in sets]
    kmax = max((emb.shape[0] for emb, _ in per_sample), default=0)
    b = len(per_sample)
    emb = torch.zeros((b, kmax, r))
    pos_ids = torch.full((b, kmax), -1, dtype=torch.long)
    mask = torch.zeros((b, kmax), dtype=torch.bool)
    for i, (rows, ids) in enumerate(per_sample):
        k = rows.shape[0]
        emb[i, :k] = rows
        pos_ids[i, :k] = ids
        mask[i, :k] = True
    return ContextBatch(emb=emb, pos_ids=pos_ids, mask=mask)


def assemble(cs: ContextSet, pos_table) -> tuple[torch.Tensor, torch.Tensor]:
    """Distance embeddings added to doc rows, metadata untouched.

    Returns the (k, r) input matrix and its (all-True) row mask. The
    table holds one row per distance 0..t.
    """
    r = pos_table.weight.shape[1]
    emb, pos_ids = context_rows(cs, r)
    emb = emb.to(pos_table.weight.dtype)
    return _add_pos(emb, pos_ids, pos_table), torch.ones(emb.shape[0], dtype=torch.bool)


def _add_pos(emb, pos_ids, pos_table):
    has_pos = pos_ids >= 0
    safe = pos_ids.clamp_min(0)
    pos = pos_table(safe) * has_pos.unsqueeze(-1).to(emb.dtype)
    return emb + pos


class ContextEncoder(nn.Module):
    """Stack of QK-Norm self-attention layers over assembled context rows."""

    def __init__(self, r: int, d_model: int, layers: int, heads: int, d_ff: int,
                 t: int = 5, dropout: float = 0.0, g_init: float = 1.0,
                 use_pos: bool = True, bypass: bool = False):
        super().__init__()
        self.r = r
        self.t = t
        self.use_pos = use_pos
        self.bypass = bypass
        if use_pos:
            self.pos_table = nn.Embedding(t + 1, r)
        self.proj = nn.Linear(r, d_model)
        # bypass: projection output is handed straight to the decoder
        self.layers = nn.ModuleList(
            SelfAttentionLayer(d_model, heads, d_ff, dropout, qknorm=True, g_init=g_init)
            for _ in range(0 if bypass else layers)
        )
        if not bypass:
            self.norm_out = nn.LayerNorm(d_model)

    def forward(self, batch: ContextBatch):
        """Encode a padded context batch to (B, K, d_model) plus its mask."""
        emb = batch.emb.to(self.proj.weight.dtype)
        if self.use_pos:
            emb = _add_pos(emb, batch.pos_ids, self.pos_table)
        x = self.proj(emb)
        if not self.bypass:
            for layer in self.layers:
                x = layer(x, key_mask=batch.mask)
            x = self.norm_out(x)
        return x, batch.mask

    def encode_one(self, cs: ContextSet):
        """Convenience single-sample encode; items must already be vectors."""
        batch = collate_context_sets([cs], self.r)
        out, mask = self.forward(batch)
        return out[0], mask[0]
