"""Encoder-decoder translation model with pluggable context incorporation.

Five variants share one weight layout for their common parts:

* ``base`` / ``base_pm`` — plain transformer (the ``_pm`` flavour is wider
  and deeper on the source side).
* ``tagging`` — one learned embedding per known context string, prepended
  to the source encoder output; unseen strings map to a fallback row.
* ``novotney_cue`` — masked mean of the context-encoder output added to
  every decoder input embedding.
* ``mtcue`` — parallel cross-attention: the decoder attends to source and
  context sequences independently and sums the results.

Parameters are initialized per-tensor from (seed, tensor name), so two
variants built with the same seed hold bitwise-identical weights wherever
their names coincide.  That makes "contextual model with no context equals
the plain baseline" an exact statement rather than an approximate one.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .contexts import ContextSet
from .corpus import BOS_ID, EOS_ID, PAD_ID
from .encoder import (
    ContextBatch,
    ContextEncoder,
    MultiheadAttention,
    FeedForward,
    SeededDropout,
    SelfAttentionLayer,
    collate_context_sets,
    vectorize_context_set,
)
from .vectorizer import _seeded_hash64

VARIANTS = ("base", "base_pm", "tagging", "novotney_cue", "mtcue")

#: variants that own a context encoder
_CONTEXTUAL = ("novotney_cue", "mtcue")


class ModelError(Exception):
    pass


class UnknownTagError(ModelError, KeyError):
    """A tagging model met a context string outside its tag vocabulary."""


class CheckpointError(ModelError):
    pass


class ShapeMismatchError(ModelError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description; defaults are the full-scale figures.

    ``for_variant`` applies the per-variant layer/FFN overrides; ``desk``
    scales everything down to laptop size while keeping the ratios.
    """

    variant: str
    src_vocab: int
    tgt_vocab: int
    d_model: int = 512
    heads: int = 8
    src_layers: int = 6
    dec_layers: int = 6
    cxt_layers: int = 6
    ffn_src: int = 2048
    ffn_dec: int = 2048
    ffn_cxt: int = 2048
    t: int = 5
    r: int = 384
    max_len: int = 512
    dropout: float = 0.1
    g_init: float = 1.0
    use_pos: bool = True
    no_context_encoder: bool = False
    source_at_zero: bool = False
    tag_vocab: Optional[tuple] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ModelError(f"unknown variant {self.variant!r}; choose one of {VARIANTS}")
        if self.d_model % self.heads != 0:
            raise ModelError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.src_vocab < 4 or self.tgt_vocab < 4:
            raise ModelError("vocabularies must at least cover the special ids")
        if self.tag_vocab is not None:
            if self.variant != "tagging":
                raise ModelError("tag_vocab is only meaningful for the tagging variant")
            object.__setattr__(self, "tag_vocab", tuple(self.tag_vocab))

    @property
    def uses_context(self) -> bool:
        return self.variant in _CONTEXTUAL

    @classmethod
    def for_variant(cls, variant: str, src_vocab: int, tgt_vocab: int, **overrides) -> "ModelConfig":
        fields = dict(variant=variant, src_vocab=src_vocab, tgt_vocab=tgt_vocab)
        if variant in ("base_pm", "tagging"):
            fields.update(src_layers=10, ffn_src=4096)
        fields.update(overrides)
        return cls(**fields)

    @classmethod
    def desk(cls, variant: str, src_vocab: int, tgt_vocab: int, **overrides) -> "ModelConfig":
        """Small configuration trainable on a CPU in minutes."""
        fields = dict(
            variant=variant, src_vocab=src_vocab, tgt_vocab=tgt_vocab,
            d_model=64, heads=4, src_layers=2, dec_layers=2, cxt_layers=2,
            ffn_src=256, ffn_dec=256, ffn_cxt=256, r=64, max_len=128,
        )
        if variant in ("base_pm", "tagging"):
            fields.update(src_layers=4, ffn_src=512)
        fields.update(overrides)
        return cls(**fields)


def sinusoid_table(n: int, d: int) -> torch.Tensor:
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(i / 2.0) / d)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return torch.from_numpy(table.astype(np.float32))


def masked_mean(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean of x (B, K, d) over the K rows where mask (B, K) is True.

    A sample with no valid rows yields a zero vector.
    """
    w = mask.unsqueeze(-1).to(x.dtype)
    return (x * w).sum(dim=1) / w.sum(dim=1).clamp_min(1.0)


class DecoderLayer(nn.Module):
    """Pre-norm decoder block; optionally attends to a context sequence
    in parallel with the source and sums the two attention outputs."""

    def __init__(self, d_model: int, heads: int, d_ff: int, dropout: float = 0.0,
                 parallel_context: bool = False):
        super().__init__()
        self.norm_self = nn.LayerNorm(d_model)
        self.self_attn = MultiheadAttention(d_model, heads, dropout)
        self.norm_cross = nn.LayerNorm(d_model)
        self.src_attn = MultiheadAttention(d_model, heads, dropout)
        self.ctx_attn = MultiheadAttention(d_model, heads, dropout) if parallel_context else None
        self.norm_ffn = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_ff, dropout)
        self.drop = SeededDropout(dropout)

    def forward(self, x, memory, memory_mask=None, ctx=None, ctx_mask=None):
        h = self.norm_self(x)
        x = x + self.drop(self.self_attn(h, h, causal=True))
        h = self.norm_cross(x)
        attended = self.src_attn(h, memory, key_mask=memory_mask)
        if self.ctx_attn is not None and ctx is not None:
            attended = attended + self.ctx_attn(h, ctx, key_mask=ctx_mask)
        x = x + self.drop(attended)
        x = x + self.drop(self.ffn(self.norm_ffn(x)))
        return x


class TranslationModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self._scale = math.sqrt(d)
        self.src_embed = nn.Embedding(cfg.src_vocab, d, padding_idx=PAD_ID)
        self.tgt_embed = nn.Embedding(cfg.tgt_vocab, d, padding_idx=PAD_ID)
        self.register_buffer("sinusoid", sinusoid_table(cfg.max_len, d), persistent=False)
        self.emb_drop = SeededDropout(cfg.dropout)
        self.src_stack = nn.ModuleList(
            SelfAttentionLayer(d, cfg.heads, cfg.ffn_src, cfg.dropout)
            for _ in range(cfg.src_layers)
        )
        self.src_norm = nn.LayerNorm(d)
        self.dec_stack = nn.ModuleList(
            DecoderLayer(d, cfg.heads, cfg.ffn_dec, cfg.dropout,
                         parallel_context=cfg.variant == "mtcue")
            for _ in range(cfg.dec_layers)
        )
        self.dec_norm = nn.LayerNorm(d)
        if cfg.uses_context:
            self.ctx_encoder = ContextEncoder(
                cfg.r, d, cfg.cxt_layers, cfg.heads, cfg.ffn_cxt, t=cfg.t,
                dropout=cfg.dropout, g_init=cfg.g_init, use_pos=cfg.use_pos,
                bypass=cfg.no_context_encoder,
            )
        if cfg.variant == "tagging":
            tags = cfg.tag_vocab or ()
            self._tag_index = {s: i for i, s in enumerate(tags)}
            # final row is the fallback for strings outside the tag vocabulary
            self.tag_table = nn.Embedding(len(tags) + 1, d)

    # -- embedding ---------------------------------------------------------

    def _embed(self, table: nn.Embedding, ids: torch.Tensor, extra=None) -> torch.Tensor:
        n = ids.shape[1]
        if n > self.cfg.max_len:
            raise ModelError(f"sequence length {n} exceeds max_len {self.cfg.max_len}")
        x = table(ids) * self._scale + self.sinusoid[:n]
        if extra is not None:
            x = x + extra
        return self.emb_drop(x)

    # -- source / memory ---------------------------------------------------

    def encode_source(self, src: torch.Tensor):
        mask = src.ne(PAD_ID)
        x = self._embed(self.src_embed, src)
        for layer in self.src_stack:
            x = layer(x, key_mask=mask)
        return self.src_norm(x), mask

    def tag_id(self, text: str, strict: bool = False) -> int:
        idx = self._tag_index.get(text)
        if idx is None:
            if strict:
                raise UnknownTagError(text)
            return len(self._tag_index)
        return idx

    def tag_ids_for(self, context_texts: Sequence[Sequence[str]], strict: bool = False) -> torch.Tensor:
        """Map per-sample context strings to a padded (B, K) id tensor (-1 pad)."""
        kmax = max((len(ts) for ts in context_texts), default=0)
        out = torch.full((len(context_texts), kmax), -1, dtype=torch.long)
        for i, ts in enumerate(context_texts):
            for j, text in enumerate(ts):
                if not isinstance(text, str):
                    raise ModelError("tagging consumes context strings, not vectors")
                out[i, j] = self.tag_id(text, strict=strict)
        return out

    def build_memory(self, src: torch.Tensor, tag_ids: Optional[torch.Tensor] = None):
        """Source encoder output, with tag embeddings prepended for tagging."""
        memory, mask = self.encode_source(src)
        if self.cfg.variant == "tagging" and tag_ids is not None and tag_ids.shape[1] > 0:
            tag_mask = tag_ids.ge(0)
            tags = self.tag_table(tag_ids.clamp_min(0))
            memory = torch.cat([tags, memory], dim=1)
            mask = torch.cat([tag_mask, mask], dim=1)
        return memory, mask

    # -- context -----------------------------------------------------------

    def encode_context(self, ctx: Optional[ContextBatch]):
        if not self.cfg.uses_context or ctx is None or ctx.is_empty:
            return None, None
        return self.ctx_encoder(ctx)

    def context_summary(self, ctx: ContextBatch) -> torch.Tensor:
        """Masked mean of the encoded context rows, one vector per sample."""
        out, mask = self.ctx_encoder(ctx)
        return masked_mean(out, mask)

    # -- full pass ---------------------------------------------------------

    def forward(self, src: torch.Tensor, tgt_in: torch.Tensor,
                ctx: Optional[ContextBatch] = None,
                tag_ids: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Next-token logits (B, Lt, tgt_vocab) for teacher-forced inputs."""
        memory, memory_mask = self.build_memory(src, tag_ids)
        ctx_out = ctx_mask = extra = None
        if self.cfg.uses_context and ctx is not None and not ctx.is_empty:
            if self.cfg.variant == "novotney_cue":
                extra = self.context_summary(ctx).unsqueeze(1)
            else:
                ctx_out, ctx_mask = self.ctx_encoder(ctx)
        x = self._embed(self.tgt_embed, tgt_in, extra=extra)
        for layer in self.dec_stack:
            x = layer(x, memory, memory_mask, ctx_out, ctx_mask)
        x = self.dec_norm(x)
        return x @ self.tgt_embed.weight.t()


def build_model(cfg: ModelConfig, seed: int = 0) -> TranslationModel:
    model = TranslationModel(cfg)
    init_parameters(model, seed)
    return model


# -- deterministic initialization -----------------------------------------


def _tensor_generator(seed: int, name: str) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(_seeded_hash64(seed, name) & 0x7FFF_FFFF_FFFF_FFFF)
    return gen


def init_parameters(model: nn.Module, seed: int) -> None:
    """Reset every parameter from a generator keyed by (seed, tensor name).

    Tensors with equal names come out equal regardless of what else the
    model contains; per-head attention scales keep their constructor value.
    """
    with torch.no_grad():
        for name, module in model.named_modules():
            if isinstance(module, nn.Linear):
                fan_out, fan_in = module.weight.shape
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                gen = _tensor_generator(seed, f"{name}.weight")
                module.weight.uniform_(-bound, bound, generator=gen)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.Embedding):
                gen = _tensor_generator(seed, f"{name}.weight")
                module.weight.normal_(0.0, module.embedding_dim ** -0.5, generator=gen)
                if module.padding_idx is not None:
                    module.weight[module.padding_idx].zero_()
            elif isinstance(module, nn.LayerNorm):
                module.weight.fill_(1.0)
                module.bias.zero_()


def set_dropout_generator(model: nn.Module, seed: int) -> int:
    """Give every dropout module its own named RNG stream; returns how many."""
    count = 0
    for name, module in model.named_modules():
        if isinstance(module, SeededDropout):
            module.generator = _tensor_generator(seed, f"dropout:{name}")
            count += 1
    return count


# -- decoding --------------------------------------------------------------


def greedy_decode(model: TranslationModel, src: torch.Tensor,
                  ctx: Optional[ContextBatch] = None,
                  tag_ids: Optional[torch.Tensor] = None,
                  max_len: int = 64):
    """Batched argmax decoding; returns one id list per sample, specials
    stripped.  Deterministic given weights."""
    if max_len < 1:
        raise ModelError("max_len must be >= 1")
    max_len = min(max_len, model.cfg.max_len - 1)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            b = src.shape[0]
            ys = torch.full((b, 1), BOS_ID, dtype=torch.long)
            done = torch.zeros(b, dtype=torch.bool)
            for _ in range(max_len):
                logits = model(src, ys, ctx=ctx, tag_ids=tag_ids)[:, -1]
                step = logits.argmax(dim=-1)
                step = torch.where(done, torch.full_like(step, PAD_ID), step)
                ys = torch.cat([ys, step.unsqueeze(1)], dim=1)
                done |= step.eq(EOS_ID)
                if bool(done.all()):
                    break
    finally:
        model.train(was_training)
    outs = []
    for row in ys[:, 1:].tolist():
        ids = []
        for tok in row:
            if tok == EOS_ID:
                break
            if tok not in (PAD_ID, BOS_ID):
                ids.append(tok)
        outs.append(ids)
    return outs


def forward_sample(model: TranslationModel, src_ids: Sequence[int],
                   cs: Optional[ContextSet] = None,
                   tgt_prefix: Optional[Sequence[int]] = None,
                   backend=None, strict_tags: bool = False) -> torch.Tensor:
    """Single-sample convenience wrapper: next-token logits for a prefix.

    ``cs`` may hold raw strings (vectorized through ``backend``) or
    pre-vectorized rows; tagging models read the strings directly.
    """
    src = torch.tensor([list(src_ids)], dtype=torch.long)
    prefix = list(tgt_prefix) if tgt_prefix else [BOS_ID]
    tgt = torch.tensor([prefix], dtype=torch.long)
    ctx = tag_ids = None
    if cs is not None and not cs.is_empty:
        if model.cfg.variant == "tagging":
            tag_ids = model.tag_ids_for([list(cs.texts())], strict=strict_tags)
        elif model.cfg.uses_context:
            vec = cs
            if any(isinstance(item, str) for item, _ in cs.items()):
                if backend is None:
                    raise ModelError("string contexts need an embedding backend")
                vec = vectorize_context_set(cs, backend)
            ctx = collate_context_sets([vec], model.cfg.r)
    logits = model(src, tgt, ctx=ctx, tag_ids=tag_ids)
    return logits[0, -1]


# -- checkpoints -----------------------------------------------------------

_LEN = struct.Struct("<I")
_NAME_LEN = struct.Struct("<H")
_NDIM = struct.Struct("<B")


def save_checkpoint(model: TranslationModel, path, extra: Optional[dict] = None) -> None:
    """Binary checkpoint: [u32 json length][config JSON][tensors].

    Tensors are sorted lexicographically by state-dict name and stored as
    [u16 name length][name utf-8][u8 ndim][u32 dims...][float32 LE data].
    """
    doc = {"model": dataclasses.asdict(model.cfg)}
    if doc["model"]["tag_vocab"] is not None:
        doc["model"]["tag_vocab"] = list(doc["model"]["tag_vocab"])
    if extra:
        doc.update(extra)
    blob = json.dumps(doc, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_LEN.pack(len(blob)))
        fh.write(blob)
        for name, tensor in sorted(model.state_dict().items()):
            arr = np.ascontiguousarray(
                tensor.detach().cpu().to(torch.float32).numpy(), dtype="<f4"
            )
            encoded = name.encode("utf-8")
            fh.write(_NAME_LEN.pack(len(encoded)))
            fh.write(encoded)
            fh.write(_NDIM.pack(arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def read_checkpoint(path):
    """Parse a checkpoint into (config document, name→float32 array)."""
    tensors = {}
    with open(path, "rb") as fh:
        (json_len,) = _LEN.unpack(_read_exact(fh, _LEN.size))
        try:
            doc = json.loads(_read_exact(fh, json_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"bad checkpoint header: {exc}") from exc
        while True:
            head = fh.read(_NAME_LEN.size)
            if not head:
                break
            if len(head) != _NAME_LEN.size:
                raise CheckpointError("truncated checkpoint")
            (name_len,) = _NAME_LEN.unpack(head)
            name = _read_exact(fh, name_len).decode("utf-8")
            (ndim,) = _NDIM.unpack(_read_exact(fh, _NDIM.size))
            dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
            data = _read_exact(fh, 4 * count)
            tensors[name] = np.frombuffer(data, dtype="<f4").reshape(dims).copy()
    if not isinstance(doc, dict) or "model" not in doc:
        raise CheckpointError("checkpoint header lacks a model config")
    return doc, tensors


def config_from_doc(doc: dict) -> ModelConfig:
    fields = dict(doc["model"])
    if fields.get("tag_vocab") is not None:
        fields["tag_vocab"] = tuple(fields["tag_vocab"])
    try:
        return ModelConfig(**fields)
    except TypeError as exc:
        raise CheckpointError(f"bad model config in checkpoint: {exc}") from exc


def load_checkpoint(path):
    """Rebuild the model stored at ``path``; returns (model, header doc)."""
    doc, tensors = read_checkpoint(path)
    model = TranslationModel(config_from_doc(doc))
    state = {name: torch.from_numpy(arr) for name, arr in tensors.items()}
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise ShapeMismatchError(str(exc)) from exc
    return model, doc


# -- bookkeeping -----------------------------------------------------------


def count_parameters(cfg: ModelConfig) -> int:
    """Closed-form parameter count; must match the built model exactly."""
    d = cfg.d_model

    def attn() -> int:
        return 4 * (d * d + d)

    def ln() -> int:
        return 2 * d

    def ffn(width: int) -> int:
        return d * width + width + width * d + d

    total = cfg.src_vocab * d + cfg.tgt_vocab * d  # output projection is tied
    total += cfg.src_layers * (attn() + ffn(cfg.ffn_src) + 2 * ln()) + ln()
    dec_layer = 2 * attn() + ffn(cfg.ffn_dec) + 3 * ln()
    if cfg.variant == "mtcue":
        dec_layer += attn()
    total += cfg.dec_layers * dec_layer + ln()
    if cfg.uses_context:
        total += cfg.r * d + d
        if cfg.use_pos:
            total += (cfg.t + 1) * cfg.r
        if not cfg.no_context_encoder:
            total += cfg.cxt_layers * (attn() + cfg.heads + ffn(cfg.ffn_cxt) + 2 * ln())
            total += ln()
    if cfg.variant == "tagging":
        total += (len(cfg.tag_vocab or ()) + 1) * d
    return total


def count_torch_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
