"""Training loop: token-budget batching, inverse-sqrt Adam schedule,
context dropout, early stopping on validation loss, fine-tuning.

Everything observable (loss curves, checkpoints, batch composition) is a
pure function of (seed, data, config).  Three RNG streams exist and never
mix: data order + context dropout (one numpy generator), per-module torch
dropout masks (assigned by name), and parameter init (handled in model).
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .contexts import ContextSet
from .corpus import PAD_ID, context_set_for
from .encoder import ContextBatch, collate_context_sets, vectorize_context_set
from .model import (
    ModelConfig,
    ShapeMismatchError,
    TranslationModel,
    build_model,
    read_checkpoint,
    save_checkpoint,
    set_dropout_generator,
)
from .vectorizer import _seeded_hash64


class TrainerError(Exception):
    pass


class NonFiniteLossError(TrainerError):
    """Loss turned NaN/inf; message carries epoch and step diagnostics."""


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    batch_tokens: int = 4096
    warmup_steps: int = 4000
    patience: int = 5
    context_dropout_p: float = 0.1
    seed: int = 0
    max_epochs: int = 100
    microbatch_samples: int = 64
    freeze_src_encoder: bool = False
    strict_tags: bool = False

    def __post_init__(self):
        if self.patience < 1:
            raise TrainerError("patience must be >= 1")
        if not 0.0 <= self.context_dropout_p < 1.0:
            raise TrainerError("context_dropout_p must lie in [0, 1)")
        if self.learning_rate <= 0 or self.batch_tokens < 1:
            raise TrainerError("learning_rate and batch_tokens must be positive")


@dataclass
class EncodedSample:
    src: list
    tgt: list
    cs: ContextSet = ContextSet()


@dataclass
class TrainData:
    train: list
    valid: list


class Batch(NamedTuple):
    src: torch.Tensor
    tgt_in: torch.Tensor
    tgt_out: torch.Tensor
    ctx: Optional[ContextBatch]
    tag_ids: Optional[torch.Tensor]
    ntokens: int


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    valid_loss: float
    seconds: float


@dataclass
class TrainResult:
    best_path: Path
    log_path: Path
    history: list = field(default_factory=list)
    best_valid: float = math.inf
    best_epoch: int = 0
    stopped_epoch: int = 0


def encode_dataset(samples, src_tok, tgt_tok, cfg: ModelConfig, backend=None):
    """Tokenize samples and attach per-variant context carriers.

    Contextual variants get vectorized rows (tagging keeps the raw strings
    for its lookup table); plain baselines carry an empty set.
    """
    out = []
    for s in samples:
        src = _clip(src_tok.encode(s.src), cfg.max_len)
        tgt = _clip(tgt_tok.encode(s.tgt), cfg.max_len)
        cs = context_set_for(s, t=cfg.t, source_at_zero=cfg.source_at_zero)
        if cfg.variant == "tagging":
            pass
        elif cfg.uses_context:
            if not cs.is_empty:
                if backend is None:
                    raise TrainerError("contextual variant needs an embedding backend")
                cs = vectorize_context_set(cs, backend)
        else:
            cs = ContextSet()
        out.append(EncodedSample(src=src, tgt=tgt, cs=cs))
    return out


def _clip(ids, max_len):
    if len(ids) > max_len:
        return ids[: max_len - 1] + [ids[-1]]
    return ids


def apply_context_dropout(cs: ContextSet, p: float, rng) -> ContextSet:
    """Drop each context row independently with probability p (training only)."""
    if p <= 0.0 or cs.is_empty:
        return cs
    keep = rng.random(len(cs)) >= p
    doc = tuple(pair for pair, k in zip(cs.doc, keep[: len(cs.doc)]) if k)
    meta = tuple(m for m, k in zip(cs.meta, keep[len(cs.doc):]) if k)
    return ContextSet(doc=doc, meta=meta, t=cs.t)


def _pad_rows(rows, pad_value=PAD_ID) -> torch.Tensor:
    width = max(len(r) for r in rows)
    out = torch.full((len(rows), width), pad_value, dtype=torch.long)
    for i, r in enumerate(rows):
        out[i, : len(r)] = torch.tensor(r, dtype=torch.long)
    return out


def collate(model: TranslationModel, samples: Sequence[EncodedSample],
            dropout_p: float = 0.0, rng=None, strict_tags: bool = False) -> Batch:
    cfg = model.cfg
    css = [s.cs for s in samples]
    if dropout_p > 0.0 and rng is not None:
        css = [apply_context_dropout(cs, dropout_p, rng) for cs in css]
    ctx = tag_ids = None
    if cfg.variant == "tagging":
        tag_ids = model.tag_ids_for([list(cs.texts()) for cs in css], strict=strict_tags)
    elif cfg.uses_context:
        ctx = collate_context_sets(css, cfg.r)
    src = _pad_rows([s.src for s in samples])
    tgt_in = _pad_rows([s.tgt[:-1] for s in samples])
    tgt_out = _pad_rows([s.tgt[1:] for s in samples])
    ntokens = sum(len(s.tgt) - 1 for s in samples)
    return Batch(src, tgt_in, tgt_out, ctx, tag_ids, ntokens)


def _batch_loss_sum(model, batch: Batch) -> torch.Tensor:
    logits = model(batch.src, batch.tgt_in, ctx=batch.ctx, tag_ids=batch.tag_ids)
    return F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]),
        batch.tgt_out.reshape(-1),
        ignore_index=PAD_ID,
        reduction="sum",
    )


def evaluate_loss(model, samples, microbatch_samples: int = 64) -> float:
    """Mean validation cross-entropy in nats per target token."""
    was = model.training
    model.eval()
    total, tokens = 0.0, 0
    try:
        with torch.no_grad():
            for i in range(0, len(samples), microbatch_samples):
                batch = collate(model, samples[i: i + microbatch_samples])
                total += float(_batch_loss_sum(model, batch))
                tokens += batch.ntokens
    finally:
        model.train(was)
    return total / max(tokens, 1)


def lr_at(step: int, base: float, warmup: int) -> float:
    return base * min(step / warmup, math.sqrt(warmup / step))


def qk_scale_init(context_lengths, d_head: int) -> float:
    """Initial per-head attention scale from the long tail of context sizes."""
    if len(context_lengths) == 0:
        return 1.0
    tail = float(np.percentile(np.asarray(context_lengths, dtype=np.float64), 97.5))
    if tail < 2.0:
        return 1.0
    return max(1.0, math.log2(tail) * math.sqrt(d_head))


def train(model: TranslationModel, data: TrainData, tc: TrainConfig, out_dir) -> TrainResult:
    """Fit, log one CSV row per epoch, keep the best checkpoint, stop when
    ``patience`` consecutive epochs fail to beat the best validation loss."""
    if not data.train or not data.valid:
        raise TrainerError("train and valid splits must be nonempty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    best_path = out_dir / "best.ckpt"
    log_path = out_dir / "metrics.csv"

    set_dropout_generator(model, tc.seed)
    data_rng = np.random.default_rng(_seeded_hash64(tc.seed, "data-order") & (2 ** 63 - 1))
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=tc.learning_rate, betas=(0.9, 0.98), eps=1e-9)

    result = TrainResult(best_path=best_path, log_path=log_path)
    step = 0
    bad_epochs = 0
    with open(log_path, "w", newline="") as log_fh:
        writer = csv.writer(log_fh)
        writer.writerow(["epoch", "train_loss", "valid_loss", "seconds"])
        for epoch in range(1, tc.max_epochs + 1):
            t0 = time.monotonic()
            model.train()
            order = data_rng.permutation(len(data.train))
            loss_sum, token_sum = 0.0, 0
            pending_tokens = 0
            opt.zero_grad()
            n = len(order)
            for lo in range(0, n, tc.microbatch_samples):
                chunk = [data.train[i] for i in order[lo: lo + tc.microbatch_samples]]
                batch = collate(model, chunk, dropout_p=tc.context_dropout_p,
                                rng=data_rng, strict_tags=tc.strict_tags)
                loss = _batch_loss_sum(model, batch)
                value = float(loss.detach())
                if not math.isfinite(value):
                    raise NonFiniteLossError(
                        f"non-finite loss {value} at epoch {epoch}, step {step + 1}")
                loss.backward()
                loss_sum += value
                token_sum += batch.ntokens
                pending_tokens += batch.ntokens
                if pending_tokens >= tc.batch_tokens or lo + tc.microbatch_samples >= n:
                    step += 1
                    scale = 1.0 / max(pending_tokens, 1)
                    for p in params:
                        if p.grad is not None:
                            p.grad.mul_(scale)
                    for group in opt.param_groups:
                        group["lr"] = lr_at(step, tc.learning_rate, tc.warmup_steps)
                    opt.step()
                    opt.zero_grad()
                    pending_tokens = 0
            train_loss = loss_sum / max(token_sum, 1)
            valid_loss = evaluate_loss(model, data.valid, tc.microbatch_samples)
            seconds = time.monotonic() - t0
            stats = EpochStats(epoch, train_loss, valid_loss, seconds)
            result.history.append(stats)
            writer.writerow([epoch, f"{train_loss:.6f}", f"{valid_loss:.6f}", f"{seconds:.3f}"])
            log_fh.flush()
            if valid_loss < result.best_valid:
                result.best_valid = valid_loss
                result.best_epoch = epoch
                bad_epochs = 0
                save_checkpoint(model, best_path, extra={
                    "epoch": epoch, "valid_loss": valid_loss, "seed": tc.seed})
            else:
                bad_epochs += 1
            result.stopped_epoch = epoch
            if bad_epochs >= tc.patience:
                break
    return result


_SRC_SIDE = ("src_embed.", "src_stack.", "src_norm.")
_SHARED = _SRC_SIDE + ("tgt_embed.", "dec_stack.", "dec_norm.")


def load_pretrained_parts(model: TranslationModel, tensors: dict) -> int:
    """Copy source-encoder/decoder tensors from a checkpoint dump into a
    (possibly contextual) model; context parameters stay as initialized."""
    state = model.state_dict()
    loaded = 0
    with torch.no_grad():
        for name, arr in tensors.items():
            if not name.startswith(_SHARED) or name not in state:
                continue
            dst = state[name]
            if tuple(dst.shape) != arr.shape:
                raise ShapeMismatchError(
                    f"{name}: checkpoint {arr.shape} vs model {tuple(dst.shape)}")
            dst.copy_(torch.from_numpy(arr))
            loaded += 1
    model.load_state_dict(state)
    return loaded


def freeze_source_encoder(model: TranslationModel) -> int:
    frozen = 0
    for name, p in model.named_parameters():
        if name.startswith(_SRC_SIDE):
            p.requires_grad_(False)
            frozen += 1
    return frozen


def fine_tune(base_checkpoint, cfg: ModelConfig, data: TrainData, tc: TrainConfig,
              out_dir) -> TrainResult:
    """Warm-start from a plain-translation checkpoint: shared tensors are
    loaded, context encoder and projection start fresh, then train()."""
    _, tensors = read_checkpoint(base_checkpoint)
    model = build_model(cfg, seed=tc.seed)
    load_pretrained_parts(model, tensors)
    if tc.freeze_src_encoder:
        freeze_source_encoder(model)
    return train(model, data, tc, out_dir)
