"""Evaluation bench: corpus BLEU, a synthetic attribute-control benchmark,
an ablation runner, and a context-representation probe.

The control benchmark is a hermetic stand-in for annotated-attribute
translation corpora.  A toy bijective word translation carries four
attributes (speaker gender, interlocutor gender, interlocutor number,
formality) whose 38 valid combinations are expressed as target-side marker
tokens; contexts describing the attributes are delivered either as natural
sentences (hashed into embeddings) or as Gaussian cluster draws keyed by
synthetic strings.  Supervision — how many training samples carry
contexts — is the experiment's independent variable.
"""

from __future__ import annotations

import dataclasses
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch

from .contexts import ContextSet
from .corpus import SampleRecord, WordTokenizer
from .encoder import collate_context_sets, vectorize_context_set
from .model import ModelConfig, TranslationModel, build_model, greedy_decode
from .trainer import (
    TrainConfig,
    TrainData,
    collate,
    encode_dataset,
    train,
)
from .vectorizer import (
    DiscreteLookupBackend,
    HashNGramBackend,
    PrecomputedBackend,
    _seeded_hash64,
)


class EvalError(Exception):
    pass


class EmptyCorpusError(EvalError):
    pass


# -- BLEU ------------------------------------------------------------------


def _tokens(text_or_tokens) -> list:
    if isinstance(text_or_tokens, str):
        return text_or_tokens.split()
    return list(text_or_tokens)


def _ngrams(tokens: list, n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: Sequence, references: Sequence) -> float:
    """Corpus BLEU: clipped 4-gram precisions, geometric mean, brevity
    penalty.  Any zero precision short-circuits the score to 0."""
    if len(hypotheses) != len(references):
        raise EvalError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise EmptyCorpusError("empty corpus")
    matched = [0] * 4
    possible = [0] * 4
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h, r = _tokens(hyp), _tokens(ref)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, 5):
            counts = _ngrams(h, n)
            refs = _ngrams(r, n)
            possible[n - 1] += max(len(h) - n + 1, 0)
            matched[n - 1] += sum(min(c, refs[g]) for g, c in counts.items())
    if hyp_len == 0:
        return 0.0
    log_sum = 0.0
    for m, p in zip(matched, possible):
        if m == 0 or p == 0:
            return 0.0
        log_sum += 0.25 * math.log(m / p)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_sum)


# -- attribute inventory ---------------------------------------------------

UNK_CLASS = "unk"


class Combination(NamedTuple):
    speaker: str
    il_gender: str
    il_number: str
    formality: str


#: attribute name → marked classes (every attribute also admits "unk"
#: except formality, which is always marked)
ATTRIBUTES = (
    ("speaker", ("masc", "fem")),
    ("il_gender", ("masc", "fem", "mixed")),
    ("il_number", ("one", "many")),
    ("formality", ("formal", "informal")),
)

#: the seven expressible interlocutor states
_INTERLOCUTORS = (
    ("masc", "one"), ("fem", "one"), ("masc", "many"), ("fem", "many"),
    ("mixed", "many"), (UNK_CLASS, "one"), (UNK_CLASS, UNK_CLASS),
)


def is_valid(combo: Combination) -> bool:
    if combo.formality not in ("formal", "informal"):
        return False
    if (combo.il_gender, combo.il_number) not in _INTERLOCUTORS:
        return False
    if combo.speaker not in ("masc", "fem", UNK_CLASS):
        return False
    # a line with no gender information at all is inexpressible
    return not (combo.speaker == UNK_CLASS and combo.il_gender == UNK_CLASS)


def valid_combinations() -> tuple:
    out = []
    for speaker in ("masc", "fem", UNK_CLASS):
        for il_gender, il_number in _INTERLOCUTORS:
            for formality in ("formal", "informal"):
                combo = Combination(speaker, il_gender, il_number, formality)
                if is_valid(combo):
                    out.append(combo)
    return tuple(out)


def markers_for(combo: Combination) -> list:
    return [f"<{name}={value}>" for (name, _), value in zip(ATTRIBUTES, combo)]


def extract_markers(tokens: Sequence[str]) -> dict:
    """Parse ``<name=value>`` tokens into an attribute → class map."""
    out = {}
    for tok in tokens:
        if tok.startswith("<") and tok.endswith(">") and "=" in tok:
            name, _, value = tok[1:-1].partition("=")
            out[name] = value
    return out


# -- context text templates ------------------------------------------------

#: per (attribute, class) a distinctive keyword phrase; stems chosen to
#: avoid cross-class character-n-gram collisions (no "man"/"woman" traps)
_CLASS_PHRASES = {
    ("speaker", "masc"): "speaker voice reads masculine guy",
    ("speaker", "fem"): "speaker voice reads feminine lady",
    ("il_gender", "masc"): "addressed toward masculine fellows",
    ("il_gender", "fem"): "addressed toward feminine gals",
    ("il_gender", "mixed"): "addressed toward blended assortment",
    ("il_number", "one"): "audience counts lone individual",
    ("il_number", "many"): "audience counts numerous crowd",
    ("formality", "formal"): "register kept ceremonious polite",
    ("formality", "informal"): "register kept breezy slangy",
}

#: lexical variants = phrase + tail; the last two tails are reserved for
#: held-out evaluation and never appear in training contexts
_VARIANT_TAILS = ("", "here", "right now", "in this scene", "throughout", "evidently")
TRAIN_VARIANTS = (0, 1, 2, 3)
HELDOUT_VARIANTS = (4, 5)


def context_text(attribute: str, cls: str, variant: int) -> str:
    phrase = _CLASS_PHRASES[(attribute, cls)]
    tail = _VARIANT_TAILS[variant]
    return f"{phrase} {tail}".strip()


def combo_context_texts(combo: Combination, variants: Sequence[int]) -> tuple:
    """One context sentence per marked attribute; unmarked ones stay silent."""
    texts = []
    i = 0
    for (name, _), value in zip(ATTRIBUTES, combo):
        if value != UNK_CLASS:
            texts.append(context_text(name, value, variants[i % len(variants)]))
            i += 1
    return tuple(texts)


# -- supervision ladder ----------------------------------------------------


def supervision_counts(total, n_combos: int = 38) -> list:
    """Spread ``total`` annotated samples over combinations as evenly as
    the integer allows (counts differ by at most one)."""
    if total == "full":
        raise EvalError("full supervision has no per-combination quota")
    total = int(total)
    if total < 0:
        raise EvalError("supervision total must be >= 0")
    base, rem = divmod(total, n_combos)
    return [base + 1 if i < rem else base for i in range(n_combos)]


# -- task construction -----------------------------------------------------


@dataclass
class ControlSpec:
    n_train: int = 20000
    n_valid: int = 950
    n_test: int = 950
    supervision: object = "full"     # "full" or an int total
    mode: str = "text"               # "text" | "cluster"
    heldout_eval: bool = False       # text mode: eval uses reserved variants
    r: int = 64
    n_src_words: int = 40
    min_len: int = 3
    max_len: int = 8
    sigma: float = 1.0
    min_mean_sigmas: float = 4.0

    def __post_init__(self):
        if self.mode not in ("text", "cluster"):
            raise EvalError(f"unknown context mode {self.mode!r}")
        if self.supervision != "full":
            self.supervision = int(self.supervision)


@dataclass
class ControlTask:
    spec: ControlSpec
    combinations: tuple
    samples: dict                    # split → list[SampleRecord]
    requested: dict                  # sample_id → Combination
    backend: object
    src_tok: WordTokenizer
    tgt_tok: WordTokenizer
    word_map: dict
    annotated_train_ids: frozenset = field(default_factory=frozenset)

    def tag_vocabulary(self) -> tuple:
        """Unique context strings seen in training, for tagging models."""
        seen = set()
        for s in self.samples["train"]:
            seen.update(s.meta_context)
            seen.update(text for _, text in s.doc_context)
        return tuple(sorted(seen))


def sample_cluster_means(rng, count: int, r: int, sigma: float, min_sigmas: float):
    """Gaussian cluster centers, rejection-sampled until everyone keeps a
    ``min_sigmas``·sigma distance from everyone else."""
    floor = min_sigmas * sigma
    for _ in range(200):
        means = rng.standard_normal((count, r)) * max(2.0 * sigma, 1.0)
        diff = means[:, None, :] - means[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        if dist.min() > floor:
            return means.astype(np.float32)
    raise EvalError("could not separate cluster means; raise r or lower sigma")


def _toy_word_map(n_words: int, seed: int) -> dict:
    rng = np.random.default_rng(_seeded_hash64(seed, "word-map") & (2 ** 63 - 1))
    perm = rng.permutation(n_words)
    return {f"w{i}": f"x{perm[i]}" for i in range(n_words)}


def make_control_task(spec: ControlSpec, seed: int = 0) -> ControlTask:
    """Generate train/valid/test corpora plus the context delivery backend.

    Combinations cycle round-robin inside every split, so test-set chance
    accuracy for a context-blind model is 1/38.  In text mode annotated
    samples carry one descriptive sentence per marked attribute; in cluster
    mode they carry a fresh draw from their combination's Gaussian, keyed
    by a synthetic string resolved through a precomputed table.
    """
    rng = np.random.default_rng(_seeded_hash64(seed, "control-task") & (2 ** 63 - 1))
    combos = valid_combinations()
    words = [f"w{i}" for i in range(spec.n_src_words)]
    word_map = _toy_word_map(spec.n_src_words, seed)

    means = None
    table = {}
    if spec.mode == "cluster":
        means = sample_cluster_means(rng, len(combos), spec.r, spec.sigma,
                                     spec.min_mean_sigmas)

    def draw_sentence():
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        return [words[int(i)] for i in rng.integers(0, len(words), size=n)]

    def cluster_context(sample_id: str, combo_idx: int) -> tuple:
        key = f"cue-{sample_id}"
        vec = means[combo_idx] + spec.sigma * rng.standard_normal(spec.r)
        table[key] = vec.astype(np.float32)
        return (key,)

    def text_context(combo: Combination, variant_pool) -> tuple:
        variants = [int(rng.choice(variant_pool)) for _ in range(4)]
        return combo_context_texts(combo, variants)

    samples = {}
    requested = {}
    annotated_ids = set()

    # train split: context only on the supervised subset
    n_train = spec.n_train
    if spec.supervision == "full":
        quota = [n_train] * len(combos)  # effectively unlimited
    else:
        quota = supervision_counts(spec.supervision, len(combos))
    # choose which occurrences of each combination get annotated: spread
    # uniformly over that combination's samples
    per_combo_positions = {}
    for ci in range(len(combos)):
        occurrences = list(range(ci, n_train, len(combos)))
        rng.shuffle(occurrences)
        per_combo_positions[ci] = set(occurrences[: quota[ci]])

    train = []
    for i in range(n_train):
        ci = i % len(combos)
        combo = combos[ci]
        sid = f"ctrl-train-{i}"
        src_words = draw_sentence()
        tgt = " ".join(word_map[w] for w in src_words) + " " + " ".join(markers_for(combo))
        annotate = i in per_combo_positions[ci]
        meta = ()
        if annotate:
            annotated_ids.add(sid)
            if spec.mode == "cluster":
                meta = cluster_context(sid, ci)
            else:
                meta = text_context(combo, TRAIN_VARIANTS)
        train.append(SampleRecord(sample_id=sid, src=" ".join(src_words), tgt=tgt,
                                  doc_context=(), meta_context=meta, split="train"))
        requested[sid] = combo
    samples["train"] = train

    eval_variants = HELDOUT_VARIANTS if spec.heldout_eval else TRAIN_VARIANTS
    for split, count in (("valid", spec.n_valid), ("test", spec.n_test)):
        rows = []
        for i in range(count):
            ci = i % len(combos)
            combo = combos[ci]
            sid = f"ctrl-{split}-{i}"
            src_words = draw_sentence()
            tgt = " ".join(word_map[w] for w in src_words) + " " + " ".join(markers_for(combo))
            if spec.mode == "cluster":
                meta = cluster_context(sid, ci)
            else:
                meta = text_context(combo, eval_variants)
            rows.append(SampleRecord(sample_id=sid, src=" ".join(src_words), tgt=tgt,
                                     doc_context=(), meta_context=meta, split=split))
            requested[sid] = combo
        samples[split] = rows

    if spec.mode == "cluster":
        backend = PrecomputedBackend(table, r=spec.r)
    else:
        backend = HashNGramBackend(seed=seed, r=spec.r)

    src_tok = WordTokenizer.train([s.src for s in train])
    tgt_tok = WordTokenizer.train([s.tgt for s in train])
    return ControlTask(spec=spec, combinations=combos, samples=samples,
                       requested=requested, backend=backend, src_tok=src_tok,
                       tgt_tok=tgt_tok, word_map=word_map,
                       annotated_train_ids=frozenset(annotated_ids))


# -- scoring ---------------------------------------------------------------


@dataclass
class ControlResult:
    exact: float
    per_attribute: dict
    n: int
    hypotheses: list = field(default_factory=list)
    references: list = field(default_factory=list)

    @property
    def translation_bleu(self) -> float:
        """BLEU over the word portion of the outputs, markers stripped."""
        strip = lambda toks: [t for t in toks if not t.startswith("<")]
        return bleu([strip(h) for h in self.hypotheses],
                    [strip(r) for r in self.references])


def decode_split(model: TranslationModel, task: ControlTask, split: str,
                 microbatch: int = 64, strict_tags: bool = False) -> list:
    """Greedy-decode a split; returns one token list (strings) per sample."""
    rows = task.samples[split]
    enc = encode_dataset(rows, task.src_tok, task.tgt_tok, model.cfg, task.backend)
    max_len = max(len(e.src) for e in enc) + 6
    out = []
    for lo in range(0, len(enc), microbatch):
        chunk = enc[lo: lo + microbatch]
        batch = collate(model, chunk, strict_tags=strict_tags)
        for ids in greedy_decode(model, batch.src, ctx=batch.ctx,
                                 tag_ids=batch.tag_ids, max_len=max_len):
            out.append(task.tgt_tok.decode(ids).split())
    return out


def control_accuracy(model_or_tokens, task: ControlTask, split: str = "test",
                     microbatch: int = 64, strict_tags: bool = False) -> ControlResult:
    """Exact-match and per-attribute marker accuracy on one split.

    Accepts either a model (decoded here) or pre-decoded token lists, so
    oracle deciders can be scored with the same bookkeeping.
    """
    rows = task.samples[split]
    if isinstance(model_or_tokens, TranslationModel):
        decoded = decode_split(model_or_tokens, task, split, microbatch, strict_tags)
    else:
        decoded = list(model_or_tokens)
    if len(decoded) != len(rows):
        raise EvalError(f"{len(decoded)} decodes for {len(rows)} samples")
    attr_names = [name for name, _ in ATTRIBUTES]
    attr_hits = {name: 0 for name in attr_names}
    exact_hits = 0
    refs = []
    for sample, tokens in zip(rows, decoded):
        combo = task.requested[sample.sample_id]
        want = dict(zip(attr_names, combo))
        got = extract_markers(tokens)
        all_match = True
        for name in attr_names:
            if got.get(name) == want[name]:
                attr_hits[name] += 1
            else:
                all_match = False
        exact_hits += all_match
        refs.append(sample.tgt.split())
    n = len(rows)
    return ControlResult(
        exact=exact_hits / n,
        per_attribute={name: attr_hits[name] / n for name in attr_names},
        n=n,
        hypotheses=decoded,
        references=refs,
    )


def oracle_decode(task: ControlTask, split: str = "test") -> list:
    """Perfect decoder: re-emits each sample's reference tokens."""
    return [s.tgt.split() for s in task.samples[split]]


# -- training shortcut -----------------------------------------------------


def train_on_task(task: ControlTask, variant: str, tc: TrainConfig, out_dir,
                  **config_overrides):
    """Build, fit, and return (model, TrainResult) for one task/variant.

    Contextual variants get their attention scale initialized from the
    long tail of observed context sizes unless the caller overrides it.
    """
    kwargs = dict(r=task.spec.r, dropout=config_overrides.pop("dropout", 0.1))
    if variant == "tagging":
        kwargs["tag_vocab"] = task.tag_vocabulary()
    kwargs.update(config_overrides)
    cfg = ModelConfig.desk(variant, task.src_tok.vocab_size,
                           task.tgt_tok.vocab_size, **kwargs)
    if cfg.uses_context and "g_init" not in config_overrides:
        from .trainer import qk_scale_init
        lengths = [len(s.doc_context) + len(s.meta_context)
                   for s in task.samples["train"]]
        cfg = dataclasses.replace(cfg, g_init=qk_scale_init(lengths, cfg.d_model // cfg.heads))
    model = build_model(cfg, seed=tc.seed)
    data = TrainData(
        train=encode_dataset(task.samples["train"], task.src_tok, task.tgt_tok,
                             cfg, task.backend),
        valid=encode_dataset(task.samples["valid"], task.src_tok, task.tgt_tok,
                             cfg, task.backend),
    )
    result = train(model, data, tc, out_dir)
    return model, result


# -- ablations -------------------------------------------------------------

ABLATION_FLAGS = (
    "no_context_encoder", "no_pos_embeddings", "discrete_vectorizer",
    "no_metadata", "no_doc_context", "random_context", "no_context",
)


@dataclass
class AblationSpec:
    flags: tuple = ()

    def __post_init__(self):
        self.flags = tuple(self.flags)
        unknown = [f for f in self.flags if f not in ABLATION_FLAGS]
        if unknown:
            raise EvalError(f"unknown ablation flags {unknown}; valid: {ABLATION_FLAGS}")
        if "random_context" in self.flags and "no_context" in self.flags:
            raise EvalError("random_context and no_context are mutually exclusive")


@dataclass
class AblationRow:
    flags: tuple
    bleu: float
    accuracy: float
    per_attribute: dict
    valid_loss: float


def _strip_contexts(sample: SampleRecord, doc: bool, meta: bool) -> SampleRecord:
    return SampleRecord(sample_id=sample.sample_id, src=sample.src, tgt=sample.tgt,
                        doc_context=() if doc else sample.doc_context,
                        meta_context=() if meta else sample.meta_context,
                        split=sample.split)


def _permute_contexts(rows, rng) -> list:
    perm = rng.permutation(len(rows))
    out = []
    for sample, j in zip(rows, perm):
        donor = rows[int(j)]
        out.append(SampleRecord(sample_id=sample.sample_id, src=sample.src,
                                tgt=sample.tgt, doc_context=donor.doc_context,
                                meta_context=donor.meta_context, split=sample.split))
    return out


def apply_ablation_to_task(spec: AblationSpec, task: ControlTask, seed: int) -> ControlTask:
    """Return a task copy with the data-side flags applied."""
    flags = set(spec.flags)
    samples = {k: list(v) for k, v in task.samples.items()}
    if "no_context" in flags:
        samples = {k: [_strip_contexts(s, True, True) for s in v]
                   for k, v in samples.items()}
    if "no_metadata" in flags:
        samples = {k: [_strip_contexts(s, False, True) for s in v]
                   for k, v in samples.items()}
    if "no_doc_context" in flags:
        samples = {k: [_strip_contexts(s, True, False) for s in v]
                   for k, v in samples.items()}
    if "random_context" in flags:
        rng = np.random.default_rng(_seeded_hash64(seed, "random-context") & (2 ** 63 - 1))
        samples = {k: _permute_contexts(v, rng) for k, v in samples.items()}
    backend = task.backend
    if "discrete_vectorizer" in flags:
        backend = DiscreteLookupBackend(seed=seed, r=task.spec.r)
    return ControlTask(spec=task.spec, combinations=task.combinations,
                       samples=samples, requested=task.requested, backend=backend,
                       src_tok=task.src_tok, tgt_tok=task.tgt_tok,
                       word_map=task.word_map,
                       annotated_train_ids=task.annotated_train_ids)


def run_ablation(spec: AblationSpec, task: ControlTask, tc: TrainConfig, out_dir,
                 **config_overrides) -> AblationRow:
    """Train an mtcue model under the given flags and score the test split."""
    ablated = apply_ablation_to_task(spec, task, tc.seed)
    if "no_context_encoder" in spec.flags:
        config_overrides["no_context_encoder"] = True
    if "no_pos_embeddings" in spec.flags:
        config_overrides["use_pos"] = False
    model, result = train_on_task(ablated, "mtcue", tc, out_dir, **config_overrides)
    score = control_accuracy(model, ablated)
    return AblationRow(flags=spec.flags, bleu=score.translation_bleu,
                       accuracy=score.exact, per_attribute=score.per_attribute,
                       valid_loss=result.best_valid)


def write_ablation_report(rows: Sequence[AblationRow], path) -> None:
    with open(path, "w") as fh:
        fh.write("flags\tbleu\taccuracy\tvalid_loss\n")
        for row in rows:
            name = "+".join(row.flags) or "none"
            fh.write(f"{name}\t{row.bleu:.2f}\t{row.accuracy:.4f}\t{row.valid_loss:.4f}\n")


# -- representation probe --------------------------------------------------


@dataclass
class ProbeRow:
    context: str
    vector: np.ndarray        # encoder-output representation
    raw: np.ndarray           # backend embedding before the encoder
    marker: str
    purity: float = 0.0


@dataclass
class ProbeResult:
    rows: list
    mean_purity: float
    raw_purity: float


def _knn_purity(vectors: np.ndarray, labels: list, k: int = 5) -> list:
    x = vectors.astype(np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    x = x / np.where(norms == 0.0, 1.0, norms)
    sim = x @ x.T
    np.fill_diagonal(sim, -np.inf)
    k = min(k, len(labels) - 1)
    out = []
    for i in range(len(labels)):
        nn = np.argsort(-sim[i], kind="stable")[:k]
        out.append(sum(labels[int(j)] == labels[i] for j in nn) / k)
    return out


def probe_contexts(model: TranslationModel, contexts: Sequence[str], backend,
                   src_tok: WordTokenizer, tgt_tok: WordTokenizer,
                   probe_sources: Sequence[str], k: int = 5) -> ProbeResult:
    """Encode and decode each context in isolation.

    Each context becomes a single metadata row; its representation is the
    context encoder's output for that row, its outcome the modal marker
    string over the probe source sentences.  Neighbor purity is the
    fraction of each row's k nearest neighbors (cosine) sharing its
    outcome, computed both in encoder space and in raw embedding space.
    """
    if len(contexts) < 2:
        raise EvalError("need at least two contexts to measure purity")
    was = model.training
    model.eval()
    try:
        rows = []
        src_batch = None
        if probe_sources:
            encoded = [src_tok.encode(s) for s in probe_sources]
            width = max(len(e) for e in encoded)
            src_batch = torch.zeros((len(encoded), width), dtype=torch.long)
            for i, e in enumerate(encoded):
                src_batch[i, : len(e)] = torch.tensor(e)
        for text in contexts:
            cs = vectorize_context_set(ContextSet(meta=(text,)), backend)
            batch = collate_context_sets([cs], model.cfg.r)
            out, _ = model.ctx_encoder(batch)
            vector = out[0, 0].detach().numpy().astype(np.float32).copy()
            raw = np.asarray(cs.meta[0], dtype=np.float32)
            ctx = collate_context_sets([cs] * len(probe_sources), model.cfg.r)
            decoded = greedy_decode(model, src_batch, ctx=ctx,
                                    max_len=src_batch.shape[1] + 6)
            outcomes = []
            for ids in decoded:
                marks = extract_markers(tgt_tok.decode(ids).split())
                outcomes.append("|".join(f"{a}={marks.get(a, '?')}"
                                         for a, _ in ATTRIBUTES))
            marker = Counter(outcomes).most_common(1)[0][0]
            rows.append(ProbeRow(context=text, vector=vector, raw=raw, marker=marker))
    finally:
        model.train(was)
    labels = [r.marker for r in rows]
    enc_purity = _knn_purity(np.stack([r.vector for r in rows]), labels, k)
    raw_purity = _knn_purity(np.stack([r.raw for r in rows]), labels, k)
    for row, p in zip(rows, enc_purity):
        row.purity = p
    return ProbeResult(rows=rows, mean_purity=float(np.mean(enc_purity)),
                       raw_purity=float(np.mean(raw_purity)))


def write_probe_tsv(result: ProbeResult, path) -> None:
    """`context<TAB>vector<TAB>marker<TAB>nn_purity`, one row per context."""
    with open(path, "w") as fh:
        fh.write("context\tvector\tmarker\tnn_purity\n")
        for row in result.rows:
            vec = " ".join(repr(float(v)) for v in row.vector)
            fh.write(f"{row.context}\t{vec}\t{row.marker}\t{row.purity:.4f}\n")


# -- task persistence ------------------------------------------------------


def save_control_task(task: ControlTask, out_dir) -> Path:
    """Write a task to disk in the same layout the corpus pipeline emits
    (samples.jsonl + vocab files) plus task.json and, for cluster mode,
    the precomputed embedding table."""
    from .corpus import write_samples_jsonl
    from .vectorizer import export_precomputed

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [s for split in ("train", "valid", "test") for s in task.samples[split]]
    write_samples_jsonl(rows, out_dir / "samples.jsonl")
    task.src_tok.save(out_dir / "src.vocab")
    task.tgt_tok.save(out_dir / "tgt.vocab")
    doc = {
        "spec": dataclasses.asdict(task.spec),
        "seed_backend": getattr(task.backend, "seed", None),
        "requested": {sid: list(combo) for sid, combo in task.requested.items()},
        "word_map": task.word_map,
        "annotated_train_ids": sorted(task.annotated_train_ids),
    }
    if isinstance(task.backend, PrecomputedBackend):
        export_precomputed(task.backend._table, out_dir / "table.tsv")
        doc["backend"] = {"kind": "precomputed", "table": "table.tsv"}
    else:
        doc["backend"] = {"kind": "hash_ngram", "seed": task.backend.seed,
                          "r": task.backend.r}
    with open(out_dir / "task.json", "w") as fh:
        json.dump(doc, fh)
    return out_dir


def load_control_task(task_dir) -> ControlTask:
    from .corpus import read_samples_jsonl
    from .vectorizer import import_precomputed

    task_dir = Path(task_dir)
    with open(task_dir / "task.json") as fh:
        doc = json.load(fh)
    spec = ControlSpec(**doc["spec"])
    rows = read_samples_jsonl(task_dir / "samples.jsonl")
    samples = {"train": [], "valid": [], "test": []}
    for s in rows:
        samples[s.split].append(s)
    info = doc["backend"]
    if info["kind"] == "precomputed":
        backend = PrecomputedBackend(import_precomputed(task_dir / info["table"]),
                                     r=spec.r)
    else:
        backend = HashNGramBackend(seed=info["seed"], r=info["r"])
    return ControlTask(
        spec=spec,
        combinations=valid_combinations(),
        samples=samples,
        requested={sid: Combination(*combo) for sid, combo in doc["requested"].items()},
        backend=backend,
        src_tok=WordTokenizer.load(task_dir / "src.vocab"),
        tgt_tok=WordTokenizer.load(task_dir / "tgt.vocab"),
        word_map=doc["word_map"],
        annotated_train_ids=frozenset(doc["annotated_train_ids"]),
    )
