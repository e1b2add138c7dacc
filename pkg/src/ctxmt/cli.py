"""The ``ctxmt`` command: data prep, embedding stores, training,
translation, evaluation, ablations, the synthetic control benchmark, and
the representation probe.

Exit codes: 0 success, 1 usage error, 2 data/model error.  Every
subcommand accepts ``--config FILE`` (JSON) whose keys fill in flags the
user did not pass; explicit flags always win.  Commands that produce
files also write ``manifest-<command>.json`` beside them recording the
inputs, outputs, seed, and wall time of the run.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import subprocess
import sys
import time
from pathlib import Path

from . import corpus, evalbench, store as store_mod, trainer, vectorizer
from .contexts import ContextSet
from .model import (
    ModelConfig,
    ModelError,
    build_model,
    greedy_decode,
    load_checkpoint,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _git_describe() -> str:
    try:
        proc = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=10,
            cwd=Path(__file__).resolve().parent,
        )
        if proc.returncode == 0 and proc.stdout.strip():
            return proc.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _write_manifest(out_dir, command, seed, config_path, inputs, outputs, t0) -> Path:
    doc = {
        "command": command,
        "config": str(config_path) if config_path else None,
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "git": _git_describe(),
        "wall_seconds": round(time.monotonic() - t0, 3),
    }
    path = Path(out_dir) / f"manifest-{command}.json"
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    return path


def _load_config(path) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise evalbench.EvalError(f"config {path} must hold a JSON object")
    return doc


def _get(args, config, key, default):
    """Flag wins over config file wins over hard default."""
    value = getattr(args, key, None)
    if value is not None:
        return value
    return config.get(key, default)


def _make_backend(args, config, default_r=64):
    kind = _get(args, config, "backend", "hash_ngram")
    r = int(_get(args, config, "r", default_r))
    seed = int(_get(args, config, "backend_seed", 0))
    if kind == "precomputed":
        table = _get(args, config, "table", None)
        if not table:
            raise vectorizer.VectorizerError("precomputed backend needs --table")
        return vectorizer.PrecomputedBackend(vectorizer.import_precomputed(table), r=r)
    return vectorizer.make_backend(kind, seed=seed, r=r)


def _train_config(args, config) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        learning_rate=float(_get(args, config, "learning_rate", 2e-3)),
        batch_tokens=int(_get(args, config, "batch_tokens", 2048)),
        warmup_steps=int(_get(args, config, "warmup_steps", 60)),
        patience=int(_get(args, config, "patience", 5)),
        context_dropout_p=float(_get(args, config, "context_dropout", 0.1)),
        seed=int(getattr(args, "seed", 0)),
        max_epochs=int(_get(args, config, "epochs", 10)),
        microbatch_samples=int(_get(args, config, "microbatch_samples", 64)),
        freeze_src_encoder=bool(_get(args, config, "freeze_src_encoder", False)),
    )


def _read_data_dir(data_dir):
    data_dir = Path(data_dir)
    samples = corpus.read_samples_jsonl(data_dir / "samples.jsonl")
    src_tok = corpus.WordTokenizer.load(data_dir / "src.vocab")
    tgt_tok = corpus.WordTokenizer.load(data_dir / "tgt.vocab")
    splits = {"train": [], "valid": [], "test": []}
    for s in samples:
        splits.setdefault(s.split or "train", []).append(s)
    return splits, src_tok, tgt_tok


# -- subcommands -----------------------------------------------------------


def _cmd_prepare(args) -> int:
    t0 = time.monotonic()
    config = _load_config(args.config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs = corpus.read_pairs_jsonl(args.inp)
    metadata = corpus.read_metadata_jsonl(args.meta) if args.meta else {}
    documents = corpus.build_documents(pairs)
    t = int(_get(args, config, "t", 5))
    samples = corpus.build_samples(documents, metadata, t=t)
    valid_keys = [k for k in (args.valid_keys or "").split(",") if k]
    test_keys = [k for k in (args.test_keys or "").split(",") if k]
    splits = corpus.split_samples(samples, valid_keys, test_keys)
    ordered = splits["train"] + splits["valid"] + splits["test"]
    corpus.write_samples_jsonl(ordered, out_dir / "samples.jsonl")
    vocab_size = _get(args, config, "vocab_size", None)
    vocab_size = int(vocab_size) if vocab_size is not None else None
    src_tok = corpus.WordTokenizer.train([s.src for s in splits["train"]], vocab_size)
    tgt_tok = corpus.WordTokenizer.train([s.tgt for s in splits["train"]], vocab_size)
    src_tok.save(out_dir / "src.vocab")
    tgt_tok.save(out_dir / "tgt.vocab")
    print(f"prepared {len(samples)} samples "
          f"(train {len(splits['train'])}, valid {len(splits['valid'])}, "
          f"test {len(splits['test'])}) from {len(documents)} documents")
    _write_manifest(out_dir, "prepare", args.seed, args.config,
                    [args.inp] + ([args.meta] if args.meta else []),
                    [out_dir / "samples.jsonl", out_dir / "src.vocab",
                     out_dir / "tgt.vocab"], t0)
    return EXIT_OK


def _cmd_embed(args) -> int:
    t0 = time.monotonic()
    config = _load_config(args.config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = corpus.read_samples_jsonl(args.samples)
    backend = _make_backend(args, config, default_r=int(_get(args, config, "r", 384)))
    t = int(_get(args, config, "t", 5))
    pairs = ((s.sample_id, corpus.context_set_for(s, t=t)) for s in samples)
    store_path, index_path = store_mod.build_store(
        pairs, backend, out_dir / "cues.bin", out_dir / "cues.idx")
    opened = store_mod.EmbeddingStore(store_path)
    print(f"stored {opened.count} unique contexts at r={opened.dim} "
          f"for {len(samples)} samples")
    _write_manifest(out_dir, "embed", args.seed, args.config,
                    [args.samples], [store_path, index_path], t0)
    return EXIT_OK


def _cmd_train(args) -> int:
    t0 = time.monotonic()
    config = _load_config(args.config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    tc_early = _train_config(args, config)
    if (Path(args.data) / "task.json").exists():
        # control-task directory: reuse its backend and tag vocabulary
        task = evalbench.load_control_task(args.data)
        _, result = evalbench.train_on_task(task, args.variant, tc_early, out_dir,
                                            **dict(config.get("model", {})))
        print(f"best valid loss {result.best_valid:.4f} at epoch "
              f"{result.best_epoch} (stopped after {result.stopped_epoch})")
        _write_manifest(out_dir, "train", args.seed, args.config,
                        [args.data], [result.best_path, result.log_path], t0)
        return EXIT_OK
    splits, src_tok, tgt_tok = _read_data_dir(args.data)
    if not splits["valid"]:
        raise trainer.TrainerError("data has no valid split; rerun prepare with "
                                   "--valid-keys or use a control task directory")
    tc = tc_early
    model_overrides = dict(config.get("model", {}))
    backend = _make_backend(args, config)
    variant = args.variant
    if variant == "tagging" and "tag_vocab" not in model_overrides:
        seen = set()
        for s in splits["train"]:
            seen.update(s.meta_context)
            seen.update(text for _, text in s.doc_context)
        model_overrides["tag_vocab"] = tuple(sorted(seen))
    cfg = ModelConfig.desk(variant, src_tok.vocab_size, tgt_tok.vocab_size,
                           r=backend.r, **model_overrides)
    if cfg.uses_context and "g_init" not in model_overrides:
        lengths = [len(s.doc_context) + len(s.meta_context) for s in splits["train"]]
        cfg = dataclasses.replace(
            cfg, g_init=trainer.qk_scale_init(lengths, cfg.d_model // cfg.heads))
    if args.fine_tune_from:
        result = trainer.fine_tune(
            args.fine_tune_from, cfg,
            trainer.TrainData(
                train=trainer.encode_dataset(splits["train"], src_tok, tgt_tok, cfg, backend),
                valid=trainer.encode_dataset(splits["valid"], src_tok, tgt_tok, cfg, backend),
            ),
            tc, out_dir)
    else:
        model = build_model(cfg, seed=tc.seed)
        data = trainer.TrainData(
            train=trainer.encode_dataset(splits["train"], src_tok, tgt_tok, cfg, backend),
            valid=trainer.encode_dataset(splits["valid"], src_tok, tgt_tok, cfg, backend),
        )
        result = trainer.train(model, data, tc, out_dir)
    print(f"best valid loss {result.best_valid:.4f} at epoch {result.best_epoch} "
          f"(stopped after {result.stopped_epoch})")
    _write_manifest(out_dir, "train", args.seed, args.config,
                    [args.data], [result.best_path, result.log_path], t0)
    return EXIT_OK


def _load_model_and_vocabs(args):
    model, doc = load_checkpoint(args.checkpoint)
    data_dir = Path(args.data)
    src_tok = corpus.WordTokenizer.load(data_dir / "src.vocab")
    tgt_tok = corpus.WordTokenizer.load(data_dir / "tgt.vocab")
    return model, doc, src_tok, tgt_tok


def _cmd_translate(args) -> int:
    t0 = time.monotonic()
    config = _load_config(args.config)
    model, _, src_tok, tgt_tok = _load_model_and_vocabs(args)
    backend = _make_backend(args, config, default_r=model.cfg.r)
    if args.src is None and args.src_file is None:
        raise evalbench.EvalError("pass --src TEXT or --src-file FILE")
    if args.src is not None:
        sources = [args.src]
    else:
        with open(args.src_file, encoding="utf-8") as fh:
            sources = [line.strip() for line in fh if line.strip()]
    doc_ctx = tuple((text, i + 1) for i, text in enumerate(args.doc or ()))
    meta_ctx = tuple(args.meta or ())
    cs = ContextSet(doc=doc_ctx, meta=meta_ctx, t=model.cfg.t)
    rows = [corpus.SampleRecord(sample_id=f"cli-{i}", src=text, tgt="",
                                doc_context=tuple((d, x) for x, d in cs.doc),
                                meta_context=cs.meta)
            for i, text in enumerate(sources)]
    enc = trainer.encode_dataset(rows, src_tok, tgt_tok, model.cfg, backend)
    outputs = []
    for lo in range(0, len(enc), 64):
        chunk = enc[lo: lo + 64]
        batch = trainer.collate(model, chunk, strict_tags=args.strict_tags)
        for ids in greedy_decode(model, batch.src, ctx=batch.ctx,
                                 tag_ids=batch.tag_ids,
                                 max_len=int(args.max_len)):
            outputs.append(tgt_tok.decode(ids))
    for line in outputs:
        print(line)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "translations.txt", "w", encoding="utf-8") as fh:
            fh.write("\n".join(outputs) + "\n")
        _write_manifest(out_dir, "translate", args.seed, args.config,
                        [args.checkpoint, args.data],
                        [out_dir / "translations.txt"], t0)
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    t0 = time.monotonic()
    config = _load_config(args.config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model, _, src_tok, tgt_tok = _load_model_and_vocabs(args)
    data_dir = Path(args.data)
    report = {}
    if (data_dir / "task.json").exists():
        task = evalbench.load_control_task(data_dir)
        score = evalbench.control_accuracy(model, task, split=args.split)
        report.update(bleu=score.translation_bleu, n=score.n, exact=score.exact,
                      per_attribute=score.per_attribute)
    else:
        splits, src_tok, tgt_tok = _read_data_dir(args.data)
        rows = splits[args.split]
        if not rows:
            raise evalbench.EvalError(f"split {args.split!r} is empty")
        backend = _make_backend(args, config, default_r=model.cfg.r)
        enc = trainer.encode_dataset(rows, src_tok, tgt_tok, model.cfg, backend)
        hyps = []
        for lo in range(0, len(enc), 64):
            chunk = enc[lo: lo + 64]
            batch = trainer.collate(model, chunk)
            for ids in greedy_decode(model, batch.src, ctx=batch.ctx,
                                     tag_ids=batch.tag_ids,
                                     max_len=int(args.max_len)):
                hyps.append(tgt_tok.decode(ids))
        report.update(bleu=evalbench.bleu(hyps, [s.tgt for s in rows]), n=len(rows))
    with open(out_dir / "evaluation.json", "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    print(json.dumps(report))
    _write_manifest(out_dir, "evaluate", args.seed, args.config,
                    [args.checkpoint, args.data], [out_dir / "evaluation.json"], t0)
    return EXIT_OK


def _cmd_ablate(args) -> int:
    t0 = time.monotonic()
    config = _load_config(args.config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    task = evalbench.load_control_task(args.data)
    flags = tuple(f for f in (args.flags or "").split(",") if f)
    spec = evalbench.AblationSpec(flags)
    tc = _train_config(args, config)
    row = evalbench.run_ablation(spec, task, tc, out_dir / "run")
    evalbench.write_ablation_report([row], out_dir / "ablation.tsv")
    print(f"{'+'.join(flags) or 'none'}: bleu={row.bleu:.2f} "
          f"accuracy={row.accuracy:.4f}")
    _write_manifest(out_dir, "ablate", args.seed, args.config,
                    [args.data], [out_dir / "ablation.tsv"], t0)
    return EXIT_OK


def _cmd_control_task(args) -> int:
    t0 = time.monotonic()
    config = _load_config(args.config)
    out_dir = Path(args.out)
    supervision = _get(args, config, "supervision", "full")
    if supervision != "full":
        supervision = int(supervision)
    spec = evalbench.ControlSpec(
        n_train=int(_get(args, config, "n_train", 20000)),
        n_valid=int(_get(args, config, "n_valid", 950)),
        n_test=int(_get(args, config, "n_test", 950)),
        supervision=supervision,
        mode=_get(args, config, "mode", "text"),
        heldout_eval=bool(_get(args, config, "heldout_eval", False)),
        r=int(_get(args, config, "r", 64)),
        sigma=float(_get(args, config, "sigma", 1.0)),
    )
    task = evalbench.make_control_task(spec, seed=args.seed)
    evalbench.save_control_task(task, out_dir)
    annotated = len(task.annotated_train_ids)
    print(f"control task: {len(task.samples['train'])} train pairs, "
          f"{annotated} annotated, mode={spec.mode}")
    _write_manifest(out_dir, "control-task", args.seed, args.config, [],
                    [out_dir / "samples.jsonl", out_dir / "task.json"], t0)
    return EXIT_OK


def _cmd_probe(args) -> int:
    t0 = time.monotonic()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model, _, _, _ = _load_model_and_vocabs(args)
    task = evalbench.load_control_task(args.data)
    if args.contexts:
        with open(args.contexts, encoding="utf-8") as fh:
            contexts = [line.rstrip("\n") for line in fh if line.strip()]
    else:
        seen = []
        for s in task.samples["test"]:
            for text in s.meta_context:
                if text not in seen:
                    seen.append(text)
        contexts = seen
    probe_sources = [s.src for s in task.samples["test"][: int(args.n_sources)]]
    result = evalbench.probe_contexts(model, contexts, task.backend,
                                      task.src_tok, task.tgt_tok, probe_sources,
                                      k=int(args.k))
    evalbench.write_probe_tsv(result, out_dir / "probe.tsv")
    summary = {"contexts": len(result.rows), "mean_purity": result.mean_purity,
               "raw_purity": result.raw_purity}
    with open(out_dir / "probe.json", "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    print(json.dumps(summary))
    _write_manifest(out_dir, "probe", args.seed, args.config,
                    [args.checkpoint, args.data],
                    [out_dir / "probe.tsv", out_dir / "probe.json"], t0)
    return EXIT_OK


# -- parser ----------------------------------------------------------------


def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="governs all randomness")
    p.add_argument("--config", help="JSON config file; explicit flags override it")


def _add_backend_flags(p):
    p.add_argument("--backend", choices=["hash_ngram", "hash", "discrete", "precomputed"])
    p.add_argument("--r", type=int, help="embedding width")
    p.add_argument("--backend-seed", type=int, dest="backend_seed")
    p.add_argument("--table", help="TSV table for the precomputed backend")


def _add_train_flags(p):
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--batch-tokens", type=int, dest="batch_tokens")
    p.add_argument("--warmup-steps", type=int, dest="warmup_steps")
    p.add_argument("--patience", type=int)
    p.add_argument("--context-dropout", type=float, dest="context_dropout")
    p.add_argument("--epochs", type=int)
    p.add_argument("--microbatch-samples", type=int, dest="microbatch_samples")


def build_parser() -> _Parser:
    parser = _Parser(prog="ctxmt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build documents, contexts, splits, vocab")
    p.add_argument("--in", dest="inp", required=True, help="pairs JSONL")
    p.add_argument("--meta", help="metadata JSONL")
    p.add_argument("--out", required=True)
    p.add_argument("--t", type=int, help="max document-context distance")
    p.add_argument("--valid-keys", dest="valid_keys", help="comma-separated doc_keys")
    p.add_argument("--test-keys", dest="test_keys", help="comma-separated doc_keys")
    p.add_argument("--vocab-size", type=int, dest="vocab_size")
    _add_common(p)
    p.set_defaults(func=_cmd_prepare)

    p = sub.add_parser("embed", help="build the deduplicated embedding store")
    p.add_argument("--samples", required=True, help="samples JSONL")
    p.add_argument("--out", required=True)
    p.add_argument("--t", type=int)
    _add_backend_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_embed)

    p = sub.add_parser("train", help="train a translation model variant")
    p.add_argument("--data", required=True, help="prepare/control-task output dir")
    p.add_argument("--variant", required=True,
                   choices=["base", "base_pm", "tagging", "novotney_cue", "mtcue"])
    p.add_argument("--out", required=True)
    p.add_argument("--fine-tune-from", dest="fine_tune_from",
                   help="checkpoint to warm-start source encoder + decoder from")
    p.add_argument("--freeze-src-encoder", action="store_const", const=True,
                   dest="freeze_src_encoder")
    _add_backend_flags(p)
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("translate", help="translate text with inline contexts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="directory holding the vocab files")
    p.add_argument("--src", help="one source sentence")
    p.add_argument("--src-file", dest="src_file", help="file of source sentences")
    p.add_argument("--doc", action="append", help="document context, nearest first")
    p.add_argument("--meta", action="append", help="metadata context (repeatable)")
    p.add_argument("--max-len", dest="max_len", type=int, default=64)
    p.add_argument("--strict-tags", dest="strict_tags", action="store_true",
                   help="error on context strings outside the tag vocabulary")
    p.add_argument("--out", help="also write translations.txt + manifest here")
    _add_backend_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_translate)

    p = sub.add_parser("evaluate", help="BLEU (and control accuracy on task dirs)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "valid", "test"])
    p.add_argument("--max-len", dest="max_len", type=int, default=64)
    p.add_argument("--out", required=True)
    _add_backend_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("ablate", help="train + score one ablation row")
    p.add_argument("--data", required=True, help="control-task directory")
    p.add_argument("--flags", help="comma-separated ablation flags")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("control-task", help="generate the synthetic benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["text", "cluster"])
    p.add_argument("--supervision", help='"full" or an integer total')
    p.add_argument("--n-train", type=int, dest="n_train")
    p.add_argument("--n-valid", type=int, dest="n_valid")
    p.add_argument("--n-test", type=int, dest="n_test")
    p.add_argument("--heldout-eval", dest="heldout_eval", action="store_const", const=True)
    p.add_argument("--r", type=int)
    p.add_argument("--sigma", type=float)
    _add_common(p)
    p.set_defaults(func=_cmd_control_task)

    p = sub.add_parser("probe", help="encode/decode contexts in isolation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="control-task directory")
    p.add_argument("--out", required=True)
    p.add_argument("--contexts", help="file with one context per line")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--n-sources", dest="n_sources", type=int, default=4)
    _add_common(p)
    p.set_defaults(func=_cmd_probe)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (corpus.CorpusError, store_mod.StoreError, vectorizer.VectorizerError,
            ModelError, trainer.TrainerError, evalbench.EvalError,
            FileNotFoundError, ValueError, KeyError) as exc:
        sys.stderr.write(f"ctxmt {args.command}: {exc}\n")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
