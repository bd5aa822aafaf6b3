"""Command-line entry point.

Every subcommand reads a flat ``key=value`` config file (``--config``) and
accepts each key as a ``--key`` flag; flags win over the file, the file wins
over built-in defaults, and unknown keys are rejected. The effective config is
written to ``<out>/<command>.cfg``. Relative ``out`` paths resolve against
``$COCONDENSER_OUTPUT_ROOT`` when it is set.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path

from . import checkpoint
from .coloss import CorpusFormatError, make_documents, read_jsonl_corpus, write_jsonl_corpus
from .condenser import ConfigError, CondenserConfig, CondenserModel
from .encoder import Encoder, Vocabulary
from .optim import NonFiniteGradient
from .pretrain import PretrainConfig, run_stage1, run_stage2
from .retriever import (
    BiEncoder,
    BM25Index,
    FinetuneConfig,
    FormatError,
    RetrievalIndex,
    bm25_triples,
    build_index,
    evaluate,
    mine_hard_negatives,
    read_qrels,
    read_queries,
    read_run,
    read_triples,
    retrieve,
    train_round,
    write_qrels,
    write_queries,
    write_run,
    write_triples,
)
from .streams import stream
from .synth import make_synthetic_corpus

logger = logging.getLogger("cocondenser")

OUTPUT_ROOT_ENV = "COCONDENSER_OUTPUT_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass(frozen=True)
class Key:
    type: type
    default: object
    help: str = ""


def _parse_bool(raw: str) -> bool:
    low = str(raw).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _convert(name: str, key: Key, raw: object) -> object:
    if isinstance(raw, key.type) and not (key.type is int and isinstance(raw, bool)):
        return raw
    try:
        return _parse_bool(raw) if key.type is bool else key.type(raw)
    except ValueError:
        raise UsageError(f"config key {name!r}: cannot parse {raw!r} as {key.type.__name__}") from None


COMMON = {
    "out": Key(str, "", "output directory (default runs/<command>)"),
    "seed": Key(int, 0, "seed for every random stream"),
    "log_level": Key(str, "INFO", "logging level"),
}

MODEL = {
    "n_early": Key(int, 2, "early backbone layers"),
    "n_late": Key(int, 2, "late backbone layers"),
    "n_head": Key(int, 2, "Condenser head layers"),
    "hidden": Key(int, 32, "hidden size"),
    "heads": Key(int, 4, "attention heads"),
    "ffn": Key(int, 128, "feed-forward width"),
    "max_len": Key(int, 64, "maximum sequence length including [CLS]"),
    "init_std": Key(float, 0.2, "initialization standard deviation"),
}

TRAIN = {
    "docs_per_update": Key(int, 32, "documents per weight update"),
    "total_steps": Key(int, 2000, "optimizer steps"),
    "lr": Key(float, 1e-3, "peak learning rate"),
    "weight_decay": Key(float, 0.01, "decoupled weight decay"),
    "beta1": Key(float, 0.9, "AdamW beta1"),
    "beta2": Key(float, 0.999, "AdamW beta2"),
    "adam_eps": Key(float, 1e-8, "AdamW epsilon"),
    "warmup": Key(int, 0, "linear warmup steps"),
    "min_span": Key(int, 8, "minimum span length"),
    "max_span": Key(int, 20, "maximum span length"),
    "mask_rate": Key(float, 0.15, "MLM masking rate"),
    "save_every": Key(int, 0, "checkpoint every N steps (0: only at the end)"),
    "resume": Key(bool, False, "continue from model.ckpt/optim.ckpt in the output directory"),
}

FINETUNE = {
    "lr": Key(float, 3e-4, "peak learning rate"),
    "weight_decay": Key(float, 0.0, "decoupled weight decay"),
    "batch_size": Key(int, 8, "queries per step"),
    "epochs": Key(int, 3, "passes over the triples"),
    "negatives_per_query": Key(int, 3, "negatives sampled per query and step"),
    "in_batch": Key(bool, False, "add other queries' passages to each denominator"),
    "shared": Key(bool, False, "one encoder for queries and passages"),
    "query_max_len": Key(int, 32, "query truncation length"),
    "warmup": Key(int, 0, "linear warmup steps"),
}

COMMANDS: dict[str, tuple[str, dict[str, Key]]] = {
    "synth": ("write a synthetic topic corpus with queries and judgments", {
        "n_topics": Key(int, 20), "docs_per_topic": Key(int, 10), "n_queries": Key(int, 40),
        "n_train_queries": Key(int, 40), "n_heldout": Key(int, 40),
        "facets": Key(int, 1, "keyword groups per topic; queries target one group"),
    }),
    "pretrain1": ("stage 1: Condenser MLM pre-training", {
        "corpus": Key(str, "", "JSON-lines corpus"),
        "vocab": Key(str, "", "vocabulary file (built from the corpus when empty)"),
        **MODEL, **TRAIN,
    }),
    "pretrain2": ("stage 2: coCondenser pre-training with gradient caching", {
        "corpus": Key(str, "", "JSON-lines corpus"),
        "init": Key(str, "", "stage-1 model.ckpt"),
        "vocab": Key(str, "", "vocabulary file (default: vocab.txt next to the stage-1 checkpoint)"),
        "probe": Key(str, "", "held-out JSON-lines documents for the alignment probe"),
        "probe_every": Key(int, 500, "probe interval in steps"),
        "sub_batch": Key(int, 8, "spans per gradient-cache sub-batch"),
        **{**TRAIN, "docs_per_update": Key(int, 16, "documents per weight update")},
    }),
    "finetune": ("train a bi-encoder on (query, positive, negatives) triples", {
        "corpus": Key(str, ""), "queries": Key(str, "", "training queries TSV"),
        "qrels": Key(str, "", "training judgments TSV"),
        "backbone": Key(str, "", "encoder checkpoint (stage-2 backbone.ckpt)"),
        "vocab": Key(str, ""),
        "triples": Key(str, "", "JSON-lines triples; BM25 negatives are used when empty"),
        "bm25_depth": Key(int, 30), "bm25_pool": Key(int, 10),
        **FINETUNE,
    }),
    "mine": ("append retrieved hard negatives to every triple's pool", {
        "retriever": Key(str, "", "directory holding query.ckpt and passage.ckpt"),
        "corpus": Key(str, ""), "queries": Key(str, ""), "qrels": Key(str, ""), "triples": Key(str, ""),
        "vocab": Key(str, ""), "depth": Key(int, 30), "per_query": Key(int, 10),
        "query_max_len": Key(int, 32),
    }),
    "index": ("encode a corpus with the passage encoder", {
        "retriever": Key(str, ""), "corpus": Key(str, ""), "vocab": Key(str, ""),
    }),
    "search": ("exact inner-product search, writes a TREC run", {
        "retriever": Key(str, ""), "index": Key(str, "", "index.ckpt written by the index command"),
        "queries": Key(str, ""), "vocab": Key(str, ""), "k": Key(int, 1000), "query_max_len": Key(int, 32),
        "tag": Key(str, "dense"),
    }),
    "eval": ("MRR@10 and Recall@5/20/100/1000 of a TREC run", {
        "run": Key(str, ""), "qrels": Key(str, ""),
    }),
    "gradcheck": ("finite-difference and gradient-cache self checks", {
        "inject_fault": Key(float, 0.0, "test hook: scale a probe op's backward by 1+value"),
    }),
    "desk": ("full desk experiment: both pre-training stages and two-round fine-tuning", {
        "stage1_steps": Key(int, 2000), "stage2_steps": Key(int, 2000), "probe_every": Key(int, 500),
    }),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cocondenser", description="Condenser/coCondenser pre-training and dense retrieval.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, (summary, keys) in COMMANDS.items():
        p = sub.add_parser(name, help=summary, description=summary)
        p.add_argument("--config", metavar="PATH", help="flat key=value config file")
        for key, opt in {**COMMON, **keys}.items():
            flag = "--" + key.replace("_", "-")
            shown = opt.help + (" " if opt.help else "") + f"(default: {opt.default!r})"
            p.add_argument(flag, dest=key, metavar=opt.type.__name__.upper(), default=None, help=shown)
    return parser


def resolve_config(command: str, config_path: str | None, overrides: dict[str, str | None]) -> dict:
    keys = {**COMMON, **COMMANDS[command][1]}
    values = {k: opt.default for k, opt in keys.items()}
    if config_path:
        try:
            text = Path(config_path).read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read config {config_path}: {exc.strerror}") from None
        try:
            parsed = checkpoint.parse_config(text, str(config_path))
        except checkpoint.CheckpointError as exc:
            raise UsageError(str(exc)) from None
        unknown = sorted(set(parsed) - set(keys))
        if unknown:
            raise UsageError(f"{config_path}: unknown key(s) for '{command}': {', '.join(unknown)}")
        for k, raw in parsed.items():
            values[k] = _convert(k, keys[k], raw)
    for k, raw in overrides.items():
        if raw is not None:
            values[k] = _convert(k, keys[k], raw)
    if not values["out"]:
        values["out"] = str(Path("runs") / command)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not Path(values["out"]).is_absolute():
        values["out"] = str(Path(root) / values["out"])
    return values


# ---------------------------------------------------------------- helpers


def _require(cfg: dict, *names: str) -> None:
    missing = [n for n in names if not cfg[n]]
    if missing:
        raise UsageError("missing required key(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {p}")
    return p


def _load_vocab(cfg: dict, fallback: Path | None = None) -> Vocabulary:
    if cfg["vocab"]:
        return Vocabulary.load(_existing(cfg["vocab"], "vocabulary"))
    if fallback is not None and fallback.exists():
        return Vocabulary.load(fallback)
    raise UsageError("missing required key: --vocab")


def _subset(cfg: dict, cls) -> dict:
    names = cls.__dataclass_fields__
    return {k: v for k, v in cfg.items() if k in names}


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: dict, out: Path) -> int:
    data = make_synthetic_corpus(cfg["n_topics"], cfg["docs_per_topic"], cfg["seed"], n_queries=cfg["n_queries"],
                                 n_train_queries=cfg["n_train_queries"], n_heldout=cfg["n_heldout"],
                                 facets=cfg["facets"])
    write_jsonl_corpus(data.corpus, out / "corpus.jsonl")
    write_jsonl_corpus(data.heldout, out / "heldout.jsonl")
    write_queries(data.queries, out / "queries.tsv")
    write_qrels(data.qrels, out / "qrels.tsv")
    write_queries(data.train_queries, out / "train_queries.tsv")
    write_qrels(data.train_qrels, out / "train_qrels.tsv")
    print(f"wrote {len(data.corpus)} documents, {len(data.queries)} queries, "
          f"{len(data.train_queries)} training queries to {out}")
    return EXIT_OK


def _pretrain_config(cfg: dict, stage: int) -> PretrainConfig:
    return PretrainConfig(stage=stage, **{k: v for k, v in _subset(cfg, PretrainConfig).items() if k != "stage"})


def cmd_pretrain1(cfg: dict, out: Path) -> int:
    _require(cfg, "corpus")
    rows = read_jsonl_corpus(_existing(cfg["corpus"], "corpus"))
    vocab = Vocabulary.load(_existing(cfg["vocab"], "vocabulary")) if cfg["vocab"] else \
        Vocabulary.build(t for _, t in rows)
    vocab.save(out / "vocab.txt")
    docs = make_documents(rows, vocab, cfg["min_span"])
    mcfg = CondenserConfig(len(vocab), cfg["n_early"], cfg["n_late"], cfg["n_head"], cfg["hidden"], cfg["heads"],
                           cfg["ffn"], cfg["max_len"], cfg["mask_rate"])
    model = CondenserModel.init(mcfg, stream(cfg["seed"], "init", "condenser"), cfg["init_std"])
    res = run_stage1(docs, _pretrain_config(cfg, 1), model, out, resume=cfg["resume"])
    print(f"stage 1 done: final loss {res.log[-1][2]:.4f}; checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_pretrain2(cfg: dict, out: Path) -> int:
    if not cfg["init"]:
        raise UsageError("stage 2 warm-starts from a stage-1 checkpoint: run 'pretrain1' first and pass "
                         "--init <stage1-out>/model.ckpt")
    _require(cfg, "corpus")
    init = Path(cfg["init"])
    if not init.exists():
        raise DataError(f"stage-1 checkpoint not found: {init} (run 'pretrain1' first)")
    model = CondenserModel.load(init)
    vocab = _load_vocab(cfg, init.parent / "vocab.txt")
    if len(vocab) != model.config.vocab_size:
        raise DataError(f"vocab mismatch: vocabulary has {len(vocab)} entries, checkpoint expects "
                        f"{model.config.vocab_size}")
    vocab.save(out / "vocab.txt")
    docs = make_documents(read_jsonl_corpus(_existing(cfg["corpus"], "corpus")), vocab, cfg["min_span"])
    probe = make_documents(read_jsonl_corpus(_existing(cfg["probe"], "probe corpus")), vocab, cfg["min_span"]) \
        if cfg["probe"] else []
    res = run_stage2(model, docs, _pretrain_config(cfg, 2), out, probe_docs=probe, resume=cfg["resume"])
    gap = f"; alignment gap {res.probes[-1][1]:.4f}" if res.probes else ""
    print(f"stage 2 done: final loss {res.log[-1][2]:.4f}{gap}; backbone {out / 'backbone.ckpt'}")
    return EXIT_OK


def cmd_finetune(cfg: dict, out: Path) -> int:
    _require(cfg, "corpus", "queries", "backbone")
    corpus = read_jsonl_corpus(_existing(cfg["corpus"], "corpus"))
    queries = read_queries(_existing(cfg["queries"], "queries"))
    backbone = Encoder.load(_existing(cfg["backbone"], "backbone checkpoint"))
    vocab = _load_vocab(cfg, Path(cfg["backbone"]).parent / "vocab.txt")
    if cfg["triples"]:
        triples = read_triples(_existing(cfg["triples"], "triples"))
    else:
        _require(cfg, "qrels")
        qrels = read_qrels(_existing(cfg["qrels"], "qrels"))
        triples = bm25_triples(queries, qrels, BM25Index(corpus), cfg["bm25_depth"], cfg["bm25_pool"])
        write_triples(triples, out / "triples.jsonl")
    passages, qtext = dict(corpus), dict(queries)
    unknown = sorted({t.qid for t in triples} - set(qtext)) + \
        sorted({p for t in triples for p in [t.pos, *t.negs]} - set(passages))
    if unknown:
        raise DataError(f"triples reference unknown query or passage ids: {', '.join(unknown[:5])}")
    ft = FinetuneConfig(**_subset(cfg, FinetuneConfig))
    model = train_round(triples, backbone, qtext, passages, vocab, ft, tag="finetune")
    model.save(out / "retriever")
    vocab.save(out / "retriever" / "vocab.txt")
    checkpoint.atomic_write(out / "finetune.log", "".join(f"{i}\t{v!r}\n" for i, v in
                                                          enumerate(model.history)).encode())
    print(f"fine-tuned on {len(triples)} triples, final loss {model.history[-1]:.4f}; "
          f"retriever {out / 'retriever'}")
    return EXIT_OK


def _load_retriever(cfg: dict) -> tuple[BiEncoder, Vocabulary]:
    _require(cfg, "retriever")
    path = _existing(cfg["retriever"], "retriever directory")
    model = BiEncoder.load(path)
    return model, _load_vocab(cfg, path / "vocab.txt")


def cmd_mine(cfg: dict, out: Path) -> int:
    _require(cfg, "corpus", "queries", "triples")
    model, vocab = _load_retriever(cfg)
    corpus = read_jsonl_corpus(_existing(cfg["corpus"], "corpus"))
    qtext = dict(read_queries(_existing(cfg["queries"], "queries")))
    qrels = read_qrels(_existing(cfg["qrels"], "qrels")) if cfg["qrels"] else None
    triples = read_triples(_existing(cfg["triples"], "triples"))
    index = build_index(model.fp, corpus, vocab)
    mined = mine_hard_negatives(model, triples, qtext, index, vocab, cfg["depth"], cfg["per_query"], qrels)
    write_triples(mined, out / "triples.jsonl")
    added = sum(len(b.negs) - len(a.negs) for a, b in zip(triples, mined))
    print(f"mined {added} negatives for {len(mined)} triples; wrote {out / 'triples.jsonl'}")
    return EXIT_OK


def cmd_index(cfg: dict, out: Path) -> int:
    _require(cfg, "corpus")
    model, vocab = _load_retriever(cfg)
    corpus = read_jsonl_corpus(_existing(cfg["corpus"], "corpus"))
    index = build_index(model.fp, corpus, vocab)
    index.save(out / "index.ckpt")
    print(f"indexed {len(index)} passages; wrote {out / 'index.ckpt'}")
    return EXIT_OK


def cmd_search(cfg: dict, out: Path) -> int:
    _require(cfg, "index", "queries")
    if cfg["k"] < 1:
        raise UsageError("k must be >= 1")
    model, vocab = _load_retriever(cfg)
    index = RetrievalIndex.load(_existing(cfg["index"], "index"))
    queries = read_queries(_existing(cfg["queries"], "queries"))
    if cfg["k"] > len(index):
        print(f"warning: k={cfg['k']} exceeds index size {len(index)}; returning all passages", file=sys.stderr)
    run = retrieve(model, queries, index, vocab, cfg["k"], cfg["query_max_len"])
    write_run(run, out / "run.trec", cfg["tag"])
    sys.stdout.write((out / "run.trec").read_text(encoding="utf-8"))
    return EXIT_OK


def cmd_eval(cfg: dict, out: Path) -> int:
    _require(cfg, "run", "qrels")
    report = evaluate(read_run(_existing(cfg["run"], "run file")), read_qrels(_existing(cfg["qrels"], "qrels")))
    (out / "metrics.json").write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.table())
    return EXIT_OK


def cmd_gradcheck(cfg: dict, out: Path) -> int:
    from .checks import run_suites

    results = run_suites(cfg["seed"], cfg["inject_fault"])
    for r in results:
        print(r.line())
    (out / "gradcheck.json").write_text(json.dumps({r.name: r.max_error for r in results}, indent=2) + "\n")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def cmd_desk(cfg: dict, out: Path) -> int:
    from .experiment import DeskConfig, run_desk_experiment

    desk = DeskConfig(seed=cfg["seed"], stage1_steps=cfg["stage1_steps"], stage2_steps=cfg["stage2_steps"],
                      probe_every=cfg["probe_every"])
    result = run_desk_experiment(desk, out)
    summary = result.summary()
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps({k: summary[k] for k in ("pretrained_recall5", "random_recall5", "seconds")}))
    print(f"final alignment gap {result.final_gap:.4f}")
    return EXIT_OK


HANDLERS: dict[str, Callable[[dict, Path], int]] = {
    "synth": cmd_synth, "pretrain1": cmd_pretrain1, "pretrain2": cmd_pretrain2, "finetune": cmd_finetune,
    "mine": cmd_mine, "index": cmd_index, "search": cmd_search, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
    "desk": cmd_desk,
}

DATA_ERRORS = (DataError, FormatError, CorpusFormatError, checkpoint.CheckpointError, FileNotFoundError,
               NonFiniteGradient, ConfigError, ValueError, OSError)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help()
            return EXIT_USAGE
        overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
        cfg = resolve_config(args.command, args.config, overrides)
        level = getattr(logging, str(cfg["log_level"]).upper(), None)
        if not isinstance(level, int):
            raise UsageError(f"unknown log level {cfg['log_level']!r}")
        logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        checkpoint.atomic_write(out / f"{args.command}.cfg", checkpoint.dump_config(cfg).encode("utf-8"))
        return HANDLERS[args.command](cfg, out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
