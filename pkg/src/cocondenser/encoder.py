"""Word-level tokenization, embeddings and post-LN Transformer blocks."""

from __future__ import annotations

import math
import re
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from .tensor import (
    ParameterSet,
    ShapeError,
    Tensor,
    embedding,
    gelu,
    layer_norm,
    masked_fill,
    no_grad,
    softmax,
)

CLS, SEP, MASK, PAD, UNK = "[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]"
RESERVED = (CLS, SEP, MASK, PAD, UNK)
CLS_ID, SEP_ID, MASK_ID, PAD_ID, UNK_ID = range(5)

_TOKEN = re.compile(r"\w+|[^\w\s]")
LN_EPS = 1e-12


def split_words(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


class Vocabulary:
    def __init__(self, words: Iterable[str]):
        self.tokens: list[str] = list(RESERVED)
        self.index: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for w in words:
            w = w.lower()
            if w in self.index:
                raise ValueError(f"duplicate vocabulary entry {w!r}")
            self.index[w] = len(self.tokens)
            self.tokens.append(w)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, word: str) -> bool:
        return word.lower() in self.index

    def id_of(self, word: str) -> int:
        return self.index.get(word.lower(), UNK_ID)

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int | None = None) -> Vocabulary:
        """Most frequent words first; ties broken alphabetically."""
        counts = Counter(w for t in texts for w in split_words(t))
        ranked = sorted(counts, key=lambda w: (-counts[w], w))
        if max_size is not None:
            ranked = ranked[: max(0, max_size - len(RESERVED))]
        return cls(ranked)

    def save(self, path: str | Path) -> None:
        checkpoint.atomic_write(path, "".join(t + "\n" for t in self.tokens[len(RESERVED):]).encode("utf-8"))

    @classmethod
    def load(cls, path: str | Path) -> Vocabulary:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(line for line in lines if line)


@dataclass
class TokenSequence:
    ids: list[int]
    attention_mask: list[int]

    def __len__(self) -> int:
        return len(self.ids)


def prepare(ids: Sequence[int], max_len: int, pad: bool = False) -> TokenSequence:
    """Prepend [CLS], truncate to ``max_len`` and optionally pad."""
    out = [CLS_ID, *ids][:max_len]
    mask = [1] * len(out)
    if pad:
        mask += [0] * (max_len - len(out))
        out += [PAD_ID] * (max_len - len(out))
    return TokenSequence(out, mask)


def tokenize(text: str, vocab: Vocabulary, max_len: int = 128, pad: bool = False) -> TokenSequence:
    return prepare([vocab.id_of(w) for w in split_words(text)], max_len, pad)


def collate(seqs: Sequence[TokenSequence]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to the longest sequence; returns ids (B, L) and a boolean mask."""
    if not seqs:
        raise ValueError("cannot collate an empty batch")
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s.ids
        mask[i, : len(s)] = np.asarray(s.attention_mask, dtype=bool)
    return ids, mask


# ---------------------------------------------------------------- parameters


def init_embeddings(params: ParameterSet, vocab_size: int, max_len: int, hidden: int,
                    rng: np.random.Generator, std: float) -> None:
    params["embed.tokens"] = Tensor(rng.normal(0.0, std, (vocab_size, hidden)), requires_grad=True)
    params["embed.positions"] = Tensor(rng.normal(0.0, std, (max_len, hidden)), requires_grad=True)


def init_layer(params: ParameterSet, prefix: str, hidden: int, ffn: int,
               rng: np.random.Generator, std: float) -> None:
    def weight(*shape):
        return Tensor(rng.normal(0.0, std, shape), requires_grad=True)

    def const(value, n):
        return Tensor(np.full(n, value), requires_grad=True)

    # The key projection has no bias: it shifts every logit of a row equally.
    for name in ("wq", "wk", "wv", "wo"):
        params[f"{prefix}.attn.{name}"] = weight(hidden, hidden)
    for name in ("bq", "bv", "bo"):
        params[f"{prefix}.attn.{name}"] = const(0.0, hidden)
    params[f"{prefix}.ffn.w1"] = weight(hidden, ffn)
    params[f"{prefix}.ffn.b1"] = const(0.0, ffn)
    params[f"{prefix}.ffn.w2"] = weight(ffn, hidden)
    params[f"{prefix}.ffn.b2"] = const(0.0, hidden)
    for ln in ("ln1", "ln2"):
        params[f"{prefix}.{ln}.gain"] = const(1.0, hidden)
        params[f"{prefix}.{ln}.bias"] = const(0.0, hidden)


# ---------------------------------------------------------------- forward


def embed(params: ParameterSet, ids: np.ndarray) -> Tensor:
    """Token plus learned absolute position embedding, shape (B, L, d)."""
    ids = np.atleast_2d(ids)
    table = params["embed.positions"]
    if ids.shape[1] > table.shape[0]:
        raise ShapeError(f"sequence length {ids.shape[1]} exceeds position table of {table.shape[0]}")
    return embedding(params["embed.tokens"], ids) + table[: ids.shape[1]]


def self_attention(x: Tensor, mask: np.ndarray, params: ParameterSet, prefix: str, heads: int) -> Tensor:
    b, length, d = x.shape
    if d % heads:
        raise ShapeError(f"hidden size {d} not divisible by {heads} heads")
    dh = d // heads

    def split(t: Tensor) -> Tensor:
        return t.reshape(b, length, heads, dh).transpose(0, 2, 1, 3)

    p = lambda name: params[f"{prefix}.attn.{name}"]  # noqa: E731
    q = split(x @ p("wq") + p("bq"))
    k = split(x @ p("wk"))
    v = split(x @ p("wv") + p("bv"))
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    scores = masked_fill(scores, ~mask[:, None, None, :], -np.inf)
    ctx = softmax(scores, axis=-1) @ v
    ctx = ctx.transpose(0, 2, 1, 3).reshape(b, length, d)
    return ctx @ p("wo") + p("bo")


def encoder_layer(x: Tensor, mask: np.ndarray, params: ParameterSet, prefix: str, heads: int) -> Tensor:
    p = lambda name: params[f"{prefix}.{name}"]  # noqa: E731
    x = layer_norm(x + self_attention(x, mask, params, prefix, heads), p("ln1.gain"), p("ln1.bias"), LN_EPS)
    h = gelu(x @ p("ffn.w1") + p("ffn.b1")) @ p("ffn.w2") + p("ffn.b2")
    return layer_norm(x + h, p("ln2.gain"), p("ln2.bias"), LN_EPS)


def encoder_stack(x: Tensor, layers: Sequence[str], mask: np.ndarray, params: ParameterSet, heads: int) -> Tensor:
    """Apply the layers named by ``layers`` (parameter prefixes) in order."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:2]:
        raise ShapeError(f"mask shape {mask.shape} does not match input {x.shape[:2]}")
    for prefix in layers:
        x = encoder_layer(x, mask, params, prefix, heads)
    return x


# ---------------------------------------------------------------- backbone encoder


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    hidden: int = 64
    heads: int = 4
    ffn: int = 256
    max_len: int = 128
    n_layers: int = 4

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.n_layers < 1:
            raise ValueError("an encoder needs at least one layer")

    def to_dict(self) -> dict:
        return {"kind": "encoder", **asdict(self)}

    @classmethod
    def from_dict(cls, values: dict) -> EncoderConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: int(v) for k, v in values.items() if k in names})


class Encoder:
    """Plain Transformer encoder returning per-token states and the CLS row."""

    def __init__(self, config: EncoderConfig, params: ParameterSet):
        self.config = config
        self.params = params
        self.layers = [f"layers.{i}" for i in range(config.n_layers)]

    @classmethod
    def init(cls, config: EncoderConfig, rng: np.random.Generator, std: float = 0.02) -> Encoder:
        params = ParameterSet()
        init_embeddings(params, config.vocab_size, config.max_len, config.hidden, rng, std)
        for prefix in [f"layers.{i}" for i in range(config.n_layers)]:
            init_layer(params, prefix, config.hidden, config.ffn, rng, std)
        return cls(config, params)

    def forward(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        return encoder_stack(embed(self.params, ids), self.layers, mask, self.params, self.config.heads)

    def cls(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        return self.forward(ids, mask)[:, 0, :]

    def encode(self, seqs: Sequence[TokenSequence], batch_size: int = 64) -> np.ndarray:
        """CLS vectors for ``seqs`` without recording a graph, shape (N, d)."""
        out = np.zeros((len(seqs), self.config.hidden))
        with no_grad():
            for lo in range(0, len(seqs), batch_size):
                ids, mask = collate(seqs[lo:lo + batch_size])
                out[lo:lo + len(ids)] = self.cls(ids, mask).data
        return out

    def copy(self) -> Encoder:
        return Encoder(self.config, self.params.copy())

    def save(self, path: str | Path) -> None:
        path = Path(path)
        checkpoint.save(self.params, path)
        checkpoint.atomic_write(path.with_suffix(".cfg"), checkpoint.dump_config(self.config.to_dict()).encode())

    @classmethod
    def load(cls, path: str | Path) -> Encoder:
        path = Path(path)
        cfg = checkpoint.parse_config(path.with_suffix(".cfg").read_text(), str(path.with_suffix(".cfg")))
        if cfg.get("kind") != "encoder":
            raise checkpoint.CheckpointError(f"{path} is not a plain encoder checkpoint (kind={cfg.get('kind')})")
        return cls(EncoderConfig.from_dict(cfg), checkpoint.load(path))

