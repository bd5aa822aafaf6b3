"""Condenser: early/late backbone, a head fed by the late CLS plus early tokens, MLM on the head."""

from __future__ import annotations

import hashlib
from collections.abc import Sequence
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from .encoder import (
    CLS_ID,
    LN_EPS,
    MASK_ID,
    PAD_ID,
    Encoder,
    EncoderConfig,
    TokenSequence,
    collate,
    embed,
    encoder_stack,
    init_embeddings,
    init_layer,
)
from .tensor import ParameterSet, Tensor, concat, cross_entropy, layer_norm, no_grad

N_RESERVED = 5


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CondenserConfig:
    vocab_size: int
    n_early: int = 2
    n_late: int = 2
    n_head: int = 2
    hidden: int = 64
    heads: int = 4
    ffn: int = 256
    max_len: int = 128
    mask_rate: float = 0.15

    def __post_init__(self):
        for name in ("n_early", "n_late", "n_head"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 < self.mask_rate < 1.0:
            raise ConfigError(f"mask_rate must lie in (0, 1), got {self.mask_rate}")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.vocab_size <= N_RESERVED:
            raise ConfigError("vocabulary holds only reserved tokens")

    def to_dict(self) -> dict:
        return {"kind": "condenser", **asdict(self)}

    @classmethod
    def from_dict(cls, values: dict) -> CondenserConfig:
        kw = {}
        for f in fields(cls):
            if f.name in values:
                kw[f.name] = float(values[f.name]) if f.name == "mask_rate" else int(values[f.name])
        return cls(**kw)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.vocab_size, self.hidden, self.heads, self.ffn, self.max_len,
                             self.n_early + self.n_late)


@dataclass
class ForwardTrace:
    """Full stack outputs of one batch; the split fields slice them."""

    mask: np.ndarray
    early: Tensor
    late: Tensor
    head: Tensor | None = None

    @property
    def h_cls_early(self) -> Tensor:
        return self.early[:, 0, :]

    @property
    def h_early(self) -> Tensor:
        return self.early[:, 1:, :]

    @property
    def h_cls_late(self) -> Tensor:
        return self.late[:, 0, :]

    @property
    def h_late(self) -> Tensor:
        return self.late[:, 1:, :]

    @property
    def h_cls_cd(self) -> Tensor:
        return self.head[:, 0, :]

    @property
    def h_cd(self) -> Tensor:
        return self.head[:, 1:, :]


@dataclass
class MaskedBatch:
    sequences: list[TokenSequence]
    positions: list[list[int]]
    originals: list[list[int]]

    def __len__(self) -> int:
        return len(self.sequences)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """ids, mask, batch index, position index and target of every masked slot."""
        ids, mask = collate(self.sequences)
        bidx = np.concatenate([np.full(len(p), i) for i, p in enumerate(self.positions)]).astype(np.int64)
        pidx = np.concatenate([np.asarray(p, dtype=np.int64) for p in self.positions])
        targets = np.concatenate([np.asarray(o, dtype=np.int64) for o in self.originals])
        return ids, mask, bidx, pidx, targets

    def subset(self, idx: Sequence[int]) -> MaskedBatch:
        return MaskedBatch([self.sequences[i] for i in idx], [self.positions[i] for i in idx],
                           [self.originals[i] for i in idx])

    def checksum(self) -> str:
        h = hashlib.sha256()
        for seq, pos, orig in zip(self.sequences, self.positions, self.originals):
            for part in (seq.ids, seq.attention_mask, pos, orig):
                h.update(np.asarray(part, dtype="<i8").tobytes())
                h.update(b"|")
        return h.hexdigest()


def _mask_one(seq: TokenSequence, rate: float, rng: np.random.Generator,
              vocab_size: int) -> tuple[TokenSequence, list[int], list[int]]:
    eligible = [i for i, (t, m) in enumerate(zip(seq.ids, seq.attention_mask))
                if m and t not in (CLS_ID, PAD_ID)]
    if not eligible:
        raise ValueError("sequence has no maskable positions")
    while True:
        chosen = [i for i in eligible if rng.random() < rate]
        if chosen:
            break
    ids = list(seq.ids)
    for i in chosen:
        u = rng.random()
        if u < 0.8:
            ids[i] = MASK_ID
        elif u < 0.9:
            ids[i] = int(rng.integers(N_RESERVED, vocab_size))
    return TokenSequence(ids, list(seq.attention_mask)), chosen, [seq.ids[i] for i in chosen]


def apply_masking(seqs: TokenSequence | Sequence[TokenSequence], rate: float,
                  rng: np.random.Generator | Sequence[np.random.Generator], vocab_size: int) -> MaskedBatch:
    """BERT-style corruption; a chosen position becomes [MASK] with probability 0.8, otherwise a random token half the time.

    ``rng`` is one generator shared by all sequences or one per sequence.
    """
    if isinstance(seqs, TokenSequence):
        seqs = [seqs]
    rngs = [rng] * len(seqs) if isinstance(rng, np.random.Generator) else list(rng)
    if len(rngs) != len(seqs):
        raise ValueError("need one generator per sequence")
    out = MaskedBatch([], [], [])
    for seq, r in zip(seqs, rngs):
        corrupted, pos, orig = _mask_one(seq, rate, r, vocab_size)
        out.sequences.append(corrupted)
        out.positions.append(pos)
        out.originals.append(orig)
    return out


class CondenserModel:
    def __init__(self, config: CondenserConfig, params: ParameterSet):
        self.config = config
        self.params = params
        self.early = [f"early.{i}" for i in range(config.n_early)]
        self.late = [f"late.{i}" for i in range(config.n_late)]
        self.head = [f"head.{i}" for i in range(config.n_head)]

    @classmethod
    def init(cls, config: CondenserConfig, rng: np.random.Generator, std: float = 0.02) -> CondenserModel:
        c = config
        params = ParameterSet()
        init_embeddings(params, c.vocab_size, c.max_len, c.hidden, rng, std)
        for group, n in (("early", c.n_early), ("late", c.n_late), ("head", c.n_head)):
            for i in range(n):
                init_layer(params, f"{group}.{i}", c.hidden, c.ffn, rng, std)
        params["mlm.ln.gain"] = Tensor(np.ones(c.hidden), requires_grad=True)
        params["mlm.ln.bias"] = Tensor(np.zeros(c.hidden), requires_grad=True)
        params["mlm.w"] = Tensor(rng.normal(0.0, std, (c.hidden, c.vocab_size)), requires_grad=True)
        params["mlm.b"] = Tensor(np.zeros(c.vocab_size), requires_grad=True)
        return cls(config, params)

    # forward ---------------------------------------------------------------

    def forward_backbone(self, ids: np.ndarray, mask: np.ndarray) -> ForwardTrace:
        ids = np.atleast_2d(ids)
        if ids.shape[1] == 0:
            raise ValueError("empty sequence")
        mask = np.asarray(mask, dtype=bool).reshape(ids.shape)
        heads = self.config.heads
        early = encoder_stack(embed(self.params, ids), self.early, mask, self.params, heads)
        late = encoder_stack(early, self.late, mask, self.params, heads)
        return ForwardTrace(mask, early, late)

    def forward_head(self, trace: ForwardTrace) -> Tensor:
        """Run the head on [late CLS ; early tokens] and store its output on the trace."""
        if trace.early is None or trace.late is None:
            raise ValueError("trace lacks backbone outputs")
        x = concat([trace.late[:, :1, :], trace.early[:, 1:, :]], axis=1)
        trace.head = encoder_stack(x, self.head, trace.mask, self.params, self.config.heads)
        return trace.head

    def forward(self, ids: np.ndarray, mask: np.ndarray) -> ForwardTrace:
        trace = self.forward_backbone(ids, mask)
        self.forward_head(trace)
        return trace

    def mlm_logits(self, states: Tensor) -> Tensor:
        p = self.params
        return layer_norm(states, p["mlm.ln.gain"], p["mlm.ln.bias"], LN_EPS) @ p["mlm.w"] + p["mlm.b"]

    def mlm_losses(self, trace: ForwardTrace, bidx: np.ndarray, pidx: np.ndarray,
                   targets: np.ndarray) -> Tensor:
        """Per-sequence mean cross-entropy over masked slots, shape (B,)."""
        if len(bidx) == 0:
            raise ValueError("no masked positions")
        b = trace.head.shape[0]
        counts = np.bincount(bidx, minlength=b)
        if np.any(counts == 0):
            raise ValueError("every sequence needs at least one masked position")
        losses = cross_entropy(self.mlm_logits(trace.head[bidx, pidx]), targets)
        avg = np.zeros((b, len(bidx)))
        avg[bidx, np.arange(len(bidx))] = 1.0 / counts[bidx]
        return (Tensor(avg) @ losses.reshape(len(bidx), 1)).reshape(b)

    def mlm_loss(self, masked: MaskedBatch) -> Tensor:
        """Mean over sequences of each sequence's masked-token cross-entropy."""
        ids, mask, bidx, pidx, targets = masked.arrays()
        return self.mlm_losses(self.forward(ids, mask), bidx, pidx, targets).mean()

    def late_cls(self, seqs: Sequence[TokenSequence], batch_size: int = 64) -> np.ndarray:
        out = np.zeros((len(seqs), self.config.hidden))
        with no_grad():
            for lo in range(0, len(seqs), batch_size):
                ids, mask = collate(seqs[lo:lo + batch_size])
                out[lo:lo + len(ids)] = self.forward_backbone(ids, mask).late.data[:, 0, :]
        return out

    # persistence -----------------------------------------------------------

    def save(self, path: str | Path) -> None:
        path = Path(path)
        checkpoint.save(self.params, path)
        checkpoint.atomic_write(path.with_suffix(".cfg"), checkpoint.dump_config(self.config.to_dict()).encode())

    @classmethod
    def load(cls, path: str | Path) -> CondenserModel:
        path = Path(path)
        cfg = checkpoint.parse_config(path.with_suffix(".cfg").read_text(), str(path.with_suffix(".cfg")))
        if cfg.get("kind") != "condenser":
            raise checkpoint.CheckpointError(f"{path} is not a Condenser checkpoint (kind={cfg.get('kind')})")
        return cls(CondenserConfig.from_dict(cfg), checkpoint.load(path))


def strip_head(model: CondenserModel) -> Encoder:
    """Drop head and MLM projection; early then late layers become ``layers.*``."""
    c = model.config
    params = ParameterSet()
    rename = {**{f"early.{i}.": f"layers.{i}." for i in range(c.n_early)},
              **{f"late.{i}.": f"layers.{c.n_early + i}." for i in range(c.n_late)}}
    for path in model.params:
        src = model.params[path]
        if path.startswith("embed."):
            params[path] = Tensor(src.data.copy(), requires_grad=True)
            continue
        for old, new in rename.items():
            if path.startswith(old):
                params[new + path[len(old):]] = Tensor(src.data.copy(), requires_grad=True)
                break
    return Encoder(c.encoder_config(), params)
