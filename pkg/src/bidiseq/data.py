"""Vocabulary, toy-task corpora, batching, and corpus file I/O.

Reserved ids 0-5 are fixed across every vocabulary so checkpoints stay
portable: pad, sequence start/end, unknown, and the two direction tags that
mark whether a hypothesis is being generated left-to-right or right-to-left.

Corpus files are UTF-8 text, one example per line, "source<TAB>target" with
whitespace-tokenized fields.  Vocabulary files are one token per line, line
number = id.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

PAD, BOS, EOS, UNK, L2R, R2L = range(6)
PAD_TOKEN = "<pad>"
BOS_TOKEN = "<s>"
EOS_TOKEN = "</s>"
UNK_TOKEN = "<unk>"
L2R_TOKEN = "<l2r>"
R2L_TOKEN = "<r2l>"
RESERVED_TOKENS = (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN, L2R_TOKEN, R2L_TOKEN)


class CorpusFormatError(ValueError):
    """A corpus or vocabulary file line does not parse."""


class Vocab:
    """Bijective token<->id map with the six reserved entries always present."""

    def __init__(self, tokens):
        self.id_to_token = list(RESERVED_TOKENS) + [
            t for t in tokens if t not in RESERVED_TOKENS]
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            dupes = [t for i, t in enumerate(self.id_to_token)
                     if self.token_to_id[t] != i]
            raise CorpusFormatError(f"duplicate vocabulary tokens: {dupes[:5]}")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    @classmethod
    def build(cls, corpora) -> "Vocab":
        """Collect every token of the given corpora, sorted for determinism."""
        seen = set()
        for corpus in corpora:
            for triple in corpus:
                seen.update(triple.source)
                seen.update(triple.target)
        return cls(sorted(seen - set(RESERVED_TOKENS)))

    def encode(self, tokens) -> list[int]:
        return [self.token_to_id.get(t, UNK) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def encode_line(self, line: str) -> list[int]:
        return self.encode(line.split())

    def decode_line(self, ids) -> str:
        return " ".join(self.decode(ids))

    def save(self, path) -> None:
        Path(path).write_text(
            "".join(t + "\n" for t in self.id_to_token), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if lines[:6] != list(RESERVED_TOKENS):
            raise CorpusFormatError(
                f"{path}: first six lines must be the reserved tokens {RESERVED_TOKENS}")
        return cls(lines[6:])


@dataclass(frozen=True)
class TrainingTriple:
    """One example: source tokens, forward target, and optional pseudo-targets.

    The backward target is always the reverse of the forward one; pseudo
    targets are model decodes attached by the training stage and are stored
    in each direction's own generation order.
    """

    source: tuple[str, ...]
    target: tuple[str, ...]
    pseudo_forward: tuple[str, ...] | None = None
    pseudo_backward: tuple[str, ...] | None = None

    @property
    def target_backward(self) -> tuple[str, ...]:
        return tuple(reversed(self.target))

    def with_pseudo(self, forward, backward) -> "TrainingTriple":
        return replace(self, pseudo_forward=tuple(forward),
                       pseudo_backward=tuple(backward))


@dataclass
class Batch:
    """Padded id matrices plus masks; mask value 1 marks a real position.

    Source rows are framed <s> ... </s>.  Decoder inputs start with the
    direction tag; decoder outputs end with </s>.  Forward rows follow the
    target order, backward rows the reversed order.
    """

    src: np.ndarray
    src_mask: np.ndarray
    fwd_in: np.ndarray
    fwd_out: np.ndarray
    fwd_mask: np.ndarray
    bwd_in: np.ndarray
    bwd_out: np.ndarray
    bwd_mask: np.ndarray
    triples: list = field(default_factory=list)

    def __len__(self) -> int:
        return self.src.shape[0]


def pad_rows(rows, pad_id: int = PAD) -> tuple[np.ndarray, np.ndarray]:
    """Pad integer id rows to a matrix, returning (ids, mask)."""
    width = max((len(r) for r in rows), default=0)
    ids = np.full((len(rows), max(width, 1)), pad_id, dtype=np.int64)
    mask = np.zeros_like(ids, dtype=np.float64)
    for i, row in enumerate(rows):
        ids[i, :len(row)] = row
        mask[i, :len(row)] = 1.0
    return ids, mask


def _target_rows(token_rows, vocab: Vocab, tag: int):
    ins, outs = [], []
    for tokens in token_rows:
        ids = vocab.encode(tokens)
        ins.append([tag] + ids)
        outs.append(ids + [EOS])
    return ins, outs


def make_batch(triples, vocab: Vocab) -> Batch:
    """Encode and pad a group of triples into one batch."""
    src_rows = [[BOS] + vocab.encode(t.source) + [EOS] for t in triples]
    src, src_mask = pad_rows(src_rows)
    fwd_ins, fwd_outs = _target_rows([t.target for t in triples], vocab, L2R)
    bwd_ins, bwd_outs = _target_rows([t.target_backward for t in triples], vocab, R2L)
    fwd_in, fwd_mask = pad_rows(fwd_ins)
    fwd_out, _ = pad_rows(fwd_outs)
    bwd_in, bwd_mask = pad_rows(bwd_ins)
    bwd_out, _ = pad_rows(bwd_outs)
    return Batch(src, src_mask, fwd_in, fwd_out, fwd_mask,
                 bwd_in, bwd_out, bwd_mask, triples=list(triples))


def batchify(corpus, vocab: Vocab, batch_size: int,
             sort_by_length: bool = False) -> list[Batch]:
    """Split a corpus into padded batches; every triple appears exactly once."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    corpus = list(corpus)
    if sort_by_length:
        corpus = sorted(corpus, key=lambda t: (len(t.source), len(t.target)))
    return [make_batch(corpus[i:i + batch_size], vocab)
            for i in range(0, len(corpus), batch_size)]


# ---------------------------------------------------------------------------
# toy task generators
# ---------------------------------------------------------------------------

def gen_copy_task(count: int, vocab_size: int, len_range: tuple[int, int],
                  seed: int) -> list[TrainingTriple]:
    """Copy task: target equals source.  vocab_size counts the reserved six."""
    if vocab_size < 8:
        raise ValueError(f"vocab_size must be >= 8 (6 reserved + 2 content), got {vocab_size}")
    lo, hi = len_range
    if not (1 <= lo <= hi <= 64):
        raise ValueError(f"len_range must sit inside [1, 64], got {len_range}")
    words = [f"w{i}" for i in range(vocab_size - 6)]
    rng = np.random.default_rng(seed)
    corpus = []
    for _ in range(count):
        n = int(rng.integers(lo, hi + 1))
        toks = tuple(words[i] for i in rng.integers(0, len(words), size=n))
        corpus.append(TrainingTriple(source=toks, target=toks))
    return corpus


OPEN_BRACKETS = ("(", "[", "{", "<")
CLOSE_OF = {"(": ")", "[": "]", "{": "}", "<": ">"}


def gen_bracket_task(count: int, depth_range: tuple[int, int],
                     noise_symbols: int, seed: int,
                     noise_rate: float = 0.4) -> list[TrainingTriple]:
    """Nesting task that manufactures a head/tail difficulty asymmetry.

    The source is a well-nested run of typed opening brackets with noise
    tokens sprinkled in.  The target repeats the noise-free opening run and
    then closes every bracket in correct nesting order, so the closing
    suffix is the reverse-typed mirror of the whole opening prefix: heads
    are a local filtering job, tails require the entire stack.
    """
    lo, hi = depth_range
    if not (1 <= lo <= hi <= 12):
        raise ValueError(f"depth_range must sit inside [1, 12], got {depth_range}")
    noise = [f"n{i}" for i in range(noise_symbols)]
    rng = np.random.default_rng(seed)
    corpus = []
    for _ in range(count):
        depth = int(rng.integers(lo, hi + 1))
        opens = [OPEN_BRACKETS[i] for i in rng.integers(0, len(OPEN_BRACKETS), size=depth)]
        source = []
        for b in opens:
            source.append(b)
            while noise and rng.random() < noise_rate:
                source.append(noise[int(rng.integers(0, len(noise)))])
        target = opens + [CLOSE_OF[b] for b in reversed(opens)]
        corpus.append(TrainingTriple(source=tuple(source), target=tuple(target)))
    return corpus


# ---------------------------------------------------------------------------
# corpus files
# ---------------------------------------------------------------------------

def write_corpus(path, corpus) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for triple in corpus:
            fh.write(" ".join(triple.source) + "\t" + " ".join(triple.target) + "\n")


def read_corpus(path) -> list[TrainingTriple]:
    corpus = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise CorpusFormatError(
                    f"{path}: line {lineno}: expected 'source<TAB>target', "
                    f"found {len(parts)} field(s)")
            corpus.append(TrainingTriple(source=tuple(parts[0].split()),
                                         target=tuple(parts[1].split())))
    return corpus
