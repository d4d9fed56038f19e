"""Two-file checkpoints: a text manifest and a raw float32 blob.

The manifest lists the format version, architecture, a flat config
snapshot, the vocabulary (one token per line, manifest order = id order),
an optional optimizer step, and one line per array with its shape and
offset (counted in float32 elements) into `<path>.bin`.  The blob is plain
little-endian float32, so a save/load round trip reproduces parameters
bit-identically.  Writes go to a temp file first and are renamed into
place.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from bidiseq.data import RESERVED_TOKENS, Vocab
from bidiseq.tensor import Tensor

MAGIC = "bidiseq-checkpoint-v1"


class CheckpointError(ValueError):
    """Checkpoint file is missing pieces or has the wrong version."""


def _dims(shape: tuple) -> str:
    return ",".join(map(str, shape)) if shape else "-"


def _parse_dims(text: str) -> tuple:
    return () if text == "-" else tuple(int(d) for d in text.split(","))


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_checkpoint(path, model, vocab: Vocab, config_items: dict,
                    optimizer=None) -> None:
    """Write `<path>` (manifest) and `<path>.bin` (float32 blob)."""
    path = Path(path)
    arrays: list[tuple[str, np.ndarray]] = [
        (name, t.values) for name, t in model.params.items()]
    if optimizer is not None:
        for name in model.params:
            if name in optimizer.m:
                arrays.append((f"adam.m.{name}", optimizer.m[name]))
                arrays.append((f"adam.v.{name}", optimizer.v[name]))
    lines = [MAGIC, f"architecture\t{model.architecture}"]
    for key, value in config_items.items():
        lines.append(f"config\t{key}={value}")
    for token in vocab.id_to_token:
        if any(ch.isspace() for ch in token):
            raise CheckpointError(f"vocabulary token {token!r} contains whitespace")
        lines.append(f"vocab\t{token}")
    if optimizer is not None:
        lines.append(f"optimizer_step\t{optimizer.step}")
    blob = bytearray()
    offset = 0
    for name, values in arrays:
        flat = np.ascontiguousarray(values, dtype="<f4")
        lines.append(f"param\t{name}\t{_dims(values.shape)}\t{offset}\t{flat.size}")
        blob += flat.tobytes()
        offset += flat.size
    _atomic_write(Path(str(path) + ".bin"), bytes(blob))
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def load_checkpoint(path):
    """Read a checkpoint pair; returns (model, vocab, config dict, optimizer).

    The optimizer is an AdamState when moments were saved, else None.
    """
    from bidiseq.lstm import LstmConfig, LstmModel
    from bidiseq.training import AdamState
    from bidiseq.transformer import TransformerConfig, TransformerModel

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != MAGIC:
        raise CheckpointError(
            f"{path}: not a {MAGIC} file (found {lines[0][:40]!r})"
            if lines else f"{path}: empty manifest")
    blob = np.fromfile(str(path) + ".bin", dtype="<f4")
    arch = None
    config: dict[str, str] = {}
    tokens: list[str] = []
    entries: list[tuple[str, tuple, int, int]] = []
    opt_step = None
    for line in lines[1:]:
        if not line:
            continue
        kind, _, rest = line.partition("\t")
        if kind == "architecture":
            arch = rest
        elif kind == "config":
            key, _, value = rest.partition("=")
            config[key] = value
        elif kind == "vocab":
            tokens.append(rest)
        elif kind == "optimizer_step":
            opt_step = int(rest)
        elif kind == "param":
            name, dims, offset, numel = rest.split("\t")
            entries.append((name, _parse_dims(dims), int(offset), int(numel)))
        else:
            raise CheckpointError(f"{path}: unknown manifest entry {kind!r}")
    if arch is None or not tokens:
        raise CheckpointError(f"{path}: manifest lacks architecture or vocabulary")
    if tokens[:6] != list(RESERVED_TOKENS):
        raise CheckpointError(f"{path}: vocabulary lacks the reserved prefix")
    vocab = Vocab(tokens[6:])

    def pick(name):
        for n, dims, off, num in entries:
            if n == name:
                return blob[off:off + num].reshape(dims).copy()
        return None

    params = {}
    for name, dims, off, num in entries:
        if name.startswith("adam."):
            continue
        params[name] = Tensor(blob[off:off + num].reshape(dims).copy(),
                              requires_grad=True)
    if arch == "transformer":
        cfg = TransformerConfig(
            vocab_size=len(vocab),
            d_model=int(config["d_model"]),
            layers=int(config["layers"]),
            heads=int(config["heads"]),
            ffn_dim=int(config["ffn_dim"]),
            dropout=float(config["dropout_resolved"]),
            separate_future_kv=config.get("separate_future_kv", "false") == "true")
        model = TransformerModel(cfg, params=params,
                                 bidirectional="lam" in params)
    elif arch == "lstm":
        cfg = LstmConfig(
            vocab_size=len(vocab),
            d_model=int(config["d_model"]),
            layers=int(config["layers"]),
            dropout=float(config["dropout_resolved"]),
            share_directions=config.get("share_directions", "true") == "true")
        model = LstmModel(cfg, params=params)
    else:
        raise CheckpointError(f"{path}: unknown architecture {arch!r}")
    optimizer = None
    if opt_step is not None:
        optimizer = AdamState(step=opt_step)
        for name in params:
            m = pick(f"adam.m.{name}")
            v = pick(f"adam.v.{name}")
            if m is not None and v is not None:
                optimizer.m[name] = m
                optimizer.v[name] = v
    return model, vocab, config, optimizer
