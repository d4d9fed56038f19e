"""Transformer encoder/decoder with synchronous bidirectional decoding.

The decoder's masked self-attention is split in two: history attention over
the stream's own previous positions, and future attention over the states the
opposite-direction stream produced in earlier steps.  The two are merged as

    z = z_past + lambda * tanh(z_future)

with a single learned scalar `lambda`, so the bidirectional model carries
exactly one parameter more than the unidirectional baseline.  Both decoding
directions share all weights; the direction tag fed as the first token is the
only directional signal.

Training-time forwards run batched over whole sequences with additive masks;
inference steps one position at a time on plain numpy arrays with per-layer
key/value caches (see `TransformerScorer`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bidiseq import tensor as T
from bidiseq.tensor import InvalidArgumentError, Tensor

NEG_INF = -1e9


class ConfigError(ValueError):
    """Model configuration is inconsistent."""


@dataclass
class TransformerConfig:
    vocab_size: int
    d_model: int = 64
    layers: int = 2
    heads: int = 4
    ffn_dim: int = 128
    dropout: float = 0.1
    share_embeddings: bool = True
    # Spec'd alternative reading: give the future attention its own K/V
    # projections.  Breaks the one-extra-parameter parity, so off by default.
    separate_future_kv: bool = False

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by heads {self.heads}")


def positional_encoding(length: int, d_model: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal position table, rows are positions."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    dim = np.arange(d_model, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2 * (dim // 2)) / d_model)
    enc = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return enc.astype(dtype)


# ---------------------------------------------------------------------------
# attention primitives
# ---------------------------------------------------------------------------

def scaled_dot_attention(q: Tensor, keys: Tensor, values: Tensor,
                         mask=None) -> Tensor:
    """softmax(q K^T / sqrt(d_k)) V with an optional additive mask.

    Raises when a query row has every key masked; decoder internals that
    need an empty-context fallback use the zero-row convention instead.
    """
    if keys.shape[-2] != values.shape[-2]:
        raise InvalidArgumentError(
            f"key count {keys.shape[-2]} != value count {values.shape[-2]}")
    if keys.shape[-2] == 0:
        raise InvalidArgumentError("attention needs at least one key")
    d_k = keys.shape[-1]
    scores = T.mul(T.matmul(q, T.swapaxes(keys, -1, -2)), 1.0 / np.sqrt(d_k))
    if mask is not None:
        mask = np.asarray(mask, dtype=scores.values.dtype)
        if mask.shape[-1] != keys.shape[-2]:
            raise InvalidArgumentError(
                f"mask length {mask.shape[-1]} != key count {keys.shape[-2]}")
        if np.any(np.max(np.broadcast_to(mask, scores.shape), axis=-1) <= NEG_INF / 2):
            raise InvalidArgumentError(
                "a query row has all keys masked; use the zero-context convention")
        scores = T.add(scores, Tensor(mask))
    return T.matmul(T.softmax(scores, axis=-1), values)


def _attention_zero_rows(q: Tensor, keys: Tensor, values: Tensor,
                         mask: np.ndarray) -> Tensor:
    """Masked attention where fully-masked query rows yield zero vectors."""
    d_k = keys.shape[-1]
    scores = T.mul(T.matmul(q, T.swapaxes(keys, -1, -2)), 1.0 / np.sqrt(d_k))
    mask = np.asarray(mask, dtype=scores.values.dtype)
    scores = T.add(scores, Tensor(mask))
    weights = T.softmax(scores, axis=-1)
    keep = (np.max(np.broadcast_to(mask, scores.shape), axis=-1, keepdims=True)
            > NEG_INF / 2).astype(scores.values.dtype)
    return T.matmul(T.mul(weights, Tensor(keep)), values)


def combine_past_future(z_past: Tensor, z_future: Tensor, lam: Tensor) -> Tensor:
    """Merge history and future context: z_past + lambda * tanh(z_future)."""
    if z_past.shape != z_future.shape:
        raise InvalidArgumentError(
            f"past/future shapes differ: {z_past.shape} vs {z_future.shape}")
    return T.add(z_past, T.mul(lam, T.tanh(z_future)))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # [..., t, d] -> [..., heads, t, d/heads]
    *lead, t, d = x.shape
    out = T.reshape(x, (*lead, t, heads, d // heads))
    return T.swapaxes(out, -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, t, dh = x.shape
    return T.reshape(T.swapaxes(x, -2, -3), (*lead, t, h * dh))


def multi_head(params: dict, prefix: str, heads: int, q_in: Tensor,
               k_in: Tensor, v_in: Tensor, mask=None,
               zero_rows: bool = False) -> Tensor:
    """Projected multi-head attention; `prefix` names the weight block."""
    q = _split_heads(T.add(T.matmul(q_in, params[f"{prefix}.wq"]), params[f"{prefix}.bq"]), heads)
    k = _split_heads(T.add(T.matmul(k_in, params[f"{prefix}.wk"]), params[f"{prefix}.bk"]), heads)
    v = _split_heads(T.add(T.matmul(v_in, params[f"{prefix}.wv"]), params[f"{prefix}.bv"]), heads)
    if zero_rows:
        ctx = _attention_zero_rows(q, k, v, mask)
    else:
        ctx = scaled_dot_attention(q, k, v, mask)
    merged = _merge_heads(ctx)
    return T.add(T.matmul(merged, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _attn_block(params, prefix, d, rng):
    for name in ("wq", "wk", "wv", "wo"):
        params[f"{prefix}.{name}"] = T.parameter((d, d), rng)
    for name in ("bq", "bk", "bv", "bo"):
        params[f"{prefix}.{name}"] = T.zeros(d, requires_grad=True)


def _ln_block(params, prefix, d):
    params[f"{prefix}.g"] = T.ones(d, requires_grad=True)
    params[f"{prefix}.b"] = T.zeros(d, requires_grad=True)


def build_transformer_params(cfg: TransformerConfig, rng: np.random.Generator,
                             bidirectional: bool = True) -> dict[str, Tensor]:
    """Named parameter dict; the bidirectional variant adds only `lam`."""
    p: dict[str, Tensor] = {}
    p["emb"] = T.parameter((cfg.vocab_size, cfg.d_model), rng)
    if not cfg.share_embeddings:
        p["emb_tgt"] = T.parameter((cfg.vocab_size, cfg.d_model), rng)
    d, f = cfg.d_model, cfg.ffn_dim
    for l in range(cfg.layers):
        _attn_block(p, f"enc.{l}.self", d, rng)
        _ln_block(p, f"enc.{l}.ln1", d)
        p[f"enc.{l}.ffn.w1"] = T.parameter((d, f), rng)
        p[f"enc.{l}.ffn.b1"] = T.zeros(f, requires_grad=True)
        p[f"enc.{l}.ffn.w2"] = T.parameter((f, d), rng)
        p[f"enc.{l}.ffn.b2"] = T.zeros(d, requires_grad=True)
        _ln_block(p, f"enc.{l}.ln2", d)
    for l in range(cfg.layers):
        _attn_block(p, f"dec.{l}.self", d, rng)
        if cfg.separate_future_kv:
            for name in ("wk", "wv"):
                p[f"dec.{l}.future.{name}"] = T.parameter((d, d), rng)
            for name in ("bk", "bv"):
                p[f"dec.{l}.future.{name}"] = T.zeros(d, requires_grad=True)
        _ln_block(p, f"dec.{l}.ln1", d)
        _attn_block(p, f"dec.{l}.ctx", d, rng)
        _ln_block(p, f"dec.{l}.ln2", d)
        p[f"dec.{l}.ffn.w1"] = T.parameter((d, f), rng)
        p[f"dec.{l}.ffn.b1"] = T.zeros(f, requires_grad=True)
        p[f"dec.{l}.ffn.w2"] = T.parameter((f, d), rng)
        p[f"dec.{l}.ffn.b2"] = T.zeros(d, requires_grad=True)
        _ln_block(p, f"dec.{l}.ln3", d)
    p["out.w"] = T.parameter((d, cfg.vocab_size), rng)
    p["out.b"] = T.zeros(cfg.vocab_size, requires_grad=True)
    if bidirectional:
        p["lam"] = Tensor(np.ones(()), requires_grad=True)
    return p


def parameter_count(params: dict[str, Tensor]) -> int:
    return sum(t.size for t in params.values())


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class TransformerModel:
    """Holds config plus named parameters; exposes batched training forwards
    and an incremental scorer for beam search."""

    architecture = "transformer"

    def __init__(self, cfg: TransformerConfig, params: dict | None = None,
                 seed: int = 0, bidirectional: bool = True):
        self.cfg = cfg
        self.bidirectional = bidirectional
        if params is None:
            params = build_transformer_params(
                cfg, np.random.default_rng(seed), bidirectional)
        self.params = params

    def parameter_count(self) -> int:
        return parameter_count(self.params)

    def _emb(self, decoder: bool) -> Tensor:
        if decoder and not self.cfg.share_embeddings:
            return self.params["emb_tgt"]
        return self.params["emb"]

    def _embed(self, ids: np.ndarray, decoder: bool, positions: bool = True) -> Tensor:
        d = self.cfg.d_model
        x = T.mul(T.embedding(self._emb(decoder), ids), np.sqrt(d))
        if positions:
            pe = positional_encoding(ids.shape[-1], d, x.values.dtype)
            x = T.add(x, Tensor(pe))
        return x

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        h = T.relu(T.add(T.matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
        return T.add(T.matmul(h, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])

    def _ln(self, prefix: str, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def _drop(self, x: Tensor, train: bool, rng) -> Tensor:
        return T.dropout(x, self.cfg.dropout if train else 0.0, rng)

    # -- encoder ----------------------------------------------------------
    def encode(self, src_ids: np.ndarray, src_mask: np.ndarray | None = None,
               train: bool = False, rng=None, use_positions: bool = True) -> Tensor:
        """Source ids [B, S] -> context vectors [B, S, d]."""
        src_ids = np.atleast_2d(np.asarray(src_ids))
        if src_ids.shape[-1] == 0:
            raise InvalidArgumentError("cannot encode an empty source")
        if src_mask is None:
            src_mask = np.ones(src_ids.shape)
        x = self._drop(self._embed(src_ids, decoder=False, positions=use_positions),
                       train, rng)
        attn_mask = np.where(src_mask[:, None, None, :] > 0, 0.0, NEG_INF)
        for l in range(self.cfg.layers):
            z = multi_head(self.params, f"enc.{l}.self", self.cfg.heads,
                           x, x, x, attn_mask)
            x = self._ln(f"enc.{l}.ln1", T.add(x, self._drop(z, train, rng)))
            h = self._ffn(f"enc.{l}.ffn", x)
            x = self._ln(f"enc.{l}.ln2", T.add(x, self._drop(h, train, rng)))
        return x

    # -- teacher-forced decoder -------------------------------------------
    def decode_train(self, enc_out: Tensor, src_mask: np.ndarray,
                     input_ids: np.ndarray, ctx_states: list[Tensor] | None = None,
                     ctx_mask: np.ndarray | None = None, input_embed: Tensor | None = None,
                     train: bool = False, rng=None):
        """Run the decoder over a whole tag-prefixed input batch [B, T].

        `ctx_states[l]` holds the opposite stream's input states to layer l
        ([B, T', d]); position t here may attend only to ctx positions < t
        that `ctx_mask` marks real.  Returns (logits [B, T, V], states) where
        `states[l]` is this stream's input to layer l, reusable as the
        opposite context of a later pass.
        """
        p, cfg = self.params, self.cfg
        if ctx_states is not None and not self.bidirectional:
            raise InvalidArgumentError(
                "baseline model cannot attend to an opposite stream")
        t_len = input_ids.shape[-1]
        x = input_embed if input_embed is not None else self._embed(input_ids, decoder=True)
        x = self._drop(x, train, rng)
        causal = np.where(np.tril(np.ones((t_len, t_len))) > 0, 0.0, NEG_INF)
        causal = causal[None, None, :, :]
        src_attn_mask = np.where(src_mask[:, None, None, :] > 0, 0.0, NEG_INF)
        fut_mask = None
        if ctx_states is not None:
            c_len = ctx_states[0].shape[1]
            if ctx_mask is None:
                ctx_mask = np.ones((x.shape[0], c_len))
            # strictly-earlier visibility: position t sees ctx entries < t
            vis = np.tril(np.ones((t_len, c_len)), k=-1)
            fut_mask = np.where((vis[None, :, :] * ctx_mask[:, None, :]) > 0,
                                0.0, NEG_INF)[:, None, :, :]
        states = []
        for l in range(cfg.layers):
            states.append(x)
            z = multi_head(p, f"dec.{l}.self", cfg.heads, x, x, x, causal)
            if ctx_states is not None:
                kv_prefix = f"dec.{l}.future" if cfg.separate_future_kv else f"dec.{l}.self"
                q = _split_heads(T.add(T.matmul(x, p[f"dec.{l}.self.wq"]),
                                       p[f"dec.{l}.self.bq"]), cfg.heads)
                k = _split_heads(T.add(T.matmul(ctx_states[l], p[f"{kv_prefix}.wk"]),
                                       p[f"{kv_prefix}.bk"]), cfg.heads)
                v = _split_heads(T.add(T.matmul(ctx_states[l], p[f"{kv_prefix}.wv"]),
                                       p[f"{kv_prefix}.bv"]), cfg.heads)
                fut = _attention_zero_rows(q, k, v, fut_mask)
                fut = T.add(T.matmul(_merge_heads(fut), p[f"dec.{l}.self.wo"]),
                            p[f"dec.{l}.self.bo"])
                # positions with nothing visible get the zero vector, not the
                # projection bias, matching the stepwise zero-context path
                keep_pos = (fut_mask.max(axis=-1)[:, 0, :, None] > NEG_INF / 2)
                fut = T.mul(fut, Tensor(keep_pos.astype(fut.values.dtype)))
                z = combine_past_future(z, fut, p["lam"])
            x = self._ln(f"dec.{l}.ln1", T.add(x, self._drop(z, train, rng)))
            z = multi_head(p, f"dec.{l}.ctx", cfg.heads, x, enc_out, enc_out,
                           src_attn_mask)
            x = self._ln(f"dec.{l}.ln2", T.add(x, self._drop(z, train, rng)))
            h = self._ffn(f"dec.{l}.ffn", x)
            x = self._ln(f"dec.{l}.ln3", T.add(x, self._drop(h, train, rng)))
        logits = T.add(T.matmul(x, p["out.w"]), p["out.b"])
        return logits, states

    def scorer(self, src_ids) -> "TransformerScorer":
        return TransformerScorer(self, np.asarray(src_ids, dtype=np.int64))


# ---------------------------------------------------------------------------
# incremental inference
# ---------------------------------------------------------------------------

class TransformerCache:
    """Per-hypothesis decoder cache: projected K/V stacks per layer, one
    entry appended per consumed position.  `future_kv` is what the opposite
    stream attends to; it aliases the history stacks unless the model keeps
    separate future projections."""

    __slots__ = ("pos", "hist_k", "hist_v", "fut_k", "fut_v")

    def __init__(self, layers: int):
        self.pos = 0
        self.hist_k = [None] * layers
        self.hist_v = [None] * layers
        self.fut_k = [None] * layers
        self.fut_v = [None] * layers

    def future_entries(self, layer: int):
        k = self.fut_k[layer]
        return 0 if k is None else k.shape[0]


def _np_heads(x: np.ndarray, heads: int) -> np.ndarray:
    t, d = x.shape
    return x.reshape(t, heads, d // heads).transpose(1, 0, 2)


def _np_mha(q: np.ndarray, k: np.ndarray, v: np.ndarray, heads: int,
            wo: np.ndarray, bo: np.ndarray) -> np.ndarray:
    # q [1, d] already projected; k/v [t, d] projected caches
    qh = _np_heads(q, heads)                      # [H, 1, dh]
    kh = _np_heads(k, heads)
    vh = _np_heads(v, heads)
    scores = qh @ kh.transpose(0, 2, 1) / np.sqrt(q.shape[-1] // heads)
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    weights = e / e.sum(axis=-1, keepdims=True)
    ctx = weights @ vh                            # [H, 1, dh]
    merged = ctx.transpose(1, 0, 2).reshape(1, -1)
    return merged @ wo + bo


class TransformerScorer:
    """Stepwise decoder bound to one encoded source; plain float32 numpy.

    Implements the scorer contract used by beam search: `initial_state`
    returns an empty cache and `step` consumes one token, optionally reading
    the opposite hypothesis's cache, and returns a full log-probability
    vector plus the extended cache.
    """

    def __init__(self, model: TransformerModel, src_ids: np.ndarray):
        self.model = model
        self.cfg = model.cfg
        self.vocab_size = model.cfg.vocab_size
        with T.no_grad():
            self.enc_out = model.encode(src_ids[None, :]).values[0]  # [S, d]
        self.pv = {k: t.values for k, t in model.params.items()}
        self.lam = float(self.pv["lam"]) if "lam" in self.pv else 0.0
        self.has_lam = "lam" in self.pv
        self.pos_table = positional_encoding(512, self.cfg.d_model,
                                             self.enc_out.dtype)

    def initial_state(self, direction: int) -> TransformerCache:
        return TransformerCache(self.cfg.layers)

    def _ln(self, prefix: str, x: np.ndarray) -> np.ndarray:
        g, b = self.pv[f"{prefix}.g"], self.pv[f"{prefix}.b"]
        wide = x.astype(np.float64, copy=False)
        mu = wide.mean(axis=-1, keepdims=True)
        var = ((wide - mu) ** 2).mean(axis=-1, keepdims=True)
        out = g * (wide - mu) / np.sqrt(var + 1e-6) + b
        return out.astype(x.dtype, copy=False)

    def _position(self, pos: int) -> np.ndarray:
        while pos >= self.pos_table.shape[0]:
            self.pos_table = positional_encoding(
                2 * self.pos_table.shape[0], self.cfg.d_model, self.enc_out.dtype)
        return self.pos_table[pos]

    def step(self, state: TransformerCache, token: int,
             opposite: TransformerCache | None):
        """Consume `token`; return (log-prob vector over the vocabulary,
        new cache).  `opposite` may be None for unidirectional decoding."""
        pv, cfg = self.pv, self.cfg
        d, heads = cfg.d_model, cfg.heads
        emb = pv["emb_tgt"] if ("emb_tgt" in pv) else pv["emb"]
        x = emb[token][None, :] * np.sqrt(d) + self._position(state.pos)[None, :]
        new = TransformerCache(cfg.layers)
        new.pos = state.pos + 1
        for l in range(cfg.layers):
            pre = f"dec.{l}.self"
            q = x @ pv[f"{pre}.wq"] + pv[f"{pre}.bq"]
            k = x @ pv[f"{pre}.wk"] + pv[f"{pre}.bk"]
            v = x @ pv[f"{pre}.wv"] + pv[f"{pre}.bv"]
            hk = k if state.hist_k[l] is None else np.concatenate([state.hist_k[l], k])
            hv = v if state.hist_v[l] is None else np.concatenate([state.hist_v[l], v])
            new.hist_k[l], new.hist_v[l] = hk, hv
            if cfg.separate_future_kv:
                fpre = f"dec.{l}.future"
                fk = x @ pv[f"{fpre}.wk"] + pv[f"{fpre}.bk"]
                fv = x @ pv[f"{fpre}.wv"] + pv[f"{fpre}.bv"]
                new.fut_k[l] = fk if state.fut_k[l] is None else np.concatenate([state.fut_k[l], fk])
                new.fut_v[l] = fv if state.fut_v[l] is None else np.concatenate([state.fut_v[l], fv])
            else:
                new.fut_k[l], new.fut_v[l] = hk, hv
            z = _np_mha(q, hk, hv, heads, pv[f"{pre}.wo"], pv[f"{pre}.bo"])
            # step i may see at most the opposite's first i entries
            visible = 0 if opposite is None else min(
                state.pos, opposite.future_entries(l))
            if visible > 0 and self.has_lam:
                z_fut = _np_mha(q, opposite.fut_k[l][:visible],
                                opposite.fut_v[l][:visible],
                                heads, pv[f"{pre}.wo"], pv[f"{pre}.bo"])
                z = z + self.lam * np.tanh(z_fut)
            x = self._ln(f"dec.{l}.ln1", x + z)
            cpre = f"dec.{l}.ctx"
            q2 = x @ pv[f"{cpre}.wq"] + pv[f"{cpre}.bq"]
            k2 = self.enc_out @ pv[f"{cpre}.wk"] + pv[f"{cpre}.bk"]
            v2 = self.enc_out @ pv[f"{cpre}.wv"] + pv[f"{cpre}.bv"]
            z2 = _np_mha(q2, k2, v2, heads, pv[f"{cpre}.wo"], pv[f"{cpre}.bo"])
            x = self._ln(f"dec.{l}.ln2", x + z2)
            h = np.maximum(x @ pv[f"dec.{l}.ffn.w1"] + pv[f"dec.{l}.ffn.b1"], 0.0)
            h = h @ pv[f"dec.{l}.ffn.w2"] + pv[f"dec.{l}.ffn.b2"]
            x = self._ln(f"dec.{l}.ln3", x + h)
        logits = (x @ pv["out.w"] + pv["out.b"])[0]
        logits -= logits.max()
        logprobs = logits - np.log(np.exp(logits).sum())
        return logprobs, new
