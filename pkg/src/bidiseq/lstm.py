"""LSTM encoder/decoder with synchronous bidirectional decoding.

The encoder stacks LSTM layers, the first one bidirectional with its two
reads merged through a small feed-forward; the decoder stacks LSTM layers
with input feeding.  Each step combines three ingredients before the output
projection: the top decoder state, a source-attention context, and a
cross-direction attention context computed over the opposite stream's
previously emitted top states:

    z_i = tanh(Wc [z_top; c_src; c_cross])

With no opposite states available the cross context is a zero vector, which
reduces the step to plain unidirectional decoding.  Both directions share
decoder weights by default (the direction tag is the signal); a config flag
builds separate decoder-side weights instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bidiseq import tensor as T
from bidiseq.data import L2R
from bidiseq.tensor import InvalidArgumentError, Tensor

NEG_INF = -1e9


@dataclass
class LstmConfig:
    vocab_size: int
    d_model: int = 64
    layers: int = 2
    dropout: float = 0.2
    share_directions: bool = True


# ---------------------------------------------------------------------------
# cells and attention
# ---------------------------------------------------------------------------

def lstm_step(x: Tensor, h: Tensor, c: Tensor, w_ih: Tensor, w_hh: Tensor,
              b: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM cell update; gate layout [input, forget, cell, output]."""
    d = h.shape[-1]
    a = T.add(T.add(T.matmul(x, w_ih), T.matmul(h, w_hh)), b)
    i = T.sigmoid(a[:, :d])
    f = T.sigmoid(a[:, d:2 * d])
    g = T.tanh(a[:, 2 * d:3 * d])
    o = T.sigmoid(a[:, 3 * d:])
    c_new = T.add(T.mul(f, c), T.mul(i, g))
    h_new = T.mul(o, T.tanh(c_new))
    return h_new, c_new


def source_attention(z_top: Tensor, ctx: Tensor, wa: Tensor, ua: Tensor,
                     va: Tensor, mask: np.ndarray | None = None,
                     ua_ctx: Tensor | None = None):
    """Additive attention over source context vectors.

    z_top is [B, d], ctx [B, S, d].  Returns (weighted context [B, d],
    weights [B, S]).  `ua_ctx` lets callers reuse the per-sequence term
    across decoder steps.
    """
    if ctx.shape[-2] == 0:
        raise InvalidArgumentError("source attention needs a nonempty context")
    if ua_ctx is None:
        ua_ctx = T.matmul(ctx, ua)
    b, d = z_top.shape
    query = T.reshape(T.matmul(z_top, wa), (b, 1, d))
    scores = T.matmul(T.tanh(T.add(query, ua_ctx)), T.reshape(va, (d, 1)))
    scores = T.reshape(scores, (b, ctx.shape[1]))
    if mask is not None:
        scores = T.add(scores, Tensor(np.where(mask > 0, 0.0, NEG_INF)))
    alpha = T.softmax(scores, axis=-1)
    c = T.reshape(T.matmul(T.reshape(alpha, (b, 1, -1)), ctx), (b, d))
    return c, alpha


def cross_direction_attention(z_top: Tensor, opposite: Tensor | None,
                              wz: Tensor, uz: Tensor, vz: Tensor,
                              visible_mask: np.ndarray | None = None,
                              uz_opp: Tensor | None = None):
    """Attention over the opposite stream's emitted top states.

    `opposite` is [B, K, d] (None or K=0 means no future context yet, which
    yields a zero vector).  `visible_mask` [B, K] marks which entries this
    step may see; rows with nothing visible also fall back to zero.
    Returns (context [B, d], weights [B, K] or None).
    """
    b, d = z_top.shape
    if opposite is None or opposite.shape[-2] == 0:
        return Tensor(np.zeros((b, d), dtype=z_top.values.dtype)), None
    if uz_opp is None:
        uz_opp = T.matmul(opposite, uz)
    k = opposite.shape[1]
    query = T.reshape(T.matmul(z_top, wz), (b, 1, d))
    scores = T.reshape(
        T.matmul(T.tanh(T.add(query, uz_opp)), T.reshape(vz, (d, 1))), (b, k))
    if visible_mask is not None:
        add = np.where(visible_mask > 0, 0.0, NEG_INF)
        scores = T.add(scores, Tensor(add))
        gamma = T.softmax(scores, axis=-1)
        keep = (visible_mask.max(axis=-1, keepdims=True) > 0).astype(
            gamma.values.dtype)
        gamma = T.mul(gamma, Tensor(keep))
    else:
        gamma = T.softmax(scores, axis=-1)
    cz = T.reshape(T.matmul(T.reshape(gamma, (b, 1, k)), opposite), (b, d))
    return cz, gamma


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _lstm_block(p, prefix, d_in, d, rng):
    p[f"{prefix}.w_ih"] = T.parameter((d_in, 4 * d), rng)
    p[f"{prefix}.w_hh"] = T.parameter((d, 4 * d), rng)
    bias = np.zeros(4 * d)
    bias[d:2 * d] = 1.0  # forget-gate bias opens the memory path at init
    p[f"{prefix}.b"] = Tensor(bias, requires_grad=True)


def _ln_block(p, prefix, d):
    p[f"{prefix}.g"] = T.ones(d, requires_grad=True)
    p[f"{prefix}.b"] = T.zeros(d, requires_grad=True)


def _decoder_side(p, side, cfg, rng):
    d = cfg.d_model
    _lstm_block(p, f"{side}.0", 2 * d, d, rng)
    _ln_block(p, f"{side}.0.ln", d)
    for l in range(1, cfg.layers):
        _lstm_block(p, f"{side}.{l}", d, d, rng)
        _ln_block(p, f"{side}.{l}.ln", d)
    for name in ("wa", "ua"):
        p[f"{side}.att.{name}"] = T.parameter((d, d), rng)
    p[f"{side}.att.va"] = T.parameter((d,), rng, scale=0.1)
    for name in ("wz", "uz"):
        p[f"{side}.xatt.{name}"] = T.parameter((d, d), rng)
    p[f"{side}.xatt.vz"] = T.parameter((d,), rng, scale=0.1)
    p[f"{side}.comb.w"] = T.parameter((3 * d, d), rng)
    p[f"{side}.out.w"] = T.parameter((d, cfg.vocab_size), rng)


def build_lstm_params(cfg: LstmConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    p: dict[str, Tensor] = {}
    d = cfg.d_model
    p["emb"] = T.parameter((cfg.vocab_size, d), rng)
    _lstm_block(p, "enc.0.fwd", d, d, rng)
    _lstm_block(p, "enc.0.bwd", d, d, rng)
    for name, shape in (("wl", (d, d)), ("wr", (d, d))):
        p[f"enc.merge.{name}"] = T.parameter(shape, rng)
    p["enc.merge.b"] = T.zeros(d, requires_grad=True)
    _ln_block(p, "enc.0.ln", d)
    for l in range(1, cfg.layers):
        _lstm_block(p, f"enc.{l}", d, d, rng)
        _ln_block(p, f"enc.{l}.ln", d)
    if cfg.share_directions:
        _decoder_side(p, "dec", cfg, rng)
    else:
        _decoder_side(p, "dec_l2r", cfg, rng)
        _decoder_side(p, "dec_r2l", cfg, rng)
    return p


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class LstmModel:
    """Config plus named parameters; batched training forwards and an
    incremental scorer for beam search."""

    architecture = "lstm"

    def __init__(self, cfg: LstmConfig, params: dict | None = None, seed: int = 0):
        self.cfg = cfg
        if params is None:
            params = build_lstm_params(cfg, np.random.default_rng(seed))
        self.params = params

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def _side(self, direction_l2r: bool) -> str:
        if self.cfg.share_directions:
            return "dec"
        return "dec_l2r" if direction_l2r else "dec_r2l"

    def _drop(self, x, train, rng):
        return T.dropout(x, self.cfg.dropout if train else 0.0, rng)

    # -- encoder ----------------------------------------------------------
    def _run_lstm(self, prefix: str, xs: list[Tensor], mask: np.ndarray,
                  reverse: bool = False) -> list[Tensor]:
        """Run one LSTM over a list of [B, d_in] steps, gating updates by
        the padding mask so pads pass state through unchanged."""
        p = self.params
        b = xs[0].shape[0]
        d = self.cfg.d_model
        h = Tensor(np.zeros((b, d), dtype=xs[0].values.dtype))
        c = Tensor(np.zeros((b, d), dtype=xs[0].values.dtype))
        order = range(len(xs) - 1, -1, -1) if reverse else range(len(xs))
        outs: dict[int, Tensor] = {}
        for t in order:
            h_new, c_new = lstm_step(xs[t], h, c, p[f"{prefix}.w_ih"],
                                     p[f"{prefix}.w_hh"], p[f"{prefix}.b"])
            m = Tensor(mask[:, t:t + 1].astype(xs[0].values.dtype))
            h = T.add(h, T.mul(m, T.sub(h_new, h)))
            c = T.add(c, T.mul(m, T.sub(c_new, c)))
            outs[t] = h
        return [outs[t] for t in range(len(xs))]

    def encode(self, src_ids: np.ndarray, src_mask: np.ndarray | None = None,
               train: bool = False, rng=None) -> Tensor:
        """Source ids [B, S] -> context vectors [B, S, d]."""
        src_ids = np.atleast_2d(np.asarray(src_ids))
        if src_ids.shape[-1] == 0:
            raise InvalidArgumentError("cannot encode an empty source")
        if src_mask is None:
            src_mask = np.ones(src_ids.shape)
        p = self.params
        s = src_ids.shape[1]
        emb = self._drop(T.embedding(p["emb"], src_ids), train, rng)
        xs = [emb[:, t] for t in range(s)]
        fwd = self._run_lstm("enc.0.fwd", xs, src_mask)
        bwd = self._run_lstm("enc.0.bwd", xs, src_mask, reverse=True)
        merged = []
        for f, b_ in zip(fwd, bwd):
            h1 = T.tanh(T.add(T.add(T.matmul(f, p["enc.merge.wl"]),
                                    T.matmul(b_, p["enc.merge.wr"])),
                              p["enc.merge.b"]))
            merged.append(T.layer_norm(h1, p["enc.0.ln.g"], p["enc.0.ln.b"]))
        layer = merged
        for l in range(1, self.cfg.layers):
            ins = [self._drop(x, train, rng) for x in layer]
            hs = self._run_lstm(f"enc.{l}", ins, src_mask)
            layer = [T.add(x, T.layer_norm(h, p[f"enc.{l}.ln.g"], p[f"enc.{l}.ln.b"]))
                     for x, h in zip(layer, hs)]
        return T.stack(layer, axis=1)

    # -- teacher-forced decoder -------------------------------------------
    def decode_train(self, enc_out: Tensor, src_mask: np.ndarray,
                     input_ids: np.ndarray, ctx_tops: Tensor | None = None,
                     ctx_mask: np.ndarray | None = None,
                     input_embed: Tensor | None = None,
                     direction_l2r: bool = True, train: bool = False, rng=None):
        """Teacher-forced decode over a tag-prefixed batch [B, T].

        `ctx_tops` [B, T', d] holds the opposite stream's emitted top states;
        step t may attend those with index < t that `ctx_mask` marks real.
        Returns (logits [B, T, V], own top states [B, T, d]).
        """
        p, cfg = self.params, self.cfg
        side = self._side(direction_l2r)
        b, t_len = input_ids.shape
        dtype = enc_out.values.dtype
        d = cfg.d_model
        emb = input_embed if input_embed is not None else T.embedding(p["emb"], input_ids)
        ua_ctx = T.matmul(enc_out, p[f"{side}.att.ua"])
        uz_opp = None
        if ctx_tops is not None:
            uz_opp = T.matmul(ctx_tops, p[f"{side}.xatt.uz"])
            if ctx_mask is None:
                ctx_mask = np.ones((b, ctx_tops.shape[1]))
        hs = [Tensor(np.zeros((b, d), dtype=dtype)) for _ in range(cfg.layers)]
        cs = [Tensor(np.zeros((b, d), dtype=dtype)) for _ in range(cfg.layers)]
        feed = Tensor(np.zeros((b, d), dtype=dtype))
        logits_steps, top_steps = [], []
        for t in range(t_len):
            x = self._drop(emb[:, t], train, rng)
            layer_in = T.concat([x, feed], axis=-1)
            h_new, cs[0] = lstm_step(layer_in, hs[0], cs[0], p[f"{side}.0.w_ih"],
                                     p[f"{side}.0.w_hh"], p[f"{side}.0.b"])
            hs[0] = h_new
            out = T.layer_norm(h_new, p[f"{side}.0.ln.g"], p[f"{side}.0.ln.b"])
            for l in range(1, cfg.layers):
                h_new, cs[l] = lstm_step(self._drop(out, train, rng), hs[l], cs[l],
                                         p[f"{side}.{l}.w_ih"], p[f"{side}.{l}.w_hh"],
                                         p[f"{side}.{l}.b"])
                hs[l] = h_new
                out = T.add(out, T.layer_norm(h_new, p[f"{side}.{l}.ln.g"],
                                              p[f"{side}.{l}.ln.b"]))
            z_top = out
            c_src, _ = source_attention(z_top, enc_out, p[f"{side}.att.wa"],
                                        p[f"{side}.att.ua"], p[f"{side}.att.va"],
                                        mask=src_mask, ua_ctx=ua_ctx)
            if ctx_tops is not None:
                visible = (np.arange(ctx_tops.shape[1])[None, :] < t) * ctx_mask
                cz, _ = cross_direction_attention(
                    z_top, ctx_tops, p[f"{side}.xatt.wz"], p[f"{side}.xatt.uz"],
                    p[f"{side}.xatt.vz"], visible_mask=visible, uz_opp=uz_opp)
            else:
                cz = Tensor(np.zeros((b, d), dtype=dtype))
            z = T.tanh(T.matmul(T.concat([z_top, c_src, cz], axis=-1),
                                p[f"{side}.comb.w"]))
            logits_steps.append(T.matmul(self._drop(z, train, rng), p[f"{side}.out.w"]))
            top_steps.append(z_top)
            feed = z
        return T.stack(logits_steps, axis=1), T.stack(top_steps, axis=1)

    def scorer(self, src_ids) -> "LstmScorer":
        return LstmScorer(self, np.asarray(src_ids, dtype=np.int64))


# ---------------------------------------------------------------------------
# incremental inference
# ---------------------------------------------------------------------------

class LstmState:
    """Per-hypothesis decoder state: layer hidden/cell pairs, the previous
    combined output for input feeding, and the stack of emitted top states
    the opposite direction attends to."""

    __slots__ = ("pos", "hs", "cs", "feed", "tops", "l2r")

    def __init__(self, layers: int, d: int, l2r: bool, dtype=np.float32):
        self.pos = 0
        self.hs = [np.zeros(d, dtype=dtype) for _ in range(layers)]
        self.cs = [np.zeros(d, dtype=dtype) for _ in range(layers)]
        self.feed = np.zeros(d, dtype=dtype)
        self.tops: list[np.ndarray] = []
        self.l2r = l2r


def _np_lstm_step(x, h, c, w_ih, w_hh, b):
    d = h.shape[-1]
    a = x @ w_ih + h @ w_hh + b
    i = _np_sigmoid(a[:d])
    f = _np_sigmoid(a[d:2 * d])
    g = np.tanh(a[2 * d:3 * d])
    o = _np_sigmoid(a[3 * d:])
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


def _np_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _np_ln(x, g, b):
    wide = x.astype(np.float64, copy=False)
    mu = wide.mean(axis=-1, keepdims=True)
    var = ((wide - mu) ** 2).mean(axis=-1, keepdims=True)
    return (g * (wide - mu) / np.sqrt(var + 1e-6) + b).astype(x.dtype, copy=False)


class LstmScorer:
    """Stepwise decoder bound to one encoded source; plain numpy."""

    def __init__(self, model: LstmModel, src_ids: np.ndarray):
        self.model = model
        self.cfg = model.cfg
        self.vocab_size = model.cfg.vocab_size
        with T.no_grad():
            self.ctx = model.encode(src_ids[None, :]).values[0]  # [S, d]
        self.pv = {k: t.values for k, t in model.params.items()}
        self._ua_ctx = {}

    def initial_state(self, direction: int) -> LstmState:
        return LstmState(self.cfg.layers, self.cfg.d_model, direction == L2R,
                         dtype=self.ctx.dtype)

    def _att(self, side, z_top):
        pv = self.pv
        if side not in self._ua_ctx:
            self._ua_ctx[side] = self.ctx @ pv[f"{side}.att.ua"]
        scores = np.tanh(z_top @ pv[f"{side}.att.wa"] + self._ua_ctx[side]) \
            @ pv[f"{side}.att.va"]
        scores -= scores.max()
        w = np.exp(scores)
        w /= w.sum()
        return w @ self.ctx

    def step(self, state: LstmState, token: int, opposite: LstmState | None):
        pv, cfg = self.pv, self.cfg
        side = self.model._side(state.l2r)
        d = cfg.d_model
        x = pv["emb"][token]
        h, c = _np_lstm_step(np.concatenate([x, state.feed]), state.hs[0],
                             state.cs[0], pv[f"{side}.0.w_ih"],
                             pv[f"{side}.0.w_hh"], pv[f"{side}.0.b"])
        new = LstmState(cfg.layers, d, state.l2r, dtype=x.dtype)
        new.pos = state.pos + 1
        new.hs[0], new.cs[0] = h, c
        out = _np_ln(h, pv[f"{side}.0.ln.g"], pv[f"{side}.0.ln.b"])
        for l in range(1, cfg.layers):
            h, c = _np_lstm_step(out, state.hs[l], state.cs[l],
                                 pv[f"{side}.{l}.w_ih"], pv[f"{side}.{l}.w_hh"],
                                 pv[f"{side}.{l}.b"])
            new.hs[l], new.cs[l] = h, c
            out = out + _np_ln(h, pv[f"{side}.{l}.ln.g"], pv[f"{side}.{l}.ln.b"])
        z_top = out
        c_src = self._att(side, z_top)
        visible = 0 if opposite is None else min(state.pos, len(opposite.tops))
        if visible > 0:
            opp = np.stack(opposite.tops[:visible])
            scores = np.tanh(z_top @ pv[f"{side}.xatt.wz"]
                             + opp @ pv[f"{side}.xatt.uz"]) @ pv[f"{side}.xatt.vz"]
            scores -= scores.max()
            w = np.exp(scores)
            w /= w.sum()
            cz = w @ opp
        else:
            cz = np.zeros(d, dtype=z_top.dtype)
        z = np.tanh(np.concatenate([z_top, c_src, cz]) @ pv[f"{side}.comb.w"])
        logits = z @ pv[f"{side}.out.w"]
        logits = logits - logits.max()
        logprobs = logits - np.log(np.exp(logits).sum())
        new.feed = z
        # fresh list so sibling hypotheses never share a mutable stack
        new.tops = state.tops + [z_top]
        return logprobs, new
