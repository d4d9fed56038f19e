"""Training machinery: bidirectional objectives, Adam with warmup schedule,
pseudo-target generation, and the two-pass / fine-tuning strategies.

The interactive objective sums two teacher-forced terms, one per direction,
each conditioned on the opposite direction's context sequence:

    loss = -[log p(fwd | x, ctx_bwd) + log p(bwd | x, ctx_fwd)]

Position i of a gold stream may see only the first i-1 context tokens, which
is exactly what the synchronous beam provides at inference time and what
keeps a token from ever helping to predict itself.  Context sequences are
gold targets only when explicitly requested (that leaks by construction);
the training strategies substitute model decodes (pseudo-targets).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from bidiseq import tensor as T
from bidiseq.beam import BeamConfig, unidirectional_beam_search
from bidiseq.data import (BOS, EOS, L2R, R2L, Batch, TrainingTriple, Vocab,
                          batchify, pad_rows)
from bidiseq.tensor import Tensor, backward, cross_entropy


class ConfigError(ValueError):
    """Training configuration or call is inconsistent."""


@dataclass
class TrainingConfig:
    beta1: float = 0.9
    beta2: float = 0.998
    adam_eps: float = 1e-9
    warmup_steps: int = 400
    label_smoothing: float = 0.1
    batch_size: int = 32
    max_epochs: int = 40
    eval_every: int = 1          # epochs between evaluations
    patience: int = 3            # evaluations without improvement before stopping
    fine_tune_fraction: float = 0.1
    pseudo_beam_size: int = 2
    pseudo_max_len: int = 48
    length_penalty: float = 0.6
    direction_mode: str = "both"  # both | l2r | r2l
    two_pass_from_scratch: bool = False
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"betas out of range: {self.beta1}, {self.beta2}")
        if not (0.0 <= self.label_smoothing < 1.0):
            raise ConfigError(f"label smoothing out of range: {self.label_smoothing}")
        if not (0.0 < self.fine_tune_fraction <= 1.0):
            raise ConfigError(
                f"fine_tune_fraction must be in (0, 1], got {self.fine_tune_fraction}")
        if self.direction_mode not in ("both", "l2r", "r2l"):
            raise ConfigError(f"unknown direction_mode {self.direction_mode!r}")
        if self.warmup_steps < 1 or self.batch_size < 1 or self.max_epochs < 0:
            raise ConfigError("warmup_steps, batch_size must be >= 1; max_epochs >= 0")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def learning_rate(step: int, d_model: int, warmup: int) -> float:
    """Inverse-square-root schedule with linear warmup."""
    return d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    lr: float = 0.0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, config: TrainingConfig, d_model: int) -> None:
    """One Adam update with bias correction; learning rate from the schedule."""
    state.step += 1
    lr = learning_rate(state.step, d_model, config.warmup_steps)
    state.lr = lr
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.values)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.values)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.values)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.values -= lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)


def collect_grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients for every parameter; untouched parameters read as zero."""
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.values))
            for k, t in params.items()}


def zero_grads(params: dict[str, Tensor]) -> None:
    for t in params.values():
        t.grad = None


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass
class ContextBatch:
    """Tag-prefixed opposite-context input rows for one batch."""

    fwd_in: np.ndarray   # [B, Tf] L2R context rows (tag + forward sequence)
    fwd_mask: np.ndarray
    bwd_in: np.ndarray   # [B, Tb] R2L context rows (tag + backward sequence)
    bwd_mask: np.ndarray


def make_context_batch(triples, vocab: Vocab, use_gold: bool = False) -> ContextBatch:
    """Context rows from pseudo-targets (default) or, explicitly, gold."""
    fwd_rows, bwd_rows = [], []
    for t in triples:
        if use_gold:
            fwd, bwd = t.target, t.target_backward
        else:
            if t.pseudo_forward is None or t.pseudo_backward is None:
                raise ConfigError(
                    "interactive training needs pseudo-targets on every triple")
            fwd, bwd = t.pseudo_forward, t.pseudo_backward
        fwd_rows.append([L2R] + vocab.encode(fwd))
        bwd_rows.append([R2L] + vocab.encode(bwd))
    fwd_in, fwd_mask = pad_rows(fwd_rows)
    bwd_in, bwd_mask = pad_rows(bwd_rows)
    return ContextBatch(fwd_in, fwd_mask, bwd_in, bwd_mask)


def _decode(model, enc, src_mask, input_ids, ctx, ctx_mask, l2r, train, rng):
    """Architecture dispatch returning (logits, opaque context states)."""
    if model.architecture == "transformer":
        logits, states = model.decode_train(enc, src_mask, input_ids,
                                            ctx_states=ctx, ctx_mask=ctx_mask,
                                            train=train, rng=rng)
        return logits, states
    logits, tops = model.decode_train(enc, src_mask, input_ids, ctx_tops=ctx,
                                      ctx_mask=ctx_mask, direction_l2r=l2r,
                                      train=train, rng=rng)
    return logits, tops


def _ce(logits: Tensor, targets: np.ndarray, mask: np.ndarray,
        smoothing: float) -> Tensor:
    b, t, v = logits.shape
    return cross_entropy(T.reshape(logits, (b * t, v)), targets.reshape(-1),
                         label_smoothing=smoothing, mask=mask.reshape(-1))


def no_interaction_loss(model, batch: Batch, config: TrainingConfig,
                        train: bool = False, rng=None) -> Tensor:
    """Both directional terms with the future pathway inactive."""
    enc = model.encode(batch.src, batch.src_mask, train=train, rng=rng)
    terms = []
    if config.direction_mode in ("both", "l2r"):
        logits, _ = _decode(model, enc, batch.src_mask, batch.fwd_in,
                            None, None, True, train, rng)
        terms.append(_ce(logits, batch.fwd_out, batch.fwd_mask,
                         config.label_smoothing))
    if config.direction_mode in ("both", "r2l"):
        logits, _ = _decode(model, enc, batch.src_mask, batch.bwd_in,
                            None, None, False, train, rng)
        terms.append(_ce(logits, batch.bwd_out, batch.bwd_mask,
                         config.label_smoothing))
    loss = terms[0]
    for extra in terms[1:]:
        loss = T.add(loss, extra)
    return loss


def bidirectional_loss(model, batch: Batch, ctx: ContextBatch,
                       config: TrainingConfig, train: bool = False,
                       rng=None) -> Tensor:
    """Interactive objective: each gold stream attends the opposite context
    stream, masked so position i sees only strictly-earlier context entries."""
    if ctx is None:
        raise ConfigError("bidirectional_loss requires opposite contexts; "
                          "use no_interaction_loss to train without them")
    enc = model.encode(batch.src, batch.src_mask, train=train, rng=rng)
    terms = []
    if config.direction_mode in ("both", "l2r"):
        # context stream encoded without interaction of its own
        _, ctx_bwd_states = _decode(model, enc, batch.src_mask, ctx.bwd_in,
                                    None, None, False, train, rng)
        logits_f, _ = _decode(model, enc, batch.src_mask, batch.fwd_in,
                              ctx_bwd_states, ctx.bwd_mask, True, train, rng)
        terms.append(_ce(logits_f, batch.fwd_out, batch.fwd_mask,
                         config.label_smoothing))
    if config.direction_mode in ("both", "r2l"):
        _, ctx_fwd_states = _decode(model, enc, batch.src_mask, ctx.fwd_in,
                                    None, None, True, train, rng)
        logits_b, _ = _decode(model, enc, batch.src_mask, batch.bwd_in,
                              ctx_fwd_states, ctx.fwd_mask, False, train, rng)
        terms.append(_ce(logits_b, batch.bwd_out, batch.bwd_mask,
                         config.label_smoothing))
    loss = terms[0]
    for extra in terms[1:]:
        loss = T.add(loss, extra)
    return loss


# ---------------------------------------------------------------------------
# pseudo-targets
# ---------------------------------------------------------------------------

def framed_source_ids(triple: TrainingTriple, vocab: Vocab) -> list[int]:
    return [BOS] + vocab.encode(triple.source) + [EOS]


def generate_pseudo_targets(model, corpus, vocab: Vocab,
                            config: TrainingConfig):
    """Decode every source left-to-right and right-to-left, attaching the
    outputs as pseudo-targets.  Returns (corpus with pseudo, skipped count);
    sources whose decode comes back empty are skipped."""
    beam = BeamConfig(beam_size=config.pseudo_beam_size,
                      max_len=config.pseudo_max_len,
                      alpha=config.length_penalty)
    out, skipped = [], 0
    for triple in corpus:
        scorer = model.scorer(framed_source_ids(triple, vocab))
        fwd_ids = unidirectional_beam_search(scorer, L2R, beam)
        r2l_ids = unidirectional_beam_search(scorer, R2L, beam)
        if not fwd_ids or not r2l_ids:
            skipped += 1
            continue
        out.append(triple.with_pseudo(
            forward=vocab.decode(fwd_ids),
            backward=reversed(vocab.decode(r2l_ids))))  # generation order
    return out, skipped


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class EvalPoint:
    step: int
    lr: float
    train_loss: float
    val_loss: float
    seconds: float

    def line(self) -> str:
        return (f"{self.step}\t{self.lr:.6g}\t{self.train_loss:.6f}"
                f"\t{self.val_loss:.6f}\t{self.seconds:.2f}")


def _snapshot(params):
    return {k: t.values.copy() for k, t in params.items()}


def _restore(params, snap):
    for k, t in params.items():
        t.values[...] = snap[k]


def _epoch_batches(corpus, vocab, config, interactive, shuffle_rng):
    order = shuffle_rng.permutation(len(corpus))
    shuffled = [corpus[i] for i in order]
    batches = batchify(shuffled, vocab, config.batch_size, sort_by_length=True)
    pairs = []
    for b in batches:
        ctx = make_context_batch(b.triples, vocab) if interactive else None
        pairs.append((b, ctx))
    return pairs


def _batch_loss(model, batch, ctx, config, train, rng):
    if ctx is None:
        return no_interaction_loss(model, batch, config, train=train, rng=rng)
    return bidirectional_loss(model, batch, ctx, config, train=train, rng=rng)


def evaluate_loss(model, corpus, vocab, config, interactive: bool) -> float:
    """Token-weighted mean loss over a corpus, dropout off."""
    total, tokens = 0.0, 0.0
    with T.no_grad():
        for batch, ctx in _epoch_batches(corpus, vocab, config, interactive,
                                         np.random.default_rng(0)):
            n = float(batch.fwd_mask.sum() + batch.bwd_mask.sum())
            loss = _batch_loss(model, batch, ctx, config, train=False, rng=None)
            total += loss.item() * n
            tokens += n
    return total / max(tokens, 1.0)


def train_model(model, train_corpus, valid_corpus, vocab: Vocab,
                config: TrainingConfig, interactive: bool = False,
                log=None, optimizer: AdamState | None = None) -> list[EvalPoint]:
    """Adam training until max_epochs or early stop on validation loss.

    One log line per evaluation: step, learning rate, train loss, validation
    loss, wall seconds, tab-separated.  The best-validation parameters are
    restored before returning.
    """
    if not train_corpus:
        raise ConfigError("cannot train on an empty corpus")
    if not valid_corpus:
        valid_corpus = train_corpus
    state = optimizer if optimizer is not None else AdamState()
    shuffle_rng = np.random.default_rng(config.seed)
    dropout_rng = np.random.default_rng(config.seed + 1)
    d_model = model.cfg.d_model
    history: list[EvalPoint] = []
    best_loss, best_snap, stale = np.inf, _snapshot(model.params), 0
    started = time.perf_counter()
    for epoch in range(config.max_epochs):
        epoch_losses = []
        for batch, ctx in _epoch_batches(train_corpus, vocab, config,
                                         interactive, shuffle_rng):
            zero_grads(model.params)
            loss = _batch_loss(model, batch, ctx, config, train=True,
                               rng=dropout_rng)
            backward(loss)
            adam_step(model.params, collect_grads(model.params), state,
                      config, d_model)
            epoch_losses.append(loss.item())
        if (epoch + 1) % config.eval_every != 0:
            continue
        val = evaluate_loss(model, valid_corpus, vocab, config, interactive)
        point = EvalPoint(step=state.step, lr=state.lr,
                          train_loss=float(np.mean(epoch_losses)), val_loss=val,
                          seconds=time.perf_counter() - started)
        history.append(point)
        if log is not None:
            log.write(point.line() + "\n")
            log.flush()
        if val < best_loss - 1e-6:
            best_loss, best_snap, stale = val, _snapshot(model.params), 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    _restore(model.params, best_snap)
    return history


# ---------------------------------------------------------------------------
# strategies
# ---------------------------------------------------------------------------

def two_pass_train(model, train_corpus, valid_corpus, vocab: Vocab,
                   config: TrainingConfig, log=None, fresh_model_fn=None):
    """Pass one trains without interaction; the whole training set is then
    decoded into pseudo-targets and pass two trains the interactive model on
    them (warm started from pass one unless configured from scratch)."""
    history = train_model(model, train_corpus, valid_corpus, vocab, config,
                          interactive=False, log=log)
    pseudo_train, skipped = generate_pseudo_targets(model, train_corpus,
                                                    vocab, config)
    pseudo_valid, _ = generate_pseudo_targets(model, valid_corpus, vocab, config)
    if not pseudo_train:
        return model, history, skipped  # every source decoded to nothing
    if config.two_pass_from_scratch:
        if fresh_model_fn is None:
            raise ConfigError("from-scratch second pass needs fresh_model_fn")
        model = fresh_model_fn()
    history += train_model(model, pseudo_train, pseudo_valid, vocab, config,
                           interactive=True, log=log)
    return model, history, skipped


def fine_tune_subset(corpus, fraction: float, seed: int):
    """Uniform sample without replacement of round(fraction * n) triples."""
    rng = np.random.default_rng(seed)
    n = len(corpus)
    take = max(1, round(fraction * n))
    return [corpus[i] for i in sorted(rng.choice(n, size=take, replace=False))]


def fine_tune(model, train_corpus, valid_corpus, vocab: Vocab,
              config: TrainingConfig, log=None):
    """Train without interaction on everything, then fine-tune the
    interactive pathway on a decoded random subset of the sources."""
    history = train_model(model, train_corpus, valid_corpus, vocab, config,
                          interactive=False, log=log)
    subset = fine_tune_subset(train_corpus, config.fine_tune_fraction, config.seed)
    pseudo_subset, skipped = generate_pseudo_targets(model, subset, vocab, config)
    pseudo_valid, _ = generate_pseudo_targets(model, valid_corpus, vocab, config)
    if not pseudo_subset:
        return model, history, skipped  # every source decoded to nothing
    history += train_model(model, pseudo_subset, pseudo_valid, vocab, config,
                           interactive=True, log=log)
    return model, history, skipped


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------

def token_accuracy(model, corpus, vocab: Vocab, config: TrainingConfig,
                   interactive: bool = False) -> float:
    """Teacher-forced argmax accuracy over both directions, pads excluded.

    In interactive mode the opposite contexts are the model's own decodes of
    the evaluation sources, mirroring how the second training stage and the
    synchronous beam condition each step."""
    eval_corpus = corpus
    if interactive:
        eval_corpus, _ = generate_pseudo_targets(model, corpus, vocab, config)
    hits, total = 0.0, 0.0
    with T.no_grad():
        for batch, ctx in _epoch_batches(eval_corpus, vocab, config, interactive,
                                         np.random.default_rng(0)):
            enc = model.encode(batch.src, batch.src_mask)
            streams = []
            if ctx is None:
                f, _ = _decode(model, enc, batch.src_mask, batch.fwd_in,
                               None, None, True, False, None)
                b, _ = _decode(model, enc, batch.src_mask, batch.bwd_in,
                               None, None, False, False, None)
            else:
                _, cf = _decode(model, enc, batch.src_mask, ctx.fwd_in,
                                None, None, True, False, None)
                _, cb = _decode(model, enc, batch.src_mask, ctx.bwd_in,
                                None, None, False, False, None)
                f, _ = _decode(model, enc, batch.src_mask, batch.fwd_in,
                               cb, ctx.bwd_mask, True, False, None)
                b, _ = _decode(model, enc, batch.src_mask, batch.bwd_in,
                               cf, ctx.fwd_mask, False, False, None)
            streams.append((f, batch.fwd_out, batch.fwd_mask))
            streams.append((b, batch.bwd_out, batch.bwd_mask))
            for logits, targets, mask in streams:
                pred = logits.values.argmax(axis=-1)
                hits += float(((pred == targets) * mask).sum())
                total += float(mask.sum())
    return hits / max(total, 1.0)
