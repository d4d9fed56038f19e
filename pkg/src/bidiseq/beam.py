"""Synchronous bidirectional beam search plus the unidirectional baseline.

One beam, two halves: left-to-right hypotheses and right-to-left hypotheses
expand in lockstep, and every expansion is scored with the opposite half's
previous-step hypotheses as future context.  The search is model-agnostic:
anything implementing the scorer contract below can drive it.

Scorer contract:
    initial_state(direction_tag_id) -> state        # nothing consumed yet
    step(state, token_id, opposite_state_or_None)
        -> (log-prob vector over the vocabulary, new state)
    vocab_size                                      # attribute

A hypothesis's state has consumed `tokens[:-1]`; feeding `tokens[-1]` yields
the distribution for the next position.  States are never mutated, so many
hypotheses may share one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from bidiseq.data import BOS, EOS, L2R, PAD, R2L, UNK
from bidiseq.tensor import InvalidArgumentError


class InternalConsistencyError(RuntimeError):
    """A scorer broke its contract (e.g. an unnormalized distribution)."""


def length_penalized_score(logprob: float, length: int, alpha: float) -> float:
    """GNMT-style normalization: logprob / ((5 + length) / 6) ** alpha."""
    if length < 1:
        raise InvalidArgumentError(f"length must be >= 1, got {length}")
    return logprob / (((5.0 + length) / 6.0) ** alpha)


@dataclass
class BeamConfig:
    beam_size: int = 4
    max_len: int = 32
    alpha: float = 0.6
    eos_id: int = EOS
    l2r_id: int = L2R
    r2l_id: int = R2L
    # ids the search never proposes; EOS must stay allowed
    blocked_ids: tuple = (PAD, BOS, UNK, L2R, R2L)

    def __post_init__(self):
        if self.beam_size < 2 or self.beam_size % 2 != 0:
            raise InvalidArgumentError(
                f"beam_size must be even and >= 2, got {self.beam_size}")
        if self.max_len < 1:
            raise InvalidArgumentError(f"max_len must be >= 1, got {self.max_len}")
        if self.alpha < 0:
            raise InvalidArgumentError(f"alpha must be >= 0, got {self.alpha}")

    @property
    def half(self) -> int:
        return self.beam_size // 2


@dataclass
class Hypothesis:
    """Partial or complete output: direction tag first, then generated ids."""

    direction: int
    tokens: tuple[int, ...]
    score: float
    state: Any
    finished: bool = False
    step_scores: tuple[float, ...] = field(default=())

    @property
    def length(self) -> int:
        return len(self.tokens) - 1  # generated tokens, tag excluded

    def penalized(self, alpha: float) -> float:
        return length_penalized_score(self.score, max(self.length, 1), alpha)


def _tie_key(hyp: Hypothesis, alpha: float):
    # total order: higher score, shorter, token-lexicographic, L2R first
    return (-hyp.penalized(alpha), hyp.length, hyp.tokens[1:],
            0 if hyp.direction == L2R else 1)


def _audit(logprobs: np.ndarray) -> None:
    total = np.logaddexp.reduce(logprobs.astype(np.float64))
    if abs(total) > 1e-5:
        raise InternalConsistencyError(
            f"scorer distribution is not normalized: log-sum-exp = {total:.3e}")


def _pair(opposite_partials: list[Hypothesis], rank: int) -> Hypothesis | None:
    """Rank pairing: rank r reads opposite rank min(r, size - 1)."""
    if not opposite_partials:
        return None
    return opposite_partials[min(rank, len(opposite_partials) - 1)]


def sb_infer(cand: Hypothesis, forward_partials: list[Hypothesis],
             backward_partials: list[Hypothesis], scorer) -> float:
    """Log-probability of `cand`'s last token under the paired opposite
    context.  `cand` must extend a hypothesis in `forward_partials`."""
    prefix = cand.tokens[:-1]
    for rank, hyp in enumerate(forward_partials):
        if hyp.tokens == prefix:
            opposite = _pair(backward_partials, rank)
            logprobs, _ = scorer.step(hyp.state, hyp.tokens[-1],
                                      opposite.state if opposite else None)
            _audit(logprobs)
            return float(logprobs[cand.tokens[-1]])
    raise InvalidArgumentError("candidate does not extend any forward partial")


def expand_hypo(own_partials: list[Hypothesis],
                opposite_partials: list[Hypothesis], scorer,
                config: BeamConfig, keep: int | None = None) -> list[Hypothesis]:
    """Score every single-token extension of `own_partials` and keep the
    top `keep` (default: half the beam) by length-penalized score."""
    if not own_partials:
        raise InvalidArgumentError("cannot expand an empty partial list")
    keep = config.half if keep is None else keep
    blocked = set(config.blocked_ids)
    candidates: list[Hypothesis] = []
    for rank, hyp in enumerate(own_partials):
        opposite = _pair(opposite_partials, rank)
        logprobs, new_state = scorer.step(hyp.state, hyp.tokens[-1],
                                          opposite.state if opposite else None)
        _audit(logprobs)
        for tok in range(scorer.vocab_size):
            if tok in blocked:
                continue
            lp = float(logprobs[tok])
            candidates.append(Hypothesis(
                direction=hyp.direction,
                tokens=hyp.tokens + (tok,),
                score=hyp.score + lp,
                state=new_state,
                finished=(tok == config.eos_id),
                step_scores=hyp.step_scores + (lp,)))
    candidates.sort(key=lambda h: _tie_key(h, config.alpha))
    return candidates[:keep]


def update_hypo(temporary: list[Hypothesis], complete: list[Hypothesis],
                config: BeamConfig) -> tuple[list[Hypothesis], list[Hypothesis]]:
    """Move finished candidates to the complete list, the rest to a fresh
    partial list; stop collecting once the complete list holds a full beam."""
    partial: list[Hypothesis] = []
    for cand in temporary:
        if cand.finished:
            complete.append(cand)
            if len(complete) >= config.beam_size:
                break
        else:
            partial.append(cand)
    return partial, complete


def _best(hypos: list[Hypothesis], alpha: float) -> Hypothesis:
    return min(hypos, key=lambda h: _tie_key(h, alpha))


def _resolve(hyp: Hypothesis, config: BeamConfig) -> list[int]:
    tokens = list(hyp.tokens[1:])
    if tokens and tokens[-1] == config.eos_id:
        tokens.pop()
    if hyp.direction == config.r2l_id:
        tokens.reverse()
    return tokens


def _optimistic(hyp: Hypothesis, config: BeamConfig) -> float:
    # log-probs only shrink; the best reachable penalized score divides by
    # the largest divisor, i.e. the max-length one
    return length_penalized_score(hyp.score, config.max_len, config.alpha)


def sync_bidi_beam_search(scorer, config: BeamConfig,
                          halves: tuple[int, ...] = (L2R, R2L)) -> list[int]:
    """Both directions decode one beam together; returns plain output ids.

    The winner's direction tag is stripped and right-to-left output is
    reversed, so the result never contains reserved tokens.  `halves` can
    disable one direction, leaving a plain half-width beam search.
    """
    l_part = [Hypothesis(L2R, (config.l2r_id,), 0.0,
                         scorer.initial_state(config.l2r_id))] if L2R in halves else []
    r_part = [Hypothesis(R2L, (config.r2l_id,), 0.0,
                         scorer.initial_state(config.r2l_id))] if R2L in halves else []
    complete: list[Hypothesis] = []
    l_ctx, r_ctx = l_part, r_part  # frozen when a half dies out early
    for _ in range(config.max_len):
        l_tmp = expand_hypo(l_part, r_ctx, scorer, config) if l_part else []
        r_tmp = expand_hypo(r_part, l_ctx, scorer, config) if r_part else []
        l_part, complete = update_hypo(l_tmp, complete, config)
        r_part, complete = update_hypo(r_tmp, complete, config)
        if l_part:
            l_ctx = l_part
        if r_part:
            r_ctx = r_part
        if not l_part and not r_part:
            break
        if len(complete) >= config.beam_size:
            best_done = _best(complete, config.alpha).penalized(config.alpha)
            reachable = max(_optimistic(h, config) for h in l_part + r_part)
            if best_done >= reachable:
                break
    if complete:
        return _resolve(_best(complete, config.alpha), config)
    survivors = l_part + r_part
    if not survivors:
        raise InternalConsistencyError("search ended with no hypotheses at all")
    return _resolve(_best(survivors, config.alpha), config)


def unidirectional_beam_search(scorer, direction: int,
                               config: BeamConfig) -> list[int]:
    """Standard single-direction beam search at the full beam width."""
    if direction not in (config.l2r_id, config.r2l_id):
        raise InvalidArgumentError(f"unknown direction tag {direction}")
    part = [Hypothesis(direction, (direction,), 0.0,
                       scorer.initial_state(direction))]
    complete: list[Hypothesis] = []
    for _ in range(config.max_len):
        if not part:
            break
        tmp = expand_hypo(part, [], scorer, config, keep=config.beam_size)
        part, complete = update_hypo(tmp, complete, config)
        if complete and len(complete) >= config.beam_size:
            best_done = _best(complete, config.alpha).penalized(config.alpha)
            if not part or best_done >= max(_optimistic(h, config) for h in part):
                break
    pool = complete if complete else part
    if not pool:
        raise InternalConsistencyError("search ended with no hypotheses at all")
    return _resolve(_best(pool, config.alpha), config)


class CountingScorer:
    """Wrapper that counts scorer evaluations (one count per step call)."""

    def __init__(self, inner):
        self.inner = inner
        self.calls = 0

    @property
    def vocab_size(self):
        return self.inner.vocab_size

    def initial_state(self, direction):
        return self.inner.initial_state(direction)

    def step(self, state, token, opposite):
        self.calls += 1
        return self.inner.step(state, token, opposite)
