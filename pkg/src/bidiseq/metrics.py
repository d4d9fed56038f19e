"""Corpus BLEU and the positional diagnostics for directional balance.

All functions take token lists (or whitespace-splittable strings) and are
pure: same inputs, same numbers.  Single reference per hypothesis; add-one
smoothing switches on automatically for corpora under 100 lines unless the
caller pins it.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

from bidiseq.tensor import InvalidArgumentError

SMOOTH_BELOW = 100


def _tokens(line) -> list[str]:
    return line.split() if isinstance(line, str) else list(line)


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses, references, max_n: int = 4, case_insensitive: bool = False,
         smooth: bool | None = None) -> float:
    """Corpus BLEU percent: geometric mean of modified n-gram precisions
    times the brevity penalty.  `smooth=None` enables add-one smoothing
    (numerator and denominator, n >= 2) only for tiny corpora."""
    if len(hypotheses) != len(references):
        raise InvalidArgumentError(
            f"corpus sizes differ: {len(hypotheses)} vs {len(references)}")
    if not hypotheses:
        raise InvalidArgumentError("empty corpus")
    if smooth is None:
        smooth = len(hypotheses) < SMOOTH_BELOW
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = _tokens(hyp), _tokens(ref)
        if case_insensitive:
            hyp = [t.lower() for t in hyp]
            ref = [t.lower() for t in ref]
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            hyp_grams = _ngrams(hyp, n)
            ref_grams = _ngrams(ref, n)
            matches[n - 1] += sum(min(c, ref_grams[g]) for g, c in hyp_grams.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    log_precision = 0.0
    for n in range(max_n):
        m, t = matches[n], totals[n]
        if smooth and n >= 1:
            m, t = m + 1, t + 1
        if t == 0 or m == 0:
            return 0.0
        log_precision += math.log(m / t) / max_n
    if hyp_len == 0:
        return 0.0
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_precision)


def match_accuracy_first_last(hypotheses, references, k: int = 4,
                              positional: bool = True) -> tuple[float, float]:
    """Percent of exactly matching tokens over the first k and last k
    positions of each pair, clipped per pair to the shorter length.

    `positional=False` counts bag overlap inside the k-token windows
    instead of position-aligned equality."""
    if k < 1:
        raise InvalidArgumentError(f"k must be >= 1, got {k}")
    first = last = denom_first = denom_last = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = _tokens(hyp), _tokens(ref)
        m = min(k, len(hyp), len(ref))
        if m == 0:
            continue
        if positional:
            first += sum(h == r for h, r in zip(hyp[:m], ref[:m]))
            last += sum(h == r for h, r in zip(hyp[-m:], ref[-m:]))
        else:
            first += sum((Counter(hyp[:m]) & Counter(ref[:m])).values())
            last += sum((Counter(hyp[-m:]) & Counter(ref[-m:])).values())
        denom_first += m
        denom_last += m
    if denom_first == 0:
        return 0.0, 0.0
    return 100.0 * first / denom_first, 100.0 * last / denom_last


def position_bucket_precision(hypotheses, references, buckets: int = 10) -> list[float]:
    """Split every pair into `buckets` contiguous segments and report the
    corpus-averaged multiset precision of each segment; empty hypothesis
    segments are excluded from their bucket's average."""
    if buckets < 1:
        raise InvalidArgumentError(f"buckets must be >= 1, got {buckets}")
    sums = [0.0] * buckets
    counts = [0] * buckets
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = _tokens(hyp), _tokens(ref)
        for b in range(buckets):
            h_seg = hyp[len(hyp) * b // buckets: len(hyp) * (b + 1) // buckets]
            r_seg = ref[len(ref) * b // buckets: len(ref) * (b + 1) // buckets]
            if not h_seg:
                continue
            overlap = sum((Counter(h_seg) & Counter(r_seg)).values())
            sums[b] += overlap / len(h_seg)
            counts[b] += 1
    return [100.0 * s / c if c else 0.0 for s, c in zip(sums, counts)]


def length_bucket_bleu(hypotheses, references, sources, interval_edges,
                       **bleu_kwargs) -> list[dict]:
    """Corpus BLEU computed independently per source-length interval.

    Edges e1 < e2 < ... partition lengths into (0, e1], (e1, e2], ...,
    (en, inf).  Returns one record per interval with its label, sentence
    count, and BLEU (None for empty intervals)."""
    edges = list(interval_edges)
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise InvalidArgumentError(f"interval edges must increase: {edges}")
    bounds = [(0, edges[0])] + list(zip(edges, edges[1:])) + [(edges[-1], math.inf)]
    out = []
    for lo, hi in bounds:
        idx = [i for i, s in enumerate(sources) if lo < len(_tokens(s)) <= hi]
        label = f"({lo}, {'inf' if hi is math.inf else hi}]"
        if not idx:
            out.append({"interval": label, "count": 0, "bleu": None})
            continue
        score = bleu([hypotheses[i] for i in idx], [references[i] for i in idx],
                     **bleu_kwargs)
        out.append({"interval": label, "count": len(idx), "bleu": score})
    return out


@dataclass
class MetricReport:
    """Flat metric collection with text and machine-readable renderings."""

    values: dict = field(default_factory=dict)

    def add(self, name: str, value) -> None:
        self.values[name] = value

    def text_block(self) -> str:
        width = max((len(k) for k in self.values), default=0)
        lines = []
        for k, v in self.values.items():
            shown = f"{v:.2f}" if isinstance(v, float) else str(v)
            lines.append(f"{k.ljust(width)}  {shown}")
        return "\n".join(lines) + "\n"

    def machine_lines(self) -> str:
        lines = []
        for k, v in self.values.items():
            shown = f"{v:.6f}" if isinstance(v, float) else str(v)
            lines.append(f"{k}\t{shown}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.machine_lines())


def full_report(hypotheses, references, sources=None, k: int = 4,
                buckets: int = 10, interval_edges=(5, 10, 20),
                case_insensitive: bool = False) -> MetricReport:
    """The standard analysis bundle over one decoded corpus."""
    report = MetricReport()
    report.add("bleu", bleu(hypotheses, references,
                            case_insensitive=case_insensitive))
    first, last = match_accuracy_first_last(hypotheses, references, k=k)
    report.add(f"match_first_{k}", first)
    report.add(f"match_last_{k}", last)
    for b, val in enumerate(position_bucket_precision(hypotheses, references,
                                                      buckets=buckets)):
        report.add(f"position_bucket_{b}", val)
    if sources is not None:
        for rec in length_bucket_bleu(hypotheses, references, sources,
                                      interval_edges,
                                      case_insensitive=case_insensitive):
            val = rec["bleu"] if rec["bleu"] is not None else "n/a"
            report.add(f"bleu_len_{rec['interval']}", val)
            report.add(f"count_len_{rec['interval']}", rec["count"])
    return report
