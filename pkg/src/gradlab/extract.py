"""Recovering labelled examples through batched statistical queries.

The extractor walks down the tree of joint bit strings z = (y, x_1,
..., x_n).  Holding a prefix of z, it asks one vector indicator query
per round: does a hidden example extend the prefix, and which next bits
occur.  Because the tolerance is below half a batch slot, every answer
snaps to exact batch counts, and the walk either reads off a unique
matching example, descends one bit chosen proportionally to the counts,
or retries on a fresh batch.  A without-replacement variant plays the
same game against one frozen batch and always terminates.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .numerics import ToleranceError, recover_batch_average
from .paradigms import (
    BitStream,
    LabelRestriction,
    SQQuery,
    constant_zero_query,
)
from .problems import Example
from .problems import ZeroPredictor

__all__ = [
    "Failure",
    "ExtractionProgram",
    "descent_bit",
    "extract_m_samples",
    "fb_extract_all",
    "prefix_query",
    "sample_extract",
]


@dataclass(frozen=True)
class Failure:
    """Round budget ran out before enough examples were recovered."""

    extracted: int
    rounds_used: int


def prefix_query(prefix: Sequence[int], n: int, *, pad_to: int | None = None,
                 restriction: LabelRestriction = LabelRestriction.NONE,
                 ) -> SQQuery:
    """Indicator query for one descent round at the given joint prefix.

    Coordinate layout: for a nonempty prefix, coordinate 0 indicates a
    match of the whole prefix and coordinate j >= 1 indicates a match
    with next bit j equal to one.  The empty prefix drops coordinate 0
    (every example matches) and starts directly with the next-bit
    indicators.  Optional zero padding up to a fixed arity lets the
    query ride transports that insist on a constant width.
    """
    prefix = tuple(int(v) for v in prefix)
    ell = len(prefix)
    if not 0 <= ell <= n:
        raise ValueError(f"prefix length {ell} out of range for n={n}")
    if any(v not in (0, 1) for v in prefix):
        raise ValueError("prefix bits must be 0/1")
    has_head = ell > 0
    width = (1 if has_head else 0) + (n + 1 - ell)
    arity = width if pad_to is None else int(pad_to)
    if arity < width:
        raise ValueError(f"cannot pad width {width} down to {arity}")

    def evaluate(example: Example) -> np.ndarray:
        z = example.joint_bits()
        out = np.zeros(arity)
        if z[:ell] != prefix:
            return out
        base = 0
        if has_head:
            out[0] = 1.0
            base = 1
        for j in range(n + 1 - ell):
            if z[ell + j] == 1:
                out[base + j] = 1.0
        return out

    name = "prefix:" + "".join(str(v) for v in prefix)
    return SQQuery(arity=arity, evaluator=evaluate, restriction=restriction,
                   name=name)


def descent_bit(w1: int, w: int, batch_size: int, bits) -> int:
    """Choose the next bit, one w.p. w1/w, by rejection sampling.

    Each attempt reads ceil(log2(batch_size)) fresh bits and accepts
    when the value lands below w; a draw below w1 selects bit one.
    Deliberately spends bits even when the choice is forced, matching
    the per-round randomness budget of the callers.
    """
    if not 1 <= w <= batch_size or not 0 <= w1 <= w:
        raise ValueError(f"bad branch counts w1={w1} w={w} b={batch_size}")
    nbits = max(1, math.ceil(math.log2(batch_size)))
    while True:
        u = bits.take(nbits)
        if u < w1:
            return 1
        if u < w:
            return 0


class _CountError(RuntimeError):
    """Recovered counts are not consistent with any hidden batch."""


class _Attempt:
    """One descent attempt: the current prefix plus the branch rules."""

    def __init__(self, n: int, batch_size: int, root_count: int):
        self.n = int(n)
        self.batch_size = int(batch_size)
        self.root_count = int(root_count)
        self.prefix: tuple[int, ...] = ()

    def query(self, *, pad_to: int | None = None,
              restriction: LabelRestriction = LabelRestriction.NONE) -> SQQuery:
        return prefix_query(self.prefix, self.n, pad_to=pad_to,
                            restriction=restriction)

    def width(self) -> int:
        ell = len(self.prefix)
        return (1 if ell else 0) + (self.n + 1 - ell)

    def absorb(self, counts: Sequence[int], bits) -> Example | None:
        """Apply one round of recovered counts; an Example ends the walk."""
        ell = len(self.prefix)
        if ell == 0:
            w = self.root_count
            child = [int(c) for c in counts[:self.n + 1]]
        else:
            w = int(counts[0])
            child = [int(c) for c in counts[1:self.n + 2 - ell]]
        if w < 0 or w > self.batch_size or any(c < 0 or c > w for c in child):
            raise _CountError(
                f"counts {list(counts)} impossible at prefix {self.prefix}")
        if w == 0:
            return None
        if w == 1:
            z = self.prefix + tuple(1 if c == 1 else 0 for c in child)
            return Example(x=z[1:], y=z[0])
        bit = descent_bit(child[0], w, self.batch_size, bits)
        self.prefix = self.prefix + (bit,)
        if len(self.prefix) == self.n + 1:
            z = self.prefix
            return Example(x=z[1:], y=z[0])
        return None


def _recover_counts(response: Sequence[float], width: int, b: int,
                    tau: float) -> list[int]:
    """Exact batch counts behind the first `width` response coordinates."""
    trimmed = np.asarray(response, dtype=float)[:width]
    averages = recover_batch_average(trimmed, b, tau)
    return [av.numerator for av in averages]


def _check_tolerance(batch_size: int, tau: float) -> None:
    if not batch_size * tau < 0.5:
        raise ToleranceError(
            f"recovery needs batch_size*tau < 1/2, got {batch_size}*{tau}")


def sample_extract(oracle, n: int, b: int, tau: float, seed: int = 0, *,
                   rng_bits=None, round_budget: int | None = None,
                   ) -> tuple[Example, int] | Failure:
    """Pull one example, distributed as the source, out of batch queries.

    The oracle must answer vector queries against fresh hidden batches
    of size b at tolerance tau with b*tau < 1/2.  Returns the example
    together with the number of rounds spent.  With a round budget the
    call may instead return Failure; without one it runs until done,
    which takes finitely many rounds with probability one.
    """
    _check_tolerance(b, tau)
    bits = BitStream(seed) if rng_bits is None else rng_bits
    attempt = _Attempt(n, b, root_count=b)
    rounds = 0
    while round_budget is None or rounds < round_budget:
        query = attempt.query()
        response = oracle.ask(query)
        rounds += 1
        counts = _recover_counts(response, attempt.width(), b, tau)
        found = attempt.absorb(counts, bits)
        if found is not None:
            return found, rounds
    return Failure(extracted=0, rounds_used=rounds)


def extract_m_samples(oracle, m: int, round_budget: int, seed: int = 0, *,
                      n: int | None = None, b: int | None = None,
                      tau: float | None = None, rng_bits=None,
                      ) -> list[Example] | Failure:
    """Repeat single-example extraction until m examples or budget out.

    Unspecified n/b/tau are read off the oracle.  A Failure result
    tells the caller to fall back to the trivial zero predictor; it
    carries how far the run got.
    """
    if b is None:
        b = int(oracle.b)
    if tau is None:
        tau = float(oracle.tau)
    if n is None:
        n = int(oracle.D.n)
    _check_tolerance(b, tau)
    if m <= 0:
        raise ValueError("need m >= 1")
    bits = BitStream(seed) if rng_bits is None else rng_bits
    out: list[Example] = []
    rounds = 0
    while len(out) < m:
        left = round_budget - rounds
        if left <= 0:
            return Failure(extracted=len(out), rounds_used=rounds)
        got = sample_extract(oracle, n, b, tau, rng_bits=bits,
                             round_budget=left)
        if isinstance(got, Failure):
            return Failure(extracted=len(out),
                           rounds_used=rounds + got.rounds_used)
        example, used = got
        out.append(example)
        rounds += used
    return out


def _already_counts(query: SQQuery, already: Sequence[Example]) -> np.ndarray:
    total = np.zeros(query.arity)
    for example in already:
        total += query.evaluate(example)
    return np.rint(total).astype(int)


def fb_extract_all(oracle, n: int, tau: float, already: Sequence[Example],
                   *, m: int | None = None, seed: int = 0, rng_bits=None,
                   ) -> Example:
    """Draw one example uniformly from a frozen batch, skipping `already`.

    The oracle answers against one hidden batch of m examples at
    tolerance tau with m*tau < 1/2.  Counts of previously extracted
    examples are subtracted from every recovered answer, so repeated
    calls walk through the whole batch without replacement; each call
    finishes within n+1 rounds and cannot fail.
    """
    if m is None:
        m = int(oracle.m)
    _check_tolerance(m, tau)
    already = list(already)
    if not len(already) < m:
        raise ValueError(f"already holds {len(already)} of {m} examples")
    bits = BitStream(seed) if rng_bits is None else rng_bits
    attempt = _Attempt(n, m, root_count=m - len(already))
    for _ in range(n + 1):
        depth = len(attempt.prefix)
        query = attempt.query()
        response = oracle.ask(query)
        counts = _recover_counts(response, attempt.width(), m, tau)
        counts = [c - a for c, a in
                  zip(counts, _already_counts(query, already))]
        found = attempt.absorb(counts, bits)
        if found is not None:
            return found
        if len(attempt.prefix) == depth:
            raise _CountError(
                "frozen-batch walk stalled; remaining examples missing")
    raise _CountError("frozen-batch walk exceeded its round bound")


# ---------------------------------------------------------------------------
# The same walk packaged as a fixed-arity query program


class _BitCursor:
    """Serves a pre-drawn bit pool, extending deterministically if dry.

    The extension is hashed from the pool itself, so a replay with the
    same pool sees the same stream.  Bits served past the pool are
    tracked separately for randomness accounting.
    """

    def __init__(self, bits: Sequence[int]):
        self._bits = tuple(int(v) for v in bits)
        self._pos = 0
        self._overflow: BitStream | None = None
        self.overflow_consumed = 0

    def bit(self) -> int:
        if self._pos < len(self._bits):
            out = self._bits[self._pos]
            self._pos += 1
            return out
        if self._overflow is None:
            digest = hashlib.sha256(
                b"bit-pool:" + bytes(self._bits)).digest()
            self._overflow = BitStream(int.from_bytes(digest[:8], "little"))
        self.overflow_consumed += 1
        return self._overflow.bit()

    def take(self, k: int) -> int:
        out = 0
        for _ in range(k):
            out = (out << 1) | self.bit()
        return out


@dataclass(eq=False)
class ExtractionProgram:
    """Query program that farms examples and hands them to a learner.

    Emits the descent walk as fixed-arity vector queries, restarting
    after every recovered example, and stops early once `m` examples
    are in hand.  The predictor is learner(examples, payload_bits), or
    the zero predictor when the round budget ran out first.

    In alternating form every attempt opens with a pure label query on
    an odd round; once the label bit is fixed, the remaining restricted
    queries run only on rounds of the matching parity, with constant
    zero queries padding the off-parity rounds.

    With fixed_batch set the program plays the without-replacement
    variant against a frozen batch of size `b`: counts of already
    extracted examples are subtracted from every recovered answer, so
    the walk enumerates the batch and cannot stall.
    """

    n: int
    b: int
    tau: float
    m: int
    rounds: int
    learner: Callable[[Sequence[Example], tuple[int, ...]], object] | None = None
    learner_bits: int = 0
    alternating: bool = False
    fixed_batch: bool = False
    name: str = "extract"

    def __post_init__(self) -> None:
        _check_tolerance(self.b, self.tau)
        if self.fixed_batch and self.m > self.b:
            raise ValueError("cannot extract more than the frozen batch")

    @property
    def arity(self) -> int:
        return self.n + 1

    @property
    def random_bits(self) -> int:
        per_round = max(1, math.ceil(math.log2(self.b)))
        return self.learner_bits + self.rounds * per_round

    def make_alternating(self) -> "ExtractionProgram":
        """Label-restricted variant; needs twice the round budget."""
        return ExtractionProgram(
            n=self.n, b=self.b, tau=self.tau, m=self.m,
            rounds=2 * self.rounds, learner=self.learner,
            learner_bits=self.learner_bits, alternating=True,
            fixed_batch=self.fixed_batch, name=self.name + "-alternating")

    def start(self, bits: tuple[int, ...]) -> "_ExtractionRun":
        return _ExtractionRun(self, tuple(int(v) for v in bits))


class _ExtractionRun:
    def __init__(self, prog: ExtractionProgram, bits: tuple[int, ...]):
        if len(bits) < prog.learner_bits:
            raise ValueError("bit pool smaller than the learner's share")
        self.prog = prog
        self.payload_bits = bits[:prog.learner_bits]
        self.cursor = _BitCursor(bits[prog.learner_bits:])
        self.examples: list[Example] = []
        self.round = 0
        self.attempt: _Attempt | None = None
        self.label_bit: int | None = None
        self.pending: str | None = None

    @property
    def bits_consumed(self) -> int:
        return self.cursor.overflow_consumed

    def _fresh_attempt(self) -> _Attempt:
        prog = self.prog
        root = prog.b - len(self.examples) if prog.fixed_batch else prog.b
        return _Attempt(prog.n, prog.b, root_count=root)

    def _restriction(self) -> LabelRestriction:
        if self.label_bit == 1:
            return LabelRestriction.ONE_QUERY
        return LabelRestriction.ZERO_QUERY

    def _active_parity_matches(self) -> bool:
        # label 1 walks on odd rounds, label 0 on even rounds
        odd = self.round % 2 == 1
        return odd == (self.label_bit == 1)

    def next_query(self) -> SQQuery | None:
        prog = self.prog
        if len(self.examples) >= prog.m or self.round >= prog.rounds:
            return None
        self.round += 1
        if self.attempt is None:
            self.attempt = self._fresh_attempt()
            self.label_bit = None
        if not prog.alternating:
            self.pending = "walk"
            return self.attempt.query(pad_to=prog.arity)
        if self.label_bit is None:
            if self.round % 2 == 1:
                self.pending = "label"
                return _label_query(prog.arity)
            self.pending = "pad"
            return constant_zero_query(prog.arity,
                                       LabelRestriction.ZERO_QUERY)
        if self._active_parity_matches():
            self.pending = "walk"
            return self.attempt.query(pad_to=prog.arity,
                                      restriction=self._restriction())
        self.pending = "pad"
        odd = self.round % 2 == 1
        restriction = (LabelRestriction.ONE_QUERY if odd
                       else LabelRestriction.ZERO_QUERY)
        return constant_zero_query(prog.arity, restriction)

    def receive(self, response: Sequence[float]) -> None:
        prog = self.prog
        kind, self.pending = self.pending, None
        if kind == "pad":
            return
        if kind == "label":
            counts = _recover_counts(response, 1, prog.b, prog.tau)
            ones = counts[0]
            if prog.fixed_batch:
                ones -= sum(1 for ex in self.examples if ex.y == 1)
            root = self.attempt.root_count
            bit = descent_bit(ones, root, prog.b, self.cursor)
            self.attempt.prefix = (bit,)
            self.label_bit = bit
            if prog.n == 0:
                self._finish(Example(x=(), y=bit))
            return
        if kind != "walk":
            raise RuntimeError("response without a pending query")
        counts = _recover_counts(response, self.attempt.width(), prog.b,
                                 prog.tau)
        if prog.fixed_batch:
            query = self.attempt.query(pad_to=prog.arity)
            counts = [c - a for c, a in
                      zip(counts, _already_counts(query, self.examples))]
        found = self.attempt.absorb(counts, self.cursor)
        if found is not None:
            self._finish(found)

    def _finish(self, example: Example) -> None:
        self.examples.append(example)
        self.attempt = None
        self.label_bit = None

    def predictor(self):
        prog = self.prog
        if len(self.examples) < prog.m:
            return ZeroPredictor()
        if prog.learner is None:
            return ZeroPredictor()
        return prog.learner(self.examples[:prog.m], self.payload_bits)


def _label_query(arity: int) -> SQQuery:
    """First alternating round: count examples whose label is one."""

    def evaluate(example: Example) -> np.ndarray:
        out = np.zeros(arity)
        out[0] = float(example.y)
        return out

    return SQQuery(arity=arity, evaluator=evaluate,
                   restriction=LabelRestriction.ONE_QUERY, name="label")
