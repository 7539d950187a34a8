"""Oracle-mediated learning methods as explicit state machines.

Every method kind interacts with the world only through a typed oracle:
statistical queries against the population, batch statistical queries
against fresh hidden batches, full-batch queries against one frozen
batch, or rho-approximate gradient updates.  Runners record transcripts
so that every validity contract can be re-derived offline.

Batch oracles draw from a single master stream per run, so a run is a
pure function of (method, distribution, seed, adversary choice).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .numerics import (
    RoundingOracle,
    RoundingStrategy,
    clip1,
    grid_exponent,
    round_approximate,
)
from .problems import (
    SQUARE_LOSS,
    Batch,
    Example,
    FiniteDistribution,
    SquareLoss,
    ZeroPredictor,
    ParityPredictor,
    clip_predictor,
    population_loss,
    sample_batch,
)

__all__ = [
    "LabelRestriction",
    "NoiseAdversary",
    "QueryRangeError",
    "RestrictionError",
    "NonDifferentiableError",
    "SQQuery",
    "constant_zero_query",
    "RoundRecord",
    "Transcript",
    "SQOracle",
    "BSQOracle",
    "FBSQOracle",
    "sq_oracle_answer",
    "bsq_oracle_answer",
    "fbsq_oracle_answer",
    "DiffModel",
    "ModelSnapshot",
    "run_bsgd",
    "run_fbgd",
    "BSGDRoundInfo",
    "ProgramRun",
    "QueryProgram",
    "GeneratorProgram",
    "BitStream",
    "MethodRun",
    "PACMethod",
    "SQMethod",
    "BSQMethod",
    "FBSQMethod",
    "BSGDMethod",
    "FBGDMethod",
    "ErrorEstimate",
    "eval_method_error",
    "gf2_solve",
    "parity_learner",
]


class QueryRangeError(ValueError):
    """A query evaluated outside [-1, 1]."""


class RestrictionError(ValueError):
    """A label-restricted query returned a nonzero value on the wrong label."""


class NonDifferentiableError(RuntimeError):
    """A gradient was requested where the model declares none."""


class LabelRestriction(Enum):
    NONE = "none"
    ZERO_QUERY = "zero"  # must vanish on y = 1
    ONE_QUERY = "one"    # must vanish on y = 0

    @property
    def forced_label(self) -> int | None:
        if self is LabelRestriction.ZERO_QUERY:
            return 0
        if self is LabelRestriction.ONE_QUERY:
            return 1
        return None


class NoiseAdversary(Enum):
    ZERO_NOISE = "zero"
    PLUS_TAU = "plus"
    MINUS_TAU = "minus"
    SEEDED_RANDOM = "random"


@dataclass(frozen=True, eq=False)
class SQQuery:
    """Bounded vector query over labelled examples.

    The evaluator maps an example to `arity` reals in [-1, 1].  Queries
    carrying a label restriction must vanish identically on the other
    label; this is enforced whenever the query is evaluated.
    """

    arity: int
    evaluator: Callable[[Example], Sequence[float]]
    restriction: LabelRestriction = LabelRestriction.NONE
    name: str = ""

    def evaluate(self, example: Example) -> np.ndarray:
        raw = np.asarray(self.evaluator(example), dtype=float)
        if raw.shape != (self.arity,):
            raise ValueError(
                f"query {self.name!r} returned shape {raw.shape}, expected ({self.arity},)"
            )
        if raw.size and np.max(np.abs(raw)) > 1.0 + 1e-12:
            raise QueryRangeError(f"query {self.name!r} left [-1, 1] on {example}")
        forced = self.restriction.forced_label
        if forced is not None and example.y != forced and np.any(raw != 0.0):
            raise RestrictionError(
                f"label-restricted query {self.name!r} nonzero on y={example.y}"
            )
        return raw


def constant_zero_query(arity: int, restriction: LabelRestriction) -> SQQuery:
    """Padding query: identically zero, with the requested restriction."""
    zeros = [0.0] * arity
    return SQQuery(arity, lambda ex: zeros, restriction, name="pad-zero")


def _sparse_to_payload(g: dict[int, float]) -> dict:
    idx = sorted(g)
    return {"idx": idx, "val": [g[i] for i in idx]}


def _vector_payload(v) -> object:
    if isinstance(v, dict):
        return _sparse_to_payload(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    return v


@dataclass
class RoundRecord:
    """One oracle interaction; enough data to re-check validity offline."""

    index: int
    kind: str
    response: object
    exact_mean: object = None
    batch_codes: list[int] | None = None
    item_values: list | None = None
    batch_seed: int | None = None
    iterate_hash: str | None = None

    def to_json(self) -> dict:
        out = {"round": self.index, "kind": self.kind,
               "response": _vector_payload(self.response)}
        if self.exact_mean is not None:
            out["mean"] = _vector_payload(self.exact_mean)
        if self.batch_codes is not None:
            out["batch"] = list(self.batch_codes)
        if self.item_values is not None:
            out["items"] = [_vector_payload(v) for v in self.item_values]
        if self.batch_seed is not None:
            out["seed"] = self.batch_seed
        if self.iterate_hash is not None:
            out["hash"] = self.iterate_hash
        return out


class Transcript:
    """Ordered record of every oracle round plus resource accounting."""

    def __init__(self, meta: dict | None = None):
        self.meta: dict = dict(meta or {})
        self.records: list[RoundRecord] = []
        self.samples_consumed: int = 0
        self.random_bits_consumed: int = 0

    def append(self, record: RoundRecord) -> None:
        self.records.append(record)

    @property
    def rounds(self) -> int:
        return len(self.records)

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            header = {
                "meta": self.meta,
                "samples_consumed": self.samples_consumed,
                "random_bits_consumed": self.random_bits_consumed,
            }
            fh.write(json.dumps(header) + "\n")
            for rec in self.records:
                fh.write(json.dumps(rec.to_json()) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "Transcript":
        with open(path) as fh:
            lines = [line for line in fh if line.strip()]
        if not lines:
            raise ValueError(f"transcript {path} is empty")
        header = json.loads(lines[0])
        out = cls(meta=header.get("meta", {}))
        out.samples_consumed = int(header.get("samples_consumed", 0))
        out.random_bits_consumed = int(header.get("random_bits_consumed", 0))
        for line in lines[1:]:
            row = json.loads(line)
            out.append(RoundRecord(
                index=int(row["round"]),
                kind=row["kind"],
                response=row.get("response"),
                exact_mean=row.get("mean"),
                batch_codes=row.get("batch"),
                item_values=row.get("items"),
                batch_seed=row.get("seed"),
                iterate_hash=row.get("hash"),
            ))
        return out


def _hash_vector(w: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(w).tobytes()).hexdigest()[:16]


def _apply_noise(mean: np.ndarray, tau: float, adversary: NoiseAdversary,
                 rng: np.random.Generator) -> np.ndarray:
    if adversary is NoiseAdversary.ZERO_NOISE:
        noisy = mean.copy()
    elif adversary is NoiseAdversary.PLUS_TAU:
        noisy = mean + tau
    elif adversary is NoiseAdversary.MINUS_TAU:
        noisy = mean - tau
    elif adversary is NoiseAdversary.SEEDED_RANDOM:
        noisy = mean + rng.uniform(-tau, tau, size=mean.shape)
    else:  # pragma: no cover - exhaustive enum
        raise ValueError(adversary)
    return np.clip(noisy, -1.0, 1.0)


class _SupportValueCache:
    """Per-oracle cache of query values on the support of D.

    Keyed by query identity; the query object is retained so ids cannot
    be recycled.  Evaluating on the support also runs the range and
    restriction checks on every example the oracle could ever draw.
    """

    def __init__(self, D: FiniteDistribution):
        self.D = D
        self._cache: dict[int, tuple[SQQuery, np.ndarray]] = {}

    def values(self, query: SQQuery) -> np.ndarray:
        hit = self._cache.get(id(query))
        if hit is not None and hit[0] is query:
            return hit[1]
        vals = np.stack([query.evaluate(ex) for ex in self.D.support])
        self._cache[id(query)] = (query, vals)
        return vals


class SQOracle:
    """Statistical queries answered from exact population expectations."""

    def __init__(self, D: FiniteDistribution, tau: float,
                 adversary: NoiseAdversary = NoiseAdversary.ZERO_NOISE,
                 seed: int = 0, record: bool = True):
        self.D = D
        self.tau = float(tau)
        self.adversary = adversary
        self._rng = np.random.default_rng(seed)
        self._support = _SupportValueCache(D)
        self.transcript = Transcript(meta={"kind": "sq", "tau": self.tau})
        self.record = record
        self.rounds = 0

    def ask(self, query: SQQuery) -> np.ndarray:
        vals = self._support.values(query)
        mean = self.D.probs @ vals
        response = _apply_noise(mean, self.tau, self.adversary, self._rng)
        self.rounds += 1
        if self.record:
            self.transcript.append(RoundRecord(
                index=self.rounds, kind="sq", response=response.copy(),
                exact_mean=mean.copy()))
        return response


class BSQOracle:
    """Batch statistical queries against fresh hidden mini-batches.

    Each ask draws b fresh i.i.d. examples from one master stream, so
    the whole interaction is determined by the construction seed.  The
    hidden batch never leaves the oracle except through the transcript.
    """

    def __init__(self, D: FiniteDistribution, b: int, tau: float,
                 adversary: NoiseAdversary = NoiseAdversary.ZERO_NOISE,
                 seed: int = 0, record: bool = True, record_items: bool = False):
        if b <= 0:
            raise ValueError("batch size must be positive")
        self.D = D
        self.b = int(b)
        self.tau = float(tau)
        self.adversary = adversary
        self.seed = int(seed)
        self._rng = np.random.default_rng(seed)
        self._support = _SupportValueCache(D)
        self.record = record
        self.record_items = record_items
        self.transcript = Transcript(
            meta={"kind": "bsq", "b": self.b, "tau": self.tau, "seed": self.seed})
        self.rounds = 0
        self.samples_consumed = 0

    def ask(self, query: SQQuery) -> np.ndarray:
        vals = self._support.values(query)
        idx = np.searchsorted(self.D.cdf, self._rng.random(self.b), side="right")
        idx = np.minimum(idx, len(self.D.support) - 1)
        mean = vals[idx].mean(axis=0)
        response = _apply_noise(mean, self.tau, self.adversary, self._rng)
        self.rounds += 1
        self.samples_consumed += self.b
        self.transcript.samples_consumed = self.samples_consumed
        if self.record:
            rec = RoundRecord(
                index=self.rounds, kind="bsq", response=response.copy(),
                exact_mean=mean.copy(),
                batch_codes=[int(c) for c in self.D.joint_codes[idx]])
            if self.record_items:
                rec.item_values = [vals[i].tolist() for i in idx]
            self.transcript.append(rec)
        return response


class FBSQOracle:
    """Statistical queries against one frozen batch.

    Identical queries under the zero-noise adversary always give
    identical answers, because the batch never changes.
    """

    def __init__(self, batch: Batch, tau: float,
                 adversary: NoiseAdversary = NoiseAdversary.ZERO_NOISE,
                 seed: int = 0, record: bool = True, record_items: bool = False):
        if not batch.items:
            raise ValueError("frozen batch must be nonempty")
        self.batch = batch
        self.m = len(batch.items)
        self.tau = float(tau)
        self.adversary = adversary
        self._rng = np.random.default_rng(seed)
        self.record = record
        self.record_items = record_items
        self.transcript = Transcript(
            meta={"kind": "fbsq", "m": self.m, "tau": self.tau})
        self.rounds = 0

    def ask(self, query: SQQuery) -> np.ndarray:
        vals = np.stack([query.evaluate(ex) for ex in self.batch.items])
        mean = vals.mean(axis=0)
        response = _apply_noise(mean, self.tau, self.adversary, self._rng)
        self.rounds += 1
        if self.record:
            rec = RoundRecord(
                index=self.rounds, kind="fbsq", response=response.copy(),
                exact_mean=mean.copy(),
                batch_codes=[ex.joint_code() for ex in self.batch.items])
            if self.record_items:
                rec.item_values = [v.tolist() for v in vals]
            self.transcript.append(rec)
        return response


def sq_oracle_answer(D: FiniteDistribution, query: SQQuery, tau: float,
                     adversary: NoiseAdversary = NoiseAdversary.ZERO_NOISE,
                     seed: int = 0) -> float:
    """One-shot scalar convenience wrapper around SQOracle."""
    oracle = SQOracle(D, tau, adversary, seed, record=False)
    return float(oracle.ask(query)[0]) if query.arity == 1 else oracle.ask(query)


def bsq_oracle_answer(D: FiniteDistribution, query: SQQuery, b: int, tau: float,
                      adversary: NoiseAdversary = NoiseAdversary.ZERO_NOISE,
                      seed: int = 0) -> tuple[np.ndarray, Transcript]:
    """One-shot batch query; the hidden batch stays inside the transcript."""
    oracle = BSQOracle(D, b, tau, adversary, seed, record=True, record_items=True)
    response = oracle.ask(query)
    return response, oracle.transcript


def fbsq_oracle_answer(batch: Batch, query: SQQuery, tau: float,
                       adversary: NoiseAdversary = NoiseAdversary.ZERO_NOISE,
                       seed: int = 0) -> tuple[np.ndarray, Transcript]:
    oracle = FBSQOracle(batch, tau, adversary, seed, record=True, record_items=True)
    response = oracle.ask(query)
    return response, oracle.transcript


# ---------------------------------------------------------------------------
# Differentiable models and gradient runners


@dataclass(eq=False)
class DiffModel:
    """A parametric model exposing value and per-example loss gradients.

    loss_gradient returns either a dense vector of length dim or a
    sparse {index: value} dict whose missing entries are exactly zero.
    Sparse returns are reserved for models that can certify the
    missing coordinates vanish identically, so a valid rounding of them
    is forced to zero and dense and sparse training coincide.
    """

    dim: int
    random_bits: int
    init: Callable[[tuple[int, ...]], np.ndarray]
    value: Callable[[np.ndarray, tuple[int, ...]], float]
    loss_gradient: Callable[[np.ndarray, Example, SquareLoss], object]
    name: str = ""


@dataclass(eq=False)
class ModelSnapshot:
    """Predictor formed by freezing a model at trained parameters."""

    model: DiffModel
    params: np.ndarray

    def __call__(self, x: tuple[int, ...]) -> float:
        return float(self.model.value(self.params, x))

    def __repr__(self) -> str:
        return f"ModelSnapshot({self.model.name or 'model'}, dim={self.model.dim})"


@dataclass
class BSGDRoundInfo:
    """Post-update view of one gradient round, passed to audit hooks."""

    index: int
    batch: tuple[Example, ...]
    avg: object
    response: object
    w: np.ndarray


def _draw_init_bits(seed: int, r: int) -> tuple[int, ...]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1B17]))
    return tuple(int(v) for v in rng.integers(0, 2, size=r))


def _clipped_gradient(model: DiffModel, w: np.ndarray, ex: Example,
                      loss: SquareLoss) -> object:
    g = model.loss_gradient(w, ex, loss)
    if isinstance(g, dict):
        return {i: (-1.0 if v < -1.0 else (1.0 if v > 1.0 else v))
                for i, v in g.items()}
    return clip1(g)


def _round_sparse(avg: dict[int, float], rho: float,
                  rounding: RoundingOracle) -> dict[int, float]:
    if not avg:
        return {}
    if len(avg) == 1 and rounding.strategy is RoundingStrategy.NEAREST:
        # scalar shortcut, bit-identical to the vector path
        (i, v), = avg.items()
        s = v / rho
        if s == 0.0:
            return {i: 0.0}
        q = math.floor(abs(s) + 0.5)
        return {i: q * rho if s > 0 else -q * rho}
    idx = sorted(avg)
    vals = np.array([avg[i] for i in idx], dtype=float)
    rounded = round_approximate(vals, rho, rounding)
    return dict(zip(idx, rounded.tolist()))


def _gradient_step(model: DiffModel, w: np.ndarray, items: Sequence[Example],
                   rho: float, gamma: float, rounding: RoundingOracle,
                   loss: SquareLoss) -> tuple[object, object]:
    """Clip per example, average, round; returns (avg, response)."""
    b = len(items)
    first = _clipped_gradient(model, w, items[0], loss)
    if isinstance(first, dict):
        acc = dict(first)
        for ex in items[1:]:
            g = _clipped_gradient(model, w, ex, loss)
            for i, v in g.items():
                acc[i] = acc.get(i, 0.0) + v
        avg = {i: v / b for i, v in acc.items()}
        response = _round_sparse(avg, rho, rounding)
        for i, v in response.items():
            if v != 0.0:
                w[i] -= gamma * v
        return avg, response
    acc = np.asarray(first, dtype=float).copy()
    for ex in items[1:]:
        acc += _clipped_gradient(model, w, ex, loss)
    avg = acc / b
    response = round_approximate(avg, rho, rounding)
    w -= gamma * response
    return avg, response


def _run_gradient_method(model: DiffModel, batches, T: int, rho: float,
                         gamma: float, rounding: RoundingOracle, seed: int,
                         kind: str, b: int, record: bool, record_items: bool,
                         record_hashes: bool, loss: SquareLoss,
                         hook) -> "MethodRun":
    grid_exponent(rho)
    bits = _draw_init_bits(seed, model.random_bits)
    w = np.array(model.init(bits), dtype=float)
    if w.shape != (model.dim,):
        raise ValueError(f"init returned shape {w.shape}, expected ({model.dim},)")
    transcript = Transcript(meta={
        "kind": kind, "T": T, "rho": rho, "b": b, "gamma": gamma,
        "seed": seed, "dim": model.dim, "model": model.name,
        "strategy": rounding.strategy.value,
    })
    for t in range(1, T + 1):
        items = batches(t)
        if record and record_items:
            item_grads = [_clipped_gradient(model, w, ex, loss) for ex in items]
        else:
            item_grads = None
        avg, response = _gradient_step(model, w, items, rho, gamma, rounding, loss)
        transcript.samples_consumed += len(items) if kind == "bsgd" else 0
        if record:
            rec = RoundRecord(
                index=t, kind=kind,
                response=dict(response) if isinstance(response, dict)
                else response.copy(),
                exact_mean=dict(avg) if isinstance(avg, dict) else avg.copy(),
                batch_codes=[ex.joint_code() for ex in items])
            if item_grads is not None:
                rec.item_values = [
                    dict(g) if isinstance(g, dict) else np.asarray(g).tolist()
                    for g in item_grads]
            if record_hashes:
                rec.iterate_hash = _hash_vector(w)
            transcript.append(rec)
        if hook is not None:
            hook(BSGDRoundInfo(index=t, batch=tuple(items), avg=avg,
                               response=response, w=w))
    transcript.random_bits_consumed = model.random_bits
    if kind == "fbgd":
        transcript.samples_consumed = len(batches(1))
    predictor = ModelSnapshot(model, w.copy())
    return MethodRun(predictor=predictor, transcript=transcript,
                     final_params=w.copy(), init_bits=bits)


def _w_before(w, response, gamma):  # pragma: no cover - placeholder, unused
    return w


def run_bsgd(model: DiffModel, D: FiniteDistribution, T: int, rho: float,
             b: int, gamma: float = 1.0,
             rounding: RoundingOracle | None = None, seed: int = 0,
             record: bool = True, record_items: bool = False,
             record_hashes: bool = False,
             loss: SquareLoss = SQUARE_LOSS, hook=None) -> "MethodRun":
    """Mini-batch SGD at precision rho with fresh hidden batches.

    Per round: draw b i.i.d. examples, clip each per-example gradient to
    [-1, 1] entrywise, average exactly, hand the average to the rounding
    oracle, and step w <- w - gamma * g with the returned grid vector.
    """
    if rounding is None:
        rounding = RoundingOracle()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA7C]))
    support = D.support
    cdf = D.cdf
    b = int(b)

    def batches(t: int) -> tuple[Example, ...]:
        idx = np.searchsorted(cdf, rng.random(b), side="right")
        idx = np.minimum(idx, len(support) - 1)
        return tuple(support[i] for i in idx)

    return _run_gradient_method(model, batches, T, rho, gamma, rounding, seed,
                                "bsgd", b, record, record_items, record_hashes,
                                loss, hook)


def run_fbgd(model: DiffModel, S: Batch, T: int, rho: float,
             gamma: float = 1.0, rounding: RoundingOracle | None = None,
             seed: int = 0, record: bool = True, record_items: bool = False,
             record_hashes: bool = False,
             loss: SquareLoss = SQUARE_LOSS, hook=None) -> "MethodRun":
    """Full-batch gradient descent: every round reuses the frozen batch S."""
    if rounding is None:
        rounding = RoundingOracle()
    items = tuple(S.items)

    def batches(t: int) -> tuple[Example, ...]:
        return items

    return _run_gradient_method(model, batches, T, rho, gamma, rounding, seed,
                                "fbgd", len(items), record, record_items,
                                record_hashes, loss, hook)


# ---------------------------------------------------------------------------
# Query programs: adaptive query methods as data


class ProgramRun(Protocol):
    """One execution of a query program; advanced round by round."""

    def next_query(self) -> SQQuery | None: ...

    def receive(self, response: Sequence[float]) -> None: ...

    def predictor(self): ...


class QueryProgram(Protocol):
    """Factory of program runs; all state lives in the run object.

    Restarting with the same random bits and feeding the same responses
    must reproduce the same queries and predictor.
    """

    rounds: int
    arity: int
    random_bits: int

    def start(self, bits: tuple[int, ...]) -> ProgramRun: ...


@dataclass(eq=False)
class GeneratorProgram:
    """Query program given as pure functions of (round, bits, responses).

    query_generator(t, bits, responses) returns the round-t query, or
    None to finish early; final_predictor(bits, responses) builds the
    output hypothesis.  Both must be pure so a run can be replayed from
    its transcript.
    """

    rounds: int
    arity: int
    random_bits: int
    query_generator: Callable[
        [int, tuple[int, ...], tuple[tuple[float, ...], ...]], SQQuery | None]
    final_predictor: Callable[
        [tuple[int, ...], tuple[tuple[float, ...], ...]], object]
    alternating: bool = False
    name: str = ""

    def start(self, bits: tuple[int, ...]) -> "_GeneratorRun":
        return _GeneratorRun(self, tuple(bits))


class _GeneratorRun:
    def __init__(self, prog: GeneratorProgram, bits: tuple[int, ...]):
        self.prog = prog
        self.bits = bits
        self.responses: list[tuple[float, ...]] = []
        self._done = False

    def next_query(self) -> SQQuery | None:
        t = len(self.responses) + 1
        if self._done or t > self.prog.rounds:
            return None
        q = self.prog.query_generator(t, self.bits, tuple(self.responses))
        if q is None:
            self._done = True
        return q

    def receive(self, response: Sequence[float]) -> None:
        self.responses.append(tuple(float(v) for v in response))

    def predictor(self):
        return self.prog.final_predictor(self.bits, tuple(self.responses))


class BitStream:
    """Counting source of fair coin flips, deterministic in its seed."""

    def __init__(self, seed: int):
        self._rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB175]))
        self.consumed = 0
        self._buffer = 0
        self._available = 0

    def bit(self) -> int:
        if self._available == 0:
            self._buffer = int(self._rng.integers(0, 1 << 62, dtype=np.int64))
            self._available = 62
        out = self._buffer & 1
        self._buffer >>= 1
        self._available -= 1
        self.consumed += 1
        return out

    def take(self, k: int) -> int:
        """k fresh bits assembled MSB first."""
        out = 0
        for _ in range(k):
            out = (out << 1) | self.bit()
        return out


@dataclass(eq=False)
class MethodRun:
    predictor: object
    transcript: Transcript
    final_params: np.ndarray | None = None
    init_bits: tuple[int, ...] | None = None


@dataclass(eq=False)
class PACMethod:
    """Learns from m labelled samples and r random bits."""

    m: int
    r: int
    learn: Callable[[Sequence[Example], tuple[int, ...]], object]
    name: str = "pac"

    def __post_init__(self) -> None:
        if self.m <= 0 or self.r < 0:
            raise ValueError("PAC method needs m >= 1 and r >= 0")

    def run(self, D: FiniteDistribution, seed: int = 0, **_: object) -> MethodRun:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9AC]))
        sample_seed = int(rng.integers(0, 1 << 62))
        batch = sample_batch(D, self.m, sample_seed)
        bits = tuple(int(v) for v in rng.integers(0, 2, size=self.r))
        predictor = self.learn(batch.items, bits)
        transcript = Transcript(meta={"kind": "pac", "m": self.m, "r": self.r})
        transcript.samples_consumed = self.m
        transcript.random_bits_consumed = self.r
        return MethodRun(predictor=predictor, transcript=transcript,
                         init_bits=bits)


def _drive_query_method(program: QueryProgram, k: int, oracle,
                        seed: int, expected_arity: int | None) -> MethodRun:
    bits_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB117]))
    bits = tuple(int(v) for v in bits_rng.integers(0, 2, size=program.random_bits))
    run = program.start(bits)
    rounds_used = 0
    for _ in range(k):
        query = run.next_query()
        if query is None:
            break
        if expected_arity is not None and query.arity != expected_arity:
            raise ValueError(
                f"program emitted arity {query.arity}, declared {expected_arity}")
        response = oracle.ask(query)
        run.receive(response)
        rounds_used += 1
    predictor = run.predictor()
    transcript = oracle.transcript
    transcript.meta["rounds_used"] = rounds_used
    transcript.random_bits_consumed = program.random_bits
    if hasattr(run, "bits_consumed"):
        transcript.random_bits_consumed += int(run.bits_consumed)
    return MethodRun(predictor=predictor, transcript=transcript, init_bits=bits)


def _check_dyadic(tau: float) -> float:
    grid_exponent(tau)
    return float(tau)


@dataclass(eq=False)
class SQMethod:
    """k adaptive scalar statistical queries at tolerance tau."""

    k: int
    tau: float
    r: int
    program: QueryProgram
    name: str = "sq"

    def __post_init__(self) -> None:
        if self.k < 0:
            raise ValueError("round count cannot be negative")
        _check_dyadic(self.tau)

    def run(self, D: FiniteDistribution, seed: int = 0,
            adversary: NoiseAdversary = NoiseAdversary.ZERO_NOISE,
            record: bool = True, **_: object) -> MethodRun:
        oracle = SQOracle(D, self.tau, adversary, seed, record=record)
        return _drive_query_method(self.program, self.k, oracle, seed, 1)


@dataclass(eq=False)
class BSQMethod:
    """k adaptive vector queries answered from fresh hidden b-batches."""

    k: int
    tau: float
    b: int
    p: int
    r: int
    program: QueryProgram
    name: str = "bsq"
    alternating: bool = False

    def __post_init__(self) -> None:
        if self.k < 0 or self.b <= 0 or self.p <= 0:
            raise ValueError("need k >= 0 and positive b, p")
        _check_dyadic(self.tau)

    def run(self, D: FiniteDistribution, seed: int = 0,
            adversary: NoiseAdversary = NoiseAdversary.ZERO_NOISE,
            record: bool = True, record_items: bool = False,
            **_: object) -> MethodRun:
        oracle = BSQOracle(D, self.b, self.tau, adversary, seed,
                           record=record, record_items=record_items)
        out = _drive_query_method(self.program, self.k, oracle, seed, self.p)
        out.transcript.samples_consumed = oracle.samples_consumed
        return out


@dataclass(eq=False)
class FBSQMethod:
    """k adaptive vector queries against one frozen batch of size m."""

    k: int
    tau: float
    m: int
    p: int
    r: int
    program: QueryProgram
    name: str = "fbsq"
    alternating: bool = False

    def __post_init__(self) -> None:
        if self.k < 0 or self.m <= 0 or self.p <= 0:
            raise ValueError("need k >= 0 and positive m, p")
        _check_dyadic(self.tau)

    def run(self, D: FiniteDistribution, seed: int = 0,
            adversary: NoiseAdversary = NoiseAdversary.ZERO_NOISE,
            record: bool = True, record_items: bool = False,
            **_: object) -> MethodRun:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xFB5]))
        batch = sample_batch(D, self.m, int(rng.integers(0, 1 << 62)))
        oracle = FBSQOracle(batch, self.tau, adversary, seed,
                            record=record, record_items=record_items)
        out = _drive_query_method(self.program, self.k, oracle, seed, self.p)
        out.transcript.samples_consumed = self.m
        return out


@dataclass(eq=False)
class BSGDMethod:
    """T rounds of rho-precision SGD on fresh hidden b-batches."""

    model: DiffModel
    T: int
    rho: float
    b: int
    gamma: float = 1.0
    name: str = "bsgd"

    def __post_init__(self) -> None:
        grid_exponent(self.rho)
        if self.T < 0 or self.b <= 0:
            raise ValueError("need T >= 0 and positive b")

    def run(self, D: FiniteDistribution, seed: int = 0,
            rounding: RoundingOracle | None = None, record: bool = True,
            hook=None, **_: object) -> MethodRun:
        return run_bsgd(self.model, D, self.T, self.rho, self.b, self.gamma,
                        rounding, seed, record=record, hook=hook)


@dataclass(eq=False)
class FBGDMethod:
    """T rounds of rho-precision full-batch descent on one frozen batch."""

    model: DiffModel
    T: int
    rho: float
    m: int
    gamma: float = 1.0
    name: str = "fbgd"

    def __post_init__(self) -> None:
        grid_exponent(self.rho)
        if self.T < 0 or self.m <= 0:
            raise ValueError("need T >= 0 and positive m")

    def run(self, D: FiniteDistribution, seed: int = 0,
            rounding: RoundingOracle | None = None, record: bool = True,
            hook=None, **_: object) -> MethodRun:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xFB6D]))
        S = sample_batch(D, self.m, int(rng.integers(0, 1 << 62)))
        return run_fbgd(self.model, S, self.T, self.rho, self.gamma, rounding,
                        seed, record=record, hook=hook)


@dataclass(frozen=True)
class ErrorEstimate:
    mean: float
    stderr: float
    trials: int

    def __str__(self) -> str:
        return f"{self.mean:.4f} +- {self.stderr:.4f} ({self.trials} trials)"


def eval_method_error(method, D: FiniteDistribution, trials: int,
                      seed: int = 0, **run_kwargs) -> ErrorEstimate:
    """Monte-Carlo mean population loss over independent runs.

    Predictor outputs are clamped to [-1, 1] before the loss is taken.
    """
    if trials <= 0:
        raise ValueError("need at least one trial")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7A1]))
    trial_seeds = rng.integers(0, 1 << 62, size=trials)
    losses = np.empty(trials)
    for i, s in enumerate(trial_seeds):
        out = method.run(D, seed=int(s), record=False, **run_kwargs)
        losses[i] = population_loss(D, clip_predictor(out.predictor))
    stderr = float(losses.std(ddof=1) / np.sqrt(trials)) if trials > 1 else 0.0
    return ErrorEstimate(mean=float(losses.mean()), stderr=stderr, trials=trials)


# ---------------------------------------------------------------------------
# Reference PAC payload: parity learning by elimination over GF(2)


def gf2_solve(A: np.ndarray, rhs: np.ndarray) -> np.ndarray | None:
    """A particular solution of A x = rhs over GF(2), free variables 0.

    Returns None when the system is inconsistent.
    """
    A = np.asarray(A, dtype=np.uint8) % 2
    rhs = np.asarray(rhs, dtype=np.uint8) % 2
    rows, cols = A.shape
    M = np.concatenate([A, rhs.reshape(-1, 1)], axis=1)
    pivot_cols = []
    row = 0
    for col in range(cols):
        pivot = None
        for rr in range(row, rows):
            if M[rr, col]:
                pivot = rr
                break
        if pivot is None:
            continue
        M[[row, pivot]] = M[[pivot, row]]
        mask = M[:, col].astype(bool)
        mask[row] = False
        M[mask] ^= M[row]
        pivot_cols.append(col)
        row += 1
        if row == rows:
            break
    for rr in range(row, rows):
        if M[rr, cols]:
            return None
    x = np.zeros(cols, dtype=np.uint8)
    for i, col in enumerate(pivot_cols):
        x[col] = M[i, cols]
    return x


def parity_learner(n: int, m: int | None = None) -> PACMethod:
    """PAC method solving for a parity (mask, bias) consistent with the sample.

    Uses m = 2n samples by default and zero random bits.  An
    inconsistent sample yields the zero predictor.
    """
    if m is None:
        m = 2 * n

    def learn(samples: Sequence[Example], bits: tuple[int, ...]):
        A = np.array([list(ex.x) + [1] for ex in samples], dtype=np.uint8)
        rhs = np.array([ex.y for ex in samples], dtype=np.uint8)
        sol = gf2_solve(A, rhs)
        if sol is None:
            return ZeroPredictor()
        return ParityPredictor(tuple(int(v) for v in sol[:n]), int(sol[n]))

    return PACMethod(m=m, r=0, learn=learn, name=f"parity-gf2-n{n}")
