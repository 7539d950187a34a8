"""Exact grid arithmetic for finite-precision gradient oracles.

Grid steps are dyadic (2**-d with d <= 40), so every multiple of a step
with magnitude at most 1 is exactly representable in float64 and all
scaling by the step is lossless.  Empirical averages of indicator
queries are carried as integer-count / batch-size pairs so that no
rounding noise enters except at the oracle boundary.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

MAX_GRID_EXPONENT = 40

__all__ = [
    "MAX_GRID_EXPONENT",
    "GridError",
    "ToleranceError",
    "GridValue",
    "EmpiricalAverage",
    "RoundingStrategy",
    "RoundingOracle",
    "grid_exponent",
    "clip1",
    "round_nearest_multiple",
    "round_approximate",
    "valid_rounding",
    "recover_batch_average",
]


class GridError(ValueError):
    """A value is not a dyadic grid step or not on its declared grid."""


class ToleranceError(ValueError):
    """A tolerance parameter violates an exactness contract."""


def grid_exponent(step: float) -> int:
    """Return d such that step == 2**-d, or raise GridError.

    Only dyadic steps up to 2**-40 are admitted; beyond that the
    exactness guarantees of float64 multiples no longer hold.
    """
    if not (isinstance(step, (int, float)) and step > 0):
        raise GridError(f"grid step must be positive, got {step!r}")
    mantissa, exp = math.frexp(float(step))
    if mantissa != 0.5:
        raise GridError(f"grid step {step!r} is not a power of two")
    d = 1 - exp
    if d < 0 or d > MAX_GRID_EXPONENT:
        raise GridError(
            f"grid step 2**-{d} outside supported range [1, 2**-{MAX_GRID_EXPONENT}]"
        )
    return d


@dataclass(frozen=True)
class GridValue:
    """A real value together with the dyadic grid it is claimed to lie on."""

    value: float
    grid_step: float

    def __post_init__(self) -> None:
        grid_exponent(self.grid_step)
        scaled = self.value / self.grid_step
        if abs(scaled - round(scaled)) >= 1e-12:
            raise GridError(
                f"{self.value!r} is not a multiple of grid step {self.grid_step!r}"
            )

    @property
    def quotient(self) -> int:
        return round(self.value / self.grid_step)


@dataclass(frozen=True)
class EmpiricalAverage:
    """Batch average of an integer-valued query held exactly as count / b."""

    numerator: int
    denominator: int

    def __post_init__(self) -> None:
        if self.denominator <= 0:
            raise ValueError("denominator must be a positive batch size")
        if abs(self.numerator) > self.denominator:
            raise ValueError(
                f"average {self.numerator}/{self.denominator} outside [-1, 1]"
            )

    @property
    def value(self) -> float:
        return self.numerator / self.denominator


class RoundingStrategy(Enum):
    NEAREST = "nearest"
    ADVERSARIAL_UP = "adversarial_up"
    ADVERSARIAL_DOWN = "adversarial_down"
    SEEDED_RANDOM = "seeded_random"


@dataclass(frozen=True)
class RoundingOracle:
    """Picks one valid rounding per call; a fixed strategy per instance.

    SEEDED_RANDOM draws uniformly among the valid grid points and is a
    pure function of (vector, step, seed): identical inputs always give
    identical outputs, with no hidden stream state.
    """

    strategy: RoundingStrategy = RoundingStrategy.NEAREST
    seed: int = 0


def clip1(v) -> np.ndarray:
    """Entrywise clamp to [-1, 1]."""
    return np.clip(np.asarray(v, dtype=float), -1.0, 1.0)


def round_nearest_multiple(v, step: float) -> np.ndarray:
    """Round each entry to the nearest multiple of step, ties away from zero."""
    grid_exponent(step)
    scaled = np.asarray(v, dtype=float) / step
    q = np.floor(np.abs(scaled) + 0.5) * np.sign(scaled)
    return q * step


def _candidate_quotients(scaled: np.ndarray):
    """Per entry, the lowest valid quotient and whether two are valid.

    A quotient q is valid when |q - scaled| <= 3/4.  At most two grid
    points can satisfy that, floor and ceil of the scaled value.
    """
    lo = np.floor(scaled)
    hi = lo + 1.0
    lo_ok = scaled - lo <= 0.75
    hi_ok = hi - scaled <= 0.75
    return lo, hi, lo_ok, hi_ok


def _seeded_choice_bits(scaled: np.ndarray, free: np.ndarray, d: int,
                        seed: int) -> np.ndarray:
    """One fair bit per free-band entry, hashed from (entry, step, seed).

    Bits are per entry, not per vector, so the choice for a coordinate
    does not depend on vector length or on the other coordinates.  That
    makes rounding of a sparse gradient agree exactly with rounding of
    its dense embedding (forced entries, zeros included, consume no
    randomness at all).
    """
    take_hi = np.zeros(scaled.shape, dtype=bool)
    flat_scaled = scaled.reshape(-1)
    flat_free = free.reshape(-1)
    if not flat_free.any():
        return take_hi
    prefix = (b"round-approximate"
              + seed.to_bytes(16, "little", signed=True)
              + d.to_bytes(2, "little"))
    bits = [hashlib.sha256(prefix + struct.pack("<d", val)).digest()[0] & 1
            for val in flat_scaled[flat_free]]
    out = take_hi.reshape(-1)
    out[flat_free] = np.array(bits, dtype=bool)
    return take_hi


def round_approximate(v, rho: float, oracle: RoundingOracle | None = None) -> np.ndarray:
    """Return a valid rho-approximate rounding of v chosen by the oracle.

    The output g satisfies g in rho*Z entrywise and ||g - v||_inf <= 3*rho/4.
    Entries strictly inside the band (q*rho - rho/4, q*rho + rho/4) are
    forced to q*rho; entries in [q*rho + rho/4, q*rho + 3*rho/4] may go to
    either neighbour, and the strategy decides which.
    """
    if oracle is None:
        oracle = RoundingOracle()
    d = grid_exponent(rho)
    arr = np.asarray(v, dtype=float)
    if arr.size and np.max(np.abs(arr)) > 1.0 + 1e-9:
        raise ValueError("round_approximate expects entries in [-1, 1]")
    scaled = arr / rho
    lo, hi, lo_ok, hi_ok = _candidate_quotients(scaled)
    strategy = oracle.strategy
    if strategy is RoundingStrategy.NEAREST:
        return round_nearest_multiple(arr, rho)
    if strategy is RoundingStrategy.ADVERSARIAL_UP:
        q = np.where(hi_ok, hi, lo)
    elif strategy is RoundingStrategy.ADVERSARIAL_DOWN:
        q = np.where(lo_ok, lo, hi)
    elif strategy is RoundingStrategy.SEEDED_RANDOM:
        take_hi = _seeded_choice_bits(scaled, lo_ok & hi_ok, d, oracle.seed)
        q = np.where(hi_ok & (take_hi | ~lo_ok), hi, lo)
    else:  # pragma: no cover - exhaustive enum
        raise ValueError(f"unknown rounding strategy {strategy}")
    return q * rho


def valid_rounding(g, v, rho: float) -> bool:
    """Check the approximate-rounding contract: on-grid and within 3*rho/4."""
    grid_exponent(rho)
    g_arr = np.asarray(g, dtype=float)
    v_arr = np.asarray(v, dtype=float)
    scaled = g_arr / rho
    on_grid = np.all(np.abs(scaled - np.rint(scaled)) < 1e-9)
    within = np.all(np.abs(g_arr - v_arr) <= 0.75 * rho + 1e-12 * rho)
    return bool(on_grid and within)


def recover_batch_average(v, b: int, tau: float) -> EmpiricalAverage | list[EmpiricalAverage]:
    """Recover the exact batch average from a tau-noisy response.

    Valid responses sit within tau of a multiple of 1/b, so when
    tau < 1/(2b) the nearest multiple is unique and rounding recovers the
    integer count exactly.  Raises ToleranceError otherwise.
    """
    if b <= 0:
        raise ValueError("batch size must be positive")
    if not tau < 1.0 / (2.0 * b):
        raise ToleranceError(
            f"recovery needs tau < 1/(2b); got tau={tau} with b={b}"
        )
    arr = np.asarray(v, dtype=float)
    counts = np.rint(arr * b).astype(int)
    if arr.ndim == 0:
        return EmpiricalAverage(int(counts), b)
    return [EmpiricalAverage(int(k), b) for k in counts]
