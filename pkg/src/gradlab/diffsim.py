"""Query programs compiled into models that answer them by training.

A program that alternates one-label and zero-label batch queries can be
baked into a single differentiable model whose plain minibatch SGD
trajectory executes it.  Each descent step answers one query: the
(clipped, rounded) batch gradient writes the query's batch average into
a reserved parameter block, while a chain of clock parameters advances
so the next step poses the next query.  Once every round has run, the
model's output switches to the program's final predictor.

The model is exactly gated: inactive rounds sit inside a clock gate
whose value and partial derivatives all vanish, so one descent step
touches one parameter block and everything else is provably frozen.
Query generators consume parameter blocks only after snapping them to
the response grid, and declare zero gradient with respect to those
inputs; tiny probes (finite differences) therefore cannot change which
query is generated.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import RoundingOracle, grid_exponent, round_nearest_multiple
from .paradigms import (
    BSGDRoundInfo,
    DiffModel,
    LabelRestriction,
    MethodRun,
    QueryProgram,
    SQQuery,
    run_bsgd,
)
from .problems import SQUARE_LOSS, Example, FiniteDistribution, SquareLoss

__all__ = [
    "ClockRegionError",
    "SnapBoundError",
    "TrajectoryAudit",
    "TrajectoryAuditor",
    "TrajectoryError",
    "build_single_query_model",
    "central_loss_fd",
    "clock_gate",
    "compile_program",
    "gradient_check",
    "round_restriction",
    "snap_responses",
    "train_audited",
]


class ClockRegionError(RuntimeError):
    """A clock coordinate landed in the dead zone between its regions."""


class SnapBoundError(RuntimeError):
    """A response drifted further from the grid than the construction allows."""


class TrajectoryError(RuntimeError):
    """A training trajectory broke one of the compiled-model guarantees."""


def round_restriction(t: int) -> LabelRestriction:
    """Label restriction required of the round-t query: odd rounds on 1."""
    if t < 1:
        raise ValueError("rounds are numbered from 1")
    return (LabelRestriction.ONE_QUERY if t % 2 == 1
            else LabelRestriction.ZERO_QUERY)


def clock_gate(a1: float, a2: float, a3: float,
               rho: float) -> tuple[float, tuple[float, float, float]]:
    """Three-region gate passing a3 through exactly between two clock ticks.

    Active when the previous clock has fired (a1 >= rho) and this one
    has not (a2 <= rho/2): value a3, partials (0, 0, 1).  Zero with all
    partials zero when both clocks agree.  The gap between rho/2 and
    rho is never visited by a valid trajectory and raises.
    """
    half = rho / 2.0
    if a1 >= rho and a2 <= half:
        return float(a3), (0.0, 0.0, 1.0)
    if a1 >= rho and a2 >= rho:
        return 0.0, (0.0, 0.0, 0.0)
    if a1 <= half and a2 <= half:
        return 0.0, (0.0, 0.0, 0.0)
    raise ClockRegionError(
        f"clock pair ({a1}, {a2}) falls in the dead zone of width {half}")


def snap_responses(v, grid: float, bound: float | None = None) -> np.ndarray:
    """Snap a response vector onto its grid, policing the drift allowance.

    Valid trajectories keep recorded responses exactly on the grid, so
    any drift beyond `bound` (grid/8 unless overridden) indicates a
    construction bug rather than numerical noise, and raises.
    """
    grid_exponent(grid)
    arr = np.asarray(v, dtype=float)
    snapped = round_nearest_multiple(arr, grid)
    if arr.size:
        dist = float(np.max(np.abs(arr - snapped)))
        limit = grid / 8.0 if bound is None else float(bound)
        if dist > limit + 1e-12:
            raise SnapBoundError(
                f"response sits {dist:.3g} from the {grid} grid, "
                f"allowance {limit:.3g}")
    return snapped


def _forced_label(restriction: LabelRestriction) -> int:
    if restriction is LabelRestriction.ONE_QUERY:
        return 1
    if restriction is LabelRestriction.ZERO_QUERY:
        return 0
    raise ValueError("query must carry a one-label restriction")


def build_single_query_model(query: SQQuery,
                             restriction: LabelRestriction | None = None,
                             epsilon: float = 2 ** -5) -> DiffModel:
    """One-step model whose single descent step answers one batch query.

    Parameters are (theta, kappa) = (query slot, clock), both starting
    at 0.  One step of precision-rho SGD with unit rate yields theta
    within epsilon + rho of the batch average of the query and kappa at
    least epsilon - rho, for any batch and any valid rounding.
    """
    if restriction is None:
        restriction = query.restriction
    label = _forced_label(restriction)
    if epsilon <= 0:
        raise ValueError("need epsilon > 0")
    one = label == 1
    p = query.arity
    sign = 1.0 if one else -1.0

    def features(x) -> np.ndarray:
        return query.evaluate(Example(x, label))

    def value(w: np.ndarray, x) -> float:
        inner = float(features(x) @ w[:p])
        if one:
            return inner + float(w[p]) - epsilon
        return 1.0 - inner - float(w[p]) + epsilon

    def gradient(w: np.ndarray, ex: Example, loss: SquareLoss) -> np.ndarray:
        feats = features(ex.x)
        inner = float(feats @ w[:p])
        f = inner + float(w[p]) - epsilon if one \
            else 1.0 - inner - float(w[p]) + epsilon
        lp = loss.derivative(f, float(ex.y))
        g = np.empty(p + 1)
        g[:p] = lp * sign * feats
        g[p] = lp * sign
        return g

    return DiffModel(dim=p + 1, random_bits=0,
                     init=lambda bits: np.zeros(p + 1),
                     value=value, loss_gradient=gradient,
                     name=f"one-step[{query.name or 'query'}]")


# ---------------------------------------------------------------------------
# compiled multi-round models


@dataclass(frozen=True)
class _Layout:
    """Parameter map: [bit block r][round blocks: p query slots + 1 clock]."""

    r: int
    p: int
    T: int

    @property
    def dim(self) -> int:
        return self.r + (self.p + 1) * self.T

    def start(self, t: int) -> int:
        return self.r + (self.p + 1) * (t - 1)

    def theta(self, w: np.ndarray, t: int) -> np.ndarray:
        s = self.start(t)
        return w[s:s + self.p]

    def kappa_index(self, t: int) -> int:
        return self.start(t) + self.p


class _ProgramCursor:
    """Forward-only replay of a program run fed snapped responses.

    Wraps the single mutable run a compiled model consults; everything
    it is fed is deterministic, so restarting from the same bits and
    responses always reproduces the same queries and predictor.
    """

    def __init__(self, prog: QueryProgram, bits: tuple[int, ...]):
        self.prog = prog
        self.bits = tuple(bits)
        self.run = prog.start(self.bits)
        self.fed = 0
        self.finished = False
        self.pending: SQQuery | None = None
        self.fetched = False
        self.last_response: tuple[float, ...] | None = None
        self._predictor = None

    def query(self, t: int) -> SQQuery | None:
        """Round-t query, or None once the program has finished early."""
        if t != self.fed + 1:
            raise TrajectoryError(
                f"cursor at round {self.fed + 1} asked for round {t}")
        if not self.fetched:
            if not self.finished:
                q = self.run.next_query()
                if q is None:
                    self.finished = True
                else:
                    want = round_restriction(t)
                    if q.restriction is not want:
                        raise TrajectoryError(
                            f"round {t} emitted a {q.restriction.value} "
                            f"query; the alternating discipline needs "
                            f"{want.value}")
                    if q.arity != self.prog.arity:
                        raise TrajectoryError(
                            f"round {t} query arity {q.arity} != "
                            f"{self.prog.arity}")
                    self.pending = q
            self.fetched = True
        return self.pending

    def feed(self, t: int, response: np.ndarray) -> None:
        q = self.query(t)
        if q is not None:
            self.run.receive(np.asarray(response, dtype=float))
            self._predictor = None
            self.last_response = tuple(float(x) for x in response)
        self.fed += 1
        self.pending = None
        self.fetched = False

    def predictor(self):
        if self._predictor is None:
            self._predictor = self.run.predictor()
        return self._predictor


class _CompiledCore:
    """Shared state and arithmetic behind a compiled model's callables."""

    HI = 1
    LO = 0

    def __init__(self, prog: QueryProgram, rho: float, strict: bool):
        self.prog = prog
        self.rho = float(rho)
        self.eps = 2.0 * self.rho
        self.strict = strict
        self.layout = _Layout(r=prog.random_bits, p=prog.arity,
                              T=prog.rounds)
        self._cursor: _ProgramCursor | None = None
        self._hint = 1
        self._finished_at: int | None = None

    # -- clock bookkeeping

    def _class(self, v: float) -> int:
        if v >= self.rho:
            return self.HI
        if v <= self.rho / 2.0:
            return self.LO
        raise ClockRegionError(
            f"clock value {v} in the dead zone ({self.rho / 2}, {self.rho})")

    def _kappa(self, w: np.ndarray, t: int) -> float:
        if t == 0:
            return 1.0
        if t == self.layout.T + 1:
            return 0.0
        return float(w[self.layout.kappa_index(t)])

    def active_round(self, w: np.ndarray) -> int:
        """Unique round whose gate is open; T+1 means training is done."""
        lay = self.layout
        T = lay.T
        if self.strict:
            return self._active_strict(w)
        rho = self.rho
        half = 0.5 * rho
        stride = lay.p + 1
        i = self._hint
        if i < 1 or i > T + 1:
            i = 1
        restarted = False
        while True:
            prev = 1.0 if i == 1 else w[lay.r + stride * (i - 1) - 1]
            here = 0.0 if i == T + 1 else w[lay.r + stride * i - 1]
            if prev >= rho:
                if here <= half:
                    if i < T and w[lay.r + stride * (i + 1) - 1] > half:
                        # cheap sanity: the next clock must still be cold
                        if w[lay.r + stride * (i + 1) - 1] < rho:
                            raise ClockRegionError(
                                f"clock value {w[lay.r + stride * (i + 1) - 1]}"
                                f" in the dead zone ({half}, {rho})")
                        raise TrajectoryError(
                            f"clock {i + 1} fired before clock {i}")
                    self._hint = i
                    return i
                if here >= rho:
                    i += 1
                    continue
                raise ClockRegionError(
                    f"clock value {here} in the dead zone ({half}, {rho})")
            if prev > half:
                raise ClockRegionError(
                    f"clock value {prev} in the dead zone ({half}, {rho})")
            if restarted:
                raise TrajectoryError("no active round: clocks out of order")
            i, restarted = 1, True

    def _active_strict(self, w: np.ndarray) -> int:
        T = self.layout.T
        active = []
        for t in range(1, T + 2):
            c_prev = self._class(self._kappa(w, t - 1))
            c_here = self._class(self._kappa(w, t))
            if c_prev == self.HI and c_here == self.LO:
                active.append(t)
            elif c_prev == self.LO and c_here == self.HI:
                raise TrajectoryError(f"clock {t} fired before clock {t - 1}")
        if len(active) != 1:
            raise TrajectoryError(f"expected one active round, got {active}")
        return active[0]

    # -- program replay

    def bits_of(self, w: np.ndarray) -> tuple[int, ...]:
        return tuple(int(round(v)) for v in w[:self.layout.r])

    def invalidate(self) -> None:
        self._cursor = None
        self._hint = 1
        self._finished_at = None

    def _snapped_block(self, w: np.ndarray, t: int) -> np.ndarray:
        blk = self.layout.theta(w, t)
        if not blk.any():
            # untouched blocks (pads and not-yet-active rounds) skip the snap
            return np.zeros(self.layout.p)
        return snap_responses(blk, self.rho)

    def _cursor_for(self, w: np.ndarray, upto: int) -> _ProgramCursor:
        cur = self._cursor
        if self.strict or cur is None or cur.fed > upto:
            cur = _ProgramCursor(self.prog, self.bits_of(w))
            if not self.strict:
                self._cursor = cur
        while cur.fed < upto:
            t = cur.fed + 1
            cur.feed(t, self._snapped_block(w, t))
        return cur

    def query_for(self, w: np.ndarray, t: int) -> SQQuery | None:
        q = self._cursor_for(w, t - 1).query(t)
        if q is None and not self.strict and self._finished_at is None:
            self._finished_at = t
        return q

    def final_predictor(self, w: np.ndarray):
        return self._cursor_for(w, self.layout.T).predictor()

    # -- model callables

    def init(self, bits: tuple[int, ...]) -> np.ndarray:
        lay = self.layout
        if len(bits) != lay.r:
            raise ValueError(f"need {lay.r} bits, got {len(bits)}")
        self.invalidate()
        w = np.zeros(lay.dim)
        w[:lay.r] = bits
        return w

    def value(self, w: np.ndarray, x) -> float:
        i = self.active_round(w)
        lay = self.layout
        if i == lay.T + 1:
            return float(self.final_predictor(w)(x))
        fin = self._finished_at
        if fin is not None and i >= fin:
            q = None
        else:
            q = self.query_for(w, i)
        kap = float(w[lay.kappa_index(i)])
        odd = i % 2 == 1
        inner = 0.0
        if q is not None:
            feats = q.evaluate(Example(x, 1 if odd else 0))
            inner = float(feats @ lay.theta(w, i))
        if odd:
            return inner + kap - self.eps
        return 1.0 - inner - kap + self.eps

    def gradient(self, w: np.ndarray, ex: Example,
                 loss: SquareLoss) -> dict[int, float]:
        i = self.active_round(w)
        lay = self.layout
        if i == lay.T + 1:
            return {}
        kidx = lay.r + (lay.p + 1) * i - 1
        kap = float(w[kidx])
        fin = self._finished_at
        if fin is not None and i >= fin:
            # past the program's early finish: pure clock-advancing pad
            if i % 2 == 1:
                return {kidx: loss.derivative(kap - self.eps, float(ex.y))}
            return {kidx: -loss.derivative(1.0 - kap + self.eps,
                                           float(ex.y))}
        q = self.query_for(w, i)
        odd = i % 2 == 1
        sign = 1.0 if odd else -1.0
        if q is None:
            f = kap - self.eps if odd else 1.0 - kap + self.eps
            lp = loss.derivative(f, float(ex.y))
            return {kidx: lp * sign}
        feats = q.evaluate(Example(ex.x, 1 if odd else 0))
        inner = float(feats @ lay.theta(w, i))
        f = inner + kap - self.eps if odd else 1.0 - inner - kap + self.eps
        lp = loss.derivative(f, float(ex.y))
        base = lay.start(i)
        g = {base + j: lp * sign * float(v)
             for j, v in enumerate(feats) if v != 0.0}
        g[kidx] = lp * sign
        return g


def compile_program(prog: QueryProgram, rho: float,
                    strict: bool | None = None) -> DiffModel:
    """Bake an alternating query program into a trainable model.

    Running precision-rho minibatch SGD with unit rate for `prog.rounds`
    steps executes the program: step t answers its round-t query with a
    validity-grade response (within 3*rho of the batch average), and the
    trained model computes the program's final predictor.  Parameter
    count is r + (arity+1)*rounds.

    Strict mode recomputes everything from the parameter vector on each
    call, making the model a pure function; it is the default up to 64
    rounds.  Above that the model reuses a forward-only replay of the
    program, which assumes callers only move along a training
    trajectory (descent plus small probes of the current iterate).
    """
    grid_exponent(rho)
    if not getattr(prog, "alternating", False):
        raise ValueError("compilation needs a program marked alternating; "
                         "route others through the label-splitting transform")
    if strict is None:
        strict = prog.rounds <= 64
    core = _CompiledCore(prog, rho, strict)
    return DiffModel(
        dim=core.layout.dim,
        random_bits=core.layout.r,
        init=core.init,
        value=core.value,
        loss_gradient=core.gradient,
        name=f"compiled[{getattr(prog, 'name', '') or 'program'}]",
    )


# ---------------------------------------------------------------------------
# trajectory auditing


@dataclass
class TrajectoryAudit:
    """Aggregate evidence that training executed the program faithfully."""

    rho: float
    rounds: int = 0
    trials: int = 0
    active_rounds: int = 0
    pad_rounds: int = 0
    max_response_gap: float = 0.0
    min_clock_after_fire: float = math.inf
    max_snap_distance: float = 0.0
    clip_activations: int = 0
    violations: list[str] = field(default_factory=list)

    @property
    def tight_snap_bound(self) -> float:
        """Enforced drift allowance: an eighth of the response grid."""
        return self.rho / 8.0

    @property
    def loose_snap_bound(self) -> float:
        """Weaker allowance from the grid's own quarter-step agreement."""
        return self.rho / 4.0

    @property
    def binding_bound(self) -> str:
        if self.max_snap_distance > self.tight_snap_bound:
            return "tight bound exceeded"
        if self.max_snap_distance > 0:
            return "tight"
        return "neither (responses exactly on grid)"

    @property
    def ok(self) -> bool:
        return not self.violations


class TrajectoryAuditor:
    """Replays the program alongside training and checks every claim.

    Per round, with the update already applied: the sparse response may
    touch only the active block (everything else stays frozen at its
    initial or recorded value by induction); the active query slots
    must sit within 3*rho of the true batch average of the round's
    query; the active clock must have fired to at least rho; recorded
    responses must lie on the response grid.  The final round triggers
    a full parameter sweep against per-round block snapshots.
    """

    def __init__(self, prog: QueryProgram, rho: float):
        self.prog = prog
        self.rho = float(rho)
        self.eps = 2.0 * self.rho
        self.layout = _Layout(r=prog.random_bits, p=prog.arity,
                              T=prog.rounds)
        self.audit = TrajectoryAudit(rho=self.rho)
        self._cursor: _ProgramCursor | None = None
        self._blocks: dict[int, tuple[np.ndarray, float] | None] = {}
        self._bits: tuple[float, ...] | None = None
        self._finished = False

    def _flag(self, message: str) -> None:
        self.audit.violations.append(message)

    def hook(self, info: BSGDRoundInfo) -> None:
        lay = self.layout
        i = info.index
        w = info.w
        if i == 1:
            self._bits = tuple(float(v) for v in w[:lay.r])
            self._cursor = _ProgramCursor(
                self.prog, tuple(int(round(v)) for v in self._bits))
            self._blocks = {}
            self._finished = False
            self.audit.trials += 1
        self.audit.rounds += 1
        base = lay.start(i)
        top = base + lay.p
        response = info.response
        if not isinstance(response, dict):
            response = {j: float(v) for j, v in enumerate(response)}
        for idx, v in response.items():
            if v != 0.0 and not base <= idx <= top:
                self._flag(f"round {i} wrote parameter {idx} outside its "
                           f"block [{base}, {top}]")
        theta = w[base:top]
        kappa = float(w[top])
        query = None
        if not self._finished:
            try:
                query = self._cursor.query(i)
            except TrajectoryError as err:
                self._flag(str(err))
                return
            if query is None:
                self._finished = True
        touched = bool(theta.any())
        if query is None:
            self.audit.pad_rounds += 1
            gap = float(np.max(np.abs(theta))) if touched else 0.0
        else:
            self.audit.active_rounds += 1
            vals = [query.evaluate(ex) for ex in info.batch]
            avg = np.mean(vals, axis=0) if vals else np.zeros(lay.p)
            gap = float(np.max(np.abs(theta - avg))) if lay.p else 0.0
        self.audit.max_response_gap = max(self.audit.max_response_gap, gap)
        if gap > 3.0 * self.rho + 1e-12:
            self._flag(f"round {i} response sits {gap:.3g} from the batch "
                       f"average, above 3*rho = {3 * self.rho}")
        if kappa < self.audit.min_clock_after_fire:
            self.audit.min_clock_after_fire = kappa
        if kappa < self.rho:
            self._flag(f"round {i} clock reached only {kappa}, below rho")
        if touched:
            snapped = round_nearest_multiple(theta, self.rho)
            drift = float(np.max(np.abs(theta - snapped))) if lay.p else 0.0
            if drift > self.audit.max_snap_distance:
                self.audit.max_snap_distance = drift
            self._blocks[i] = (theta.copy(), kappa)
        else:
            snapped = None
            self._blocks[i] = (None, kappa)
        # pre-update output is constant in x, so the per-example loss slope
        # hits 1 + eps exactly on the off-label examples of the round
        heavy_label = 0 if i % 2 == 0 else 1
        self.audit.clip_activations += sum(
            1 for ex in info.batch if ex.y == heavy_label)
        if query is not None:
            self._cursor.feed(
                i, snapped if snapped is not None else np.zeros(lay.p))
        if i == lay.T:
            self._final_sweep(w)

    def _final_sweep(self, w: np.ndarray) -> None:
        lay = self.layout
        expect = np.zeros(lay.dim)
        expect[:lay.r] = self._bits
        for t, (theta, kappa) in self._blocks.items():
            if theta is not None:
                s = lay.start(t)
                expect[s:s + lay.p] = theta
            expect[lay.kappa_index(t)] = kappa
        mismatch = np.flatnonzero(np.abs(w - expect) > 1e-12)
        for idx in mismatch[:8]:
            self._flag(f"parameter {int(idx)} ended at {w[idx]!r}, expected "
                       f"{expect[idx]!r}: some round touched a frozen block")

    def check(self) -> TrajectoryAudit:
        if self.audit.violations:
            raise TrajectoryError(
                "trajectory claims failed:\n  "
                + "\n  ".join(self.audit.violations[:12]))
        return self.audit


def train_audited(model: DiffModel, prog: QueryProgram,
                  D: FiniteDistribution, b: int, *, rho: float,
                  gamma: float = 1.0, seed: int = 0,
                  rounding: RoundingOracle | None = None,
                  record: bool = False) -> tuple[MethodRun, TrajectoryAudit]:
    """Run the compiled model's full training loop under the auditor."""
    auditor = TrajectoryAuditor(prog, rho)
    out = run_bsgd(model, D, prog.rounds, rho, b, gamma, rounding, seed,
                   record=record, hook=auditor.hook)
    return out, auditor.check()


# ---------------------------------------------------------------------------
# gradient verification


def central_loss_fd(model: DiffModel, w: np.ndarray, ex: Example, coord: int,
                    h: float = 1e-6,
                    loss: SquareLoss = SQUARE_LOSS) -> float:
    """Symmetric finite difference of the per-example loss along one axis.

    Falls back to a one-sided difference when a probe direction lands in
    a clock dead zone (possible only off-trajectory).
    """

    def at(delta: float) -> float:
        probe = w.copy()
        probe[coord] += delta
        return loss.value(model.value(probe, ex.x), float(ex.y))

    try:
        return (at(h) - at(-h)) / (2.0 * h)
    except ClockRegionError:
        center = loss.value(model.value(w, ex.x), float(ex.y))
        try:
            return (at(h) - center) / h
        except ClockRegionError:
            return (center - at(-h)) / h


def gradient_check(model: DiffModel, w: np.ndarray, ex: Example,
                   coords=None, h: float = 1e-6, rtol: float = 1e-5,
                   zero_tol: float = 1e-7,
                   loss: SquareLoss = SQUARE_LOSS) -> dict:
    """Compare analytic per-example gradients against finite differences.

    Coordinates the model reports (nonzero analytic value) must match
    within relative tolerance; coordinates it omits or reports as zero
    must show a finite difference no larger than `zero_tol`.  Returns a
    summary dict; raises AssertionError on the first failure.
    """
    g = model.loss_gradient(w, ex, loss)
    if isinstance(g, dict):
        dense = {int(k): float(v) for k, v in g.items()}
    else:
        dense = {j: float(v) for j, v in enumerate(np.asarray(g))
                 if v != 0.0}
    if coords is None:
        coords = range(model.dim)
    worst_rel = 0.0
    worst_zero = 0.0
    checked = 0
    for j in coords:
        fd = central_loss_fd(model, w, ex, j, h, loss)
        analytic = dense.get(j, 0.0)
        checked += 1
        if analytic != 0.0:
            rel = abs(fd - analytic) / max(abs(analytic), 1e-12)
            worst_rel = max(worst_rel, rel)
            assert rel <= rtol, (
                f"coordinate {j}: analytic {analytic}, fd {fd}, "
                f"relative error {rel:.3g}")
        else:
            worst_zero = max(worst_zero, abs(fd))
            assert abs(fd) <= zero_tol, (
                f"coordinate {j} asserted zero but fd = {fd:.3g}")
    return {"checked": checked, "max_rel_err": worst_rel,
            "max_zero_fd": worst_zero}
