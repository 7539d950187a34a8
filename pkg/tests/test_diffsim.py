"""Tests for query programs compiled into trainable models."""
import numpy as np
import pytest

from gradlab.diffsim import (
    ClockRegionError,
    SnapBoundError,
    TrajectoryAuditor,
    TrajectoryError,
    build_single_query_model,
    central_loss_fd,
    clock_gate,
    compile_program,
    gradient_check,
    round_restriction,
    snap_responses,
    train_audited,
)
from gradlab.numerics import GridError, RoundingOracle, RoundingStrategy, clip1
from gradlab.paradigms import (
    GeneratorProgram,
    LabelRestriction,
    SQQuery,
    eval_method_error,
    parity_learner,
    run_bsgd,
)
from gradlab.problems import SQUARE_LOSS, Example, FiniteDistribution
from gradlab.reductions import ReplayOracle, build_pipeline, pac_to_bsq

RHO = 2 ** -6
EPS = 2 * RHO

ALL_STRATEGIES = [RoundingStrategy.NEAREST, RoundingStrategy.ADVERSARIAL_UP,
                  RoundingStrategy.ADVERSARIAL_DOWN,
                  RoundingStrategy.SEEDED_RANDOM]


def mixed_distribution():
    """Two-bit inputs with both labels present."""
    return FiniteDistribution(2, [
        (Example((0, 0), 0), 0.4),
        (Example((0, 1), 1), 0.3),
        (Example((1, 0), 1), 0.2),
        (Example((1, 1), 0), 0.1),
    ])


def label_mass_query():
    """Arity-1 one-query counting the labelled coordinate."""
    return SQQuery(arity=1,
                   evaluator=lambda ex: np.array([float(ex.y * ex.x[0])]),
                   restriction=LabelRestriction.ONE_QUERY, name="x0-on-ones")


def echo_program(rounds: int, finish_after: int | None = None,
                 random_bits: int = 0) -> GeneratorProgram:
    """Alternating arity-1 program; the predictor sums all responses."""

    def gen(t, bits, responses):
        if finish_after is not None and t > finish_after:
            return None
        if t % 2 == 1:
            return SQQuery(
                arity=1,
                evaluator=lambda ex: np.array([float(ex.y * ex.x[0])]),
                restriction=LabelRestriction.ONE_QUERY, name=f"one-{t}")
        return SQQuery(
            arity=1,
            evaluator=lambda ex: np.array([float((1 - ex.y) * ex.x[0])]),
            restriction=LabelRestriction.ZERO_QUERY, name=f"zero-{t}")

    def fin(bits, responses):
        total = float(sum(v[0] for v in responses))
        return lambda x: total

    return GeneratorProgram(rounds=rounds, arity=1, random_bits=random_bits,
                            query_generator=gen, final_predictor=fin,
                            alternating=True, name="echo")


class TestRoundRestriction:
    def test_odd_rounds_ask_about_ones(self):
        assert round_restriction(1) is LabelRestriction.ONE_QUERY
        assert round_restriction(3) is LabelRestriction.ONE_QUERY

    def test_even_rounds_ask_about_zeros(self):
        assert round_restriction(2) is LabelRestriction.ZERO_QUERY
        assert round_restriction(10) is LabelRestriction.ZERO_QUERY

    def test_rounds_start_at_one(self):
        with pytest.raises(ValueError):
            round_restriction(0)


class TestClockGate:
    def test_open_gate_passes_payload(self):
        value, grads = clock_gate(2 * RHO, 0.0, 5.0, RHO)
        assert value == 5.0
        assert grads == (0.0, 0.0, 1.0)

    def test_both_fired_gives_flat_zero(self):
        assert clock_gate(2 * RHO, 2 * RHO, 5.0, RHO) == (0.0, (0.0, 0.0, 0.0))

    def test_neither_fired_gives_flat_zero(self):
        assert clock_gate(0.0, 0.0, 5.0, RHO) == (0.0, (0.0, 0.0, 0.0))

    def test_region_boundaries_are_inclusive(self):
        value, grads = clock_gate(RHO, RHO / 2, -1.0, RHO)
        assert value == -1.0 and grads == (0.0, 0.0, 1.0)
        assert clock_gate(RHO / 2, RHO / 2, 3.0, RHO)[0] == 0.0

    def test_dead_zone_raises(self):
        with pytest.raises(ClockRegionError):
            clock_gate(2 * RHO, 0.75 * RHO, 5.0, RHO)
        with pytest.raises(ClockRegionError):
            clock_gate(0.75 * RHO, 0.0, 5.0, RHO)


class TestSnapResponses:
    def test_grid_points_pass_through(self):
        grid = 1 / 32
        v = np.array([0.0, grid, -3 * grid, 17 * grid])
        assert np.array_equal(snap_responses(v, grid), v)

    def test_small_drift_is_absorbed(self):
        grid = 1 / 16
        v = np.array([grid + grid / 16])
        assert np.array_equal(snap_responses(v, grid), np.array([grid]))

    def test_large_drift_raises(self):
        grid = 1 / 16
        with pytest.raises(SnapBoundError):
            snap_responses(np.array([grid + grid / 4]), grid)

    def test_custom_allowance_widens_the_band(self):
        grid = 1 / 16
        out = snap_responses(np.array([grid + grid / 4]), grid,
                             bound=grid / 2)
        assert np.array_equal(out, np.array([grid]))

    def test_grid_must_be_dyadic(self):
        with pytest.raises(GridError):
            snap_responses(np.array([0.1]), 0.3)


class TestSingleQueryModel:
    def test_point_mass_zero_query_fills_slot_and_clock(self):
        q = SQQuery(arity=1, evaluator=lambda ex: np.array([1.0 - ex.y]),
                    restriction=LabelRestriction.ZERO_QUERY,
                    name="one-minus-label")
        model = build_single_query_model(q, epsilon=EPS)
        D = FiniteDistribution.point_mass(Example((0,), 0))
        for strategy in ALL_STRATEGIES:
            out = run_bsgd(model, D, T=1, rho=RHO, b=4, seed=3,
                           rounding=RoundingOracle(strategy=strategy))
            assert np.array_equal(out.final_params, np.array([1.0, 1.0]))

    def test_raw_gradient_overshoots_the_clip_range(self):
        q = SQQuery(arity=1, evaluator=lambda ex: np.array([1.0 - ex.y]),
                    restriction=LabelRestriction.ZERO_QUERY)
        model = build_single_query_model(q, epsilon=EPS)
        g = np.asarray(model.loss_gradient(np.zeros(2), Example((0,), 0),
                                           SQUARE_LOSS))
        assert g == pytest.approx([-(1 + EPS), -(1 + EPS)])
        assert np.array_equal(clip1(g), np.array([-1.0, -1.0]))

    def test_one_query_without_positive_mass_stays_near_zero(self):
        model = build_single_query_model(label_mass_query(), epsilon=EPS)
        D = FiniteDistribution(2, [(Example((0, 0), 0), 0.5),
                                   (Example((1, 1), 0), 0.5)])
        for strategy in ALL_STRATEGIES:
            out = run_bsgd(model, D, T=1, rho=RHO, b=8, seed=5,
                           rounding=RoundingOracle(strategy=strategy))
            theta, kappa = out.final_params
            assert abs(theta) <= EPS + RHO
            assert kappa >= EPS - RHO

    def test_random_queries_land_within_epsilon_plus_rho(self):
        rng = np.random.default_rng(11)
        D = mixed_distribution()
        support = {ex.joint_code(): ex for ex, _ in D.entries}
        for trial in range(150):
            table = {ex.x: rng.uniform(-1, 1, size=2)
                     for ex, _ in D.entries}
            q = SQQuery(arity=2,
                        evaluator=lambda ex, t=table: ex.y * t[ex.x],
                        restriction=LabelRestriction.ONE_QUERY)
            model = build_single_query_model(q, epsilon=EPS)
            strategy = ALL_STRATEGIES[trial % 4]
            out = run_bsgd(model, D, T=1, rho=RHO, b=4, seed=trial,
                           rounding=RoundingOracle(strategy=strategy,
                                                   seed=trial))
            batch = [support[c] for c in out.transcript.records[0].batch_codes]
            avg = np.mean([q.evaluate(ex) for ex in batch], axis=0)
            theta = out.final_params[:2]
            kappa = out.final_params[2]
            assert np.max(np.abs(theta - avg)) <= EPS + RHO + 1e-12
            assert kappa >= EPS - RHO - 1e-12

    def test_unrestricted_query_rejected(self):
        q = SQQuery(arity=1, evaluator=lambda ex: np.array([0.0]))
        with pytest.raises(ValueError):
            build_single_query_model(q, epsilon=EPS)

    def test_finite_differences_match(self):
        model = build_single_query_model(label_mass_query(), epsilon=EPS)
        w = np.array([0.25, 0.125])
        for ex in (Example((1,), 1), Example((0,), 0)):
            summary = gradient_check(model, w, ex)
            assert summary["max_rel_err"] <= 1e-5


class TestCompileChecks:
    def test_requires_alternating_discipline(self):
        prog = echo_program(2)
        plain = GeneratorProgram(rounds=2, arity=1, random_bits=0,
                                 query_generator=prog.query_generator,
                                 final_predictor=prog.final_predictor,
                                 alternating=False)
        with pytest.raises(ValueError, match="alternating"):
            compile_program(plain, RHO)

    def test_requires_dyadic_grid(self):
        with pytest.raises(GridError):
            compile_program(echo_program(2), 0.01)

    def test_parameter_count_is_bits_plus_blocks(self):
        prog = GeneratorProgram(
            rounds=4, arity=3, random_bits=5,
            query_generator=lambda t, b, r: None,
            final_predictor=lambda b, r: (lambda x: 0.0),
            alternating=True)
        model = compile_program(prog, RHO)
        assert model.dim == 5 + (3 + 1) * 4
        assert model.random_bits == 5

    def test_wrong_parity_program_fails_during_training(self):
        def gen(t, bits, responses):
            return SQQuery(arity=1, evaluator=lambda ex: np.array([0.0]),
                           restriction=LabelRestriction.ZERO_QUERY)

        prog = GeneratorProgram(rounds=2, arity=1, random_bits=0,
                                query_generator=gen,
                                final_predictor=lambda b, r: (lambda x: 0.0),
                                alternating=True)
        model = compile_program(prog, RHO)
        with pytest.raises(TrajectoryError, match="alternating"):
            run_bsgd(model, mixed_distribution(), T=2, rho=RHO, b=4)

    def test_arity_drift_detected(self):
        def gen(t, bits, responses):
            return SQQuery(arity=2,
                           evaluator=lambda ex: np.zeros(2),
                           restriction=round_restriction(t))

        prog = GeneratorProgram(rounds=1, arity=1, random_bits=0,
                                query_generator=gen,
                                final_predictor=lambda b, r: (lambda x: 0.0),
                                alternating=True)
        model = compile_program(prog, RHO)
        with pytest.raises(TrajectoryError, match="arity"):
            run_bsgd(model, mixed_distribution(), T=1, rho=RHO, b=4)


class TestSingleRoundEquivalence:
    def test_one_round_compilation_matches_one_step_model(self):
        q = label_mass_query()
        one_step = build_single_query_model(q, epsilon=EPS)

        prog = GeneratorProgram(rounds=1, arity=1, random_bits=0,
                                query_generator=lambda t, b, r: q,
                                final_predictor=lambda b, r: (lambda x: r[0][0]),
                                alternating=True)
        compiled = compile_program(prog, RHO)
        assert compiled.dim == one_step.dim
        D = mixed_distribution()
        for seed in range(6):
            for strategy in ALL_STRATEGIES:
                oracle = RoundingOracle(strategy=strategy, seed=seed)
                a = run_bsgd(one_step, D, T=1, rho=RHO, b=4, seed=seed,
                             rounding=oracle)
                b_ = run_bsgd(compiled, D, T=1, rho=RHO, b=4, seed=seed,
                              rounding=oracle)
                assert np.array_equal(a.final_params, b_.final_params)


class TestCompiledTrajectory:
    def test_audited_run_reports_clean(self):
        prog = echo_program(4)
        model = compile_program(prog, RHO)
        out, audit = train_audited(model, prog, mixed_distribution(), b=4,
                                   rho=RHO, seed=2)
        assert audit.ok
        assert audit.active_rounds == 4 and audit.pad_rounds == 0
        assert audit.max_response_gap <= 3 * RHO
        assert audit.min_clock_after_fire >= RHO
        assert audit.max_snap_distance == 0.0
        assert audit.binding_bound == "neither (responses exactly on grid)"

    def test_final_value_is_program_predictor(self):
        prog = echo_program(4)
        model = compile_program(prog, RHO)
        out, _ = train_audited(model, prog, mixed_distribution(), b=4,
                               rho=RHO, seed=7)
        w = out.final_params
        cursorless = compile_program(prog, RHO, strict=True)
        for ex, _ in mixed_distribution().entries:
            direct = model.value(w, ex.x)
            assert out.predictor(ex.x) == direct
            assert cursorless.value(w, ex.x) == direct

    def test_strict_and_cached_modes_agree(self):
        prog = echo_program(5)
        fast = compile_program(prog, RHO, strict=False)
        slow = compile_program(prog, RHO, strict=True)
        D = mixed_distribution()
        for seed in (0, 1, 2):
            a = run_bsgd(fast, D, T=5, rho=RHO, b=4, seed=seed)
            b_ = run_bsgd(slow, D, T=5, rho=RHO, b=4, seed=seed)
            assert np.array_equal(a.final_params, b_.final_params)
            for ex, _ in D.entries:
                assert a.predictor(ex.x) == b_.predictor(ex.x)

    def test_random_bit_prefix_survives_training(self):
        prog = echo_program(4, random_bits=6)
        model = compile_program(prog, RHO)
        out = run_bsgd(model, mixed_distribution(), T=4, rho=RHO, b=4, seed=9)
        assert np.array_equal(out.final_params[:6], np.array(out.init_bits,
                                                             dtype=float))

    def test_early_finish_pads_keep_clocks_running(self):
        prog = echo_program(9, finish_after=2)
        model = compile_program(prog, RHO)
        out, audit = train_audited(model, prog, mixed_distribution(), b=4,
                                   rho=RHO, seed=4)
        assert audit.active_rounds == 2 and audit.pad_rounds == 7
        w = out.final_params
        for t in range(3, 10):
            start = (t - 1) * 2
            assert w[start] == 0.0
            assert w[start + 1] >= RHO
        assert out.predictor((1, 0)) == pytest.approx(w[0] + w[2])

    @pytest.mark.parametrize("strategy", [RoundingStrategy.ADVERSARIAL_UP,
                                          RoundingStrategy.ADVERSARIAL_DOWN,
                                          RoundingStrategy.SEEDED_RANDOM])
    def test_worst_case_rounding_keeps_promises(self, strategy):
        prog = echo_program(6, finish_after=3)
        model = compile_program(prog, RHO)
        _, audit = train_audited(model, prog, mixed_distribution(), b=4,
                                 rho=RHO, seed=1,
                                 rounding=RoundingOracle(strategy=strategy,
                                                         seed=5))
        assert audit.ok
        assert audit.max_response_gap <= 3 * RHO
        assert audit.min_clock_after_fire >= RHO

    def test_clip_census_matches_label_counts(self):
        prog = echo_program(4)
        model = compile_program(prog, RHO)
        D = mixed_distribution()
        support = {ex.joint_code(): ex for ex, _ in D.entries}
        out, audit = train_audited(model, prog, D, b=4, rho=RHO, seed=6,
                                   record=True)
        expected = 0
        for rec in out.transcript.records:
            heavy = 1 if rec.index % 2 == 1 else 0
            expected += sum(1 for c in rec.batch_codes
                            if support[c].y == heavy)
        assert audit.clip_activations == expected

    def test_dead_zone_clock_detected(self):
        prog = echo_program(2)
        model = compile_program(prog, RHO)
        out = run_bsgd(model, mixed_distribution(), T=2, rho=RHO, b=4, seed=0)
        w = out.final_params.copy()
        w[1] = 0.75 * RHO
        with pytest.raises(ClockRegionError):
            model.value(w, (0, 0))

    def test_out_of_order_clocks_detected(self):
        prog = echo_program(3)
        for strict in (False, True):
            model = compile_program(prog, RHO, strict=strict)
            w = np.zeros(model.dim)
            w[3] = 2 * RHO  # second clock fired, first still cold
            with pytest.raises(TrajectoryError):
                model.value(w, (0, 0))


class TestGradientCheck:
    def test_every_iterate_passes_finite_differences(self):
        prog = echo_program(4)
        model = compile_program(prog, RHO)
        iterates = []
        run_bsgd(model, mixed_distribution(), T=4, rho=RHO, b=4, seed=8,
                 hook=lambda info: iterates.append(info.w.copy()))
        assert len(iterates) == 4
        probes = [Example((1, 0), 1), Example((0, 1), 0)]
        for w in [np.zeros(model.dim)] + iterates:
            for ex in probes:
                summary = gradient_check(model, w, ex)
                assert summary["max_rel_err"] <= 1e-5
                assert summary["max_zero_fd"] <= 1e-7

    def test_finished_model_is_flat_everywhere(self):
        prog = echo_program(3)
        model = compile_program(prog, RHO)
        out = run_bsgd(model, mixed_distribution(), T=3, rho=RHO, b=4, seed=3)
        g = model.loss_gradient(out.final_params, Example((1, 1), 1),
                                SQUARE_LOSS)
        assert g == {}
        summary = gradient_check(model, out.final_params, Example((1, 1), 1))
        assert summary["max_zero_fd"] <= 1e-7

    def test_one_sided_fallback_at_region_edge(self):
        prog = echo_program(2)
        model = compile_program(prog, RHO)
        out = run_bsgd(model, mixed_distribution(), T=2, rho=RHO, b=4, seed=0)
        w = out.final_params.copy()
        w[1] = RHO  # lowest firing value: a downward probe enters the gap
        fd = central_loss_fd(model, w, Example((1, 0), 1), coord=1)
        assert fd == 0.0


class TestPipelineIntegration:
    def test_full_scale_wiring(self):
        method, report = build_pipeline(
            ["pac_to_bsq", "bsq_alternating", "diffsim"], payload="parity",
            n=6, m=12, b=4, rho=1 / 64, delta=0.1)
        assert method.T == 33600
        assert method.rho == 1 / 64 and method.b == 4
        assert method.model.dim == method.model.random_bits + 8 * 33600
        assert report.derived["delta_per_stage"] == 0.05

    def test_compiled_training_replays_like_direct_queries(self):
        rho = 1 / 64
        tau = 4 * rho
        D = FiniteDistribution(2, [
            (Example((0, 0), 0), 0.25),
            (Example((0, 1), 1), 0.25),
            (Example((1, 0), 1), 0.25),
            (Example((1, 1), 0), 0.25),
        ])
        pac = parity_learner(2, m=3)
        bsq = pac_to_bsq(pac, b=4, tau=tau, delta=0.05, n=2,
                         alternating=True)
        model = compile_program(bsq.program, rho, strict=False)
        out, audit = train_audited(model, bsq.program, D, b=4, rho=rho,
                                   seed=12, record=True)
        assert audit.ok

        codes = [rec.batch_codes for rec in out.transcript.records]
        replay = ReplayOracle(D, codes, tau=tau)
        run = bsq.program.start(out.init_bits)
        while True:
            q = run.next_query()
            if q is None:
                break
            run.receive(replay.ask(q))
        direct = run.predictor()
        for ex, _ in D.entries:
            assert out.predictor(ex.x) == direct(ex.x)

    def test_error_estimate_forwards_audit_hook(self):
        rho = 1 / 64
        D = FiniteDistribution(2, [
            (Example((0, 0), 0), 0.25),
            (Example((0, 1), 1), 0.25),
            (Example((1, 0), 1), 0.25),
            (Example((1, 1), 0), 0.25),
        ])
        pac = parity_learner(2, m=3)
        bsq = pac_to_bsq(pac, b=4, tau=4 * rho, delta=0.05, n=2,
                         alternating=True)
        method, _ = build_pipeline(
            ["pac_to_bsq", "bsq_alternating", "diffsim"], payload="parity",
            n=2, m=3, b=4, rho=rho, delta=0.1)
        auditor = TrajectoryAuditor(bsq.program, rho)
        estimate = eval_method_error(method, D, trials=2, seed=21,
                                     hook=auditor.hook)
        audit = auditor.check()
        assert audit.trials == 2
        assert 0.0 <= estimate.mean <= 1.0
