import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradlab.problems import (
    Example,
    FiniteDistribution,
    ParityPredictor,
    SQUARE_LOSS,
    TablePredictor,
    ZeroPredictor,
    clip_predictor,
    load_distribution,
    population_loss,
    prefix_probability,
    sample_batch,
    save_distribution,
)


def test_example_validation():
    ex = Example((1, 0, 1), 1)
    assert ex.n == 3
    with pytest.raises(ValueError):
        Example((0, 2), 0)
    with pytest.raises(ValueError):
        Example((0, 1), -1)


def test_joint_ordering_puts_label_first():
    ex = Example((1, 0, 1), 1)
    assert ex.joint_bits() == (1, 1, 0, 1)
    assert ex.joint_code() == 0b1101


def test_distribution_validation():
    a, b = Example((0,), 0), Example((1,), 1)
    with pytest.raises(ValueError):
        FiniteDistribution(1, [(a, 0.5), (a, 0.5)])
    with pytest.raises(ValueError):
        FiniteDistribution(1, [(a, 0.7), (b, 0.7)])
    with pytest.raises(ValueError):
        FiniteDistribution(1, [(a, 1.0), (b, 0.0)])
    with pytest.raises(ValueError):
        FiniteDistribution(2, [(a, 1.0)])


def test_point_mass_and_uniform():
    ex = Example((1, 1), 0)
    D = FiniteDistribution.point_mass(ex)
    assert D.expectation(lambda e: e.y) == 0.0
    U = FiniteDistribution.uniform_over([Example((0,), 0), Example((1,), 1)])
    assert U.expectation(lambda e: e.y) == 0.5


def test_parity_distribution():
    D = FiniteDistribution.parity(3, (1, 0, 1))
    assert len(D) == 8
    assert np.allclose(D.probs, 1 / 8)
    for ex, _ in D.entries:
        assert ex.y == (ex.x[0] ^ ex.x[2])
    assert D.expectation(lambda e: e.y) == 0.5
    Db = FiniteDistribution.parity(2, (1, 1), bias=1)
    for ex, _ in Db.entries:
        assert ex.y == (ex.x[0] ^ ex.x[1] ^ 1)


def test_random_distribution_is_seeded():
    D1 = FiniteDistribution.random(4, 10, seed=5)
    D2 = FiniteDistribution.random(4, 10, seed=5)
    D3 = FiniteDistribution.random(4, 10, seed=6)
    assert [e.joint_code() for e in D1.support] == [e.joint_code() for e in D2.support]
    assert np.array_equal(D1.probs, D2.probs)
    assert len(set(e.joint_code() for e in D1.support)) == 10
    assert D1.probs.sum() == pytest.approx(1.0, abs=1e-12)
    assert ([e.joint_code() for e in D1.support] != [e.joint_code() for e in D3.support]
            or not np.array_equal(D1.probs, D3.probs))


def test_population_loss_closed_forms():
    D = FiniteDistribution.parity(3, (1, 1, 0))
    assert population_loss(D, ZeroPredictor()) == pytest.approx(0.25)
    assert population_loss(D, ParityPredictor((1, 1, 0))) == 0.0
    assert population_loss(D, ParityPredictor((1, 1, 0), bias=1)) == pytest.approx(0.5)


def test_table_predictor():
    f = TablePredictor({(0, 1): 0.75}, default=-1.0)
    assert f((0, 1)) == 0.75
    assert f((1, 1)) == -1.0


def test_clip_predictor_is_idempotent():
    f = clip_predictor(lambda x: 3.0)
    assert f((0,)) == 1.0
    assert clip_predictor(f) is f


def test_square_loss():
    assert SQUARE_LOSS.value(0.5, 1.0) == 0.125
    assert SQUARE_LOSS.derivative(0.5, 1.0) == -0.5


def test_prefix_probability_parity_example():
    D = FiniteDistribution.parity(2, (1, 1))
    assert prefix_probability(D, "") == 1.0
    assert prefix_probability(D, "1") == pytest.approx(0.5)
    # joint z = (y, x1, x2); y=1 with x1=0 forces x=(0,1)
    assert prefix_probability(D, "10") == pytest.approx(0.25)
    assert prefix_probability(D, "101") == pytest.approx(0.25)
    assert prefix_probability(D, "100") == 0.0
    with pytest.raises(ValueError):
        prefix_probability(D, "0000")
    with pytest.raises(ValueError):
        prefix_probability(D, "02")


@settings(max_examples=60)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_prefix_probability_is_additive(seed, n):
    D = FiniteDistribution.random(n, min(6, 1 << (n + 1)), seed=seed)

    def check(s):
        total = prefix_probability(D, s)
        if len(s) <= n:
            split = prefix_probability(D, s + "0") + prefix_probability(D, s + "1")
            assert total == pytest.approx(split, abs=1e-12)
            check(s + "0")

    check("")


def test_sample_batch_deterministic():
    D = FiniteDistribution.parity(3, (1, 0, 1))
    b1 = sample_batch(D, 16, seed=42)
    b2 = sample_batch(D, 16, seed=42)
    b3 = sample_batch(D, 16, seed=43)
    assert b1.items == b2.items
    assert b1.items != b3.items
    assert len(b1) == 16


def test_sample_batch_frequencies():
    D = FiniteDistribution.uniform_over(
        [Example((0, 0), 0), Example((1, 1), 1)])
    batch = sample_batch(D, 4000, seed=7)
    frac = sum(ex.y for ex in batch.items) / 4000
    assert abs(frac - 0.5) < 0.05


def test_save_load_roundtrip(tmp_path):
    D = FiniteDistribution.random(3, 7, seed=11)
    path = tmp_path / "dist.json"
    save_distribution(D, path)
    back = load_distribution(path)
    assert back.n == D.n
    assert [e.joint_code() for e in back.support] == [e.joint_code() for e in D.support]
    assert np.array_equal(back.probs, D.probs)
