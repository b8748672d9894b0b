import math
from pathlib import Path

import numpy as np
import pytest
from scipy import special

from fracbound.eigenbasis import (
    BoxDomain,
    BumpDatum,
    IndicatorDatum,
    ModesDatum,
    ZeroDatum,
)
from fracbound.mixing import MixingMeasure
from fracbound.solver_spectral import (
    boundary_check,
    choose_truncation,
    classical_hypothesis,
    decay_check,
    field,
    initial_datum_check,
    solve,
    subordinated_value,
    time_derivative_bound,
    verify_residual,
)
from fracbound.subordinate import SubordinatorSpec, estimate_g
from fracbound.tools import CheckStatus, DomainError

PI_INTERVAL = BoxDomain.interval(math.pi)
HALF = MixingMeasure.from_scales([(0.5, 1.0)])
MODE = ModesDatum.single((1,))
BUMP = BumpDatum((math.pi / 2,), 1.0)
# E_{1/2}(-1)
H_ONE = 0.42758357615580705


def test_first_mode_solution() -> None:
    choice = choose_truncation(PI_INTERVAL, MODE, 1e-8)
    assert choice.count == 1
    assert choice.warning is None
    sol = solve(PI_INTERVAL, MODE, HALF, choice.count)
    expected = math.sqrt(2 / math.pi) * H_ONE
    assert sol(1.0, [math.pi / 2]) == pytest.approx(expected, abs=1e-9)
    assert sol(0.0, [math.pi / 2]) == pytest.approx(math.sqrt(2 / math.pi))
    assert "mittag-leffler" in repr(sol)
    assert sol.get_datum() == MODE


def test_zero_datum() -> None:
    choice = choose_truncation(PI_INTERVAL, ZeroDatum(), 1e-8)
    assert choice.tail == 0.0
    sol = solve(PI_INTERVAL, ZeroDatum(), HALF, choice.count)
    assert sol.values([0.0, 1.0], [[1.0], [2.0]]) == pytest.approx(
        np.zeros((2, 2))
    )
    assert decay_check(sol, [1.0]).passed()


def test_square_mode_solution() -> None:
    square = BoxDomain((math.pi, math.pi))
    sol = solve(square, ModesDatum.single((1, 2)), HALF, 2)
    point = [math.pi / 2, math.pi / 4]
    phi = (2 / math.pi) * math.sin(math.pi / 2) * math.sin(math.pi / 2)
    # lambda = 5, h(1, 5) = E_{1/2}(-5) = erfcx(5)
    assert sol(1.0, point) == pytest.approx(phi * special.erfcx(5), rel=1e-8)


def test_bump_solution_checks() -> None:
    sol = solve(PI_INTERVAL, BUMP, HALF, 64)
    times = [0.1, 0.5, 1.0]
    assert decay_check(sol, times).passed()
    assert initial_datum_check(sol).passed()
    assert boundary_check(sol, times).passed()
    assert time_derivative_bound(sol, 0.5, [1.0]).passed()


def test_finite_expansion_is_classical() -> None:
    datum = ModesDatum((((1,), 1.0), ((3,), -0.5)))
    sol = solve(PI_INTERVAL, datum, HALF, 3)
    assert classical_hypothesis(sol).passed()
    assert time_derivative_bound(sol, 0.2, [0.7]).passed()


def test_residual_of_mode_solution() -> None:
    sol = solve(PI_INTERVAL, MODE, HALF, 1)
    report = verify_residual(sol, 1.0, 1000, 0.5, [[1.0], [2.0]])
    assert report.passed(), report
    coarse = verify_residual(sol, 1.0, 10, 0.5, [[1.0]], 1e-12)
    assert coarse.status == CheckStatus.INCONCLUSIVE
    with pytest.raises(DomainError):
        verify_residual(sol, 1.0, 100, 0.0, [[1.0]])


def test_residual_refines() -> None:
    datum = ModesDatum((((1,), 1.0), ((2,), 0.5)))
    sol = solve(PI_INTERVAL, datum, HALF, 2)
    points = [[1.0], [2.0]]
    coarse = verify_residual(sol, 2.0, 500, 0.5, points)
    fine = verify_residual(sol, 2.0, 1000, 0.5, points)
    assert fine.values["lhs"] < coarse.values["lhs"]
    assert math.log2(coarse.values["lhs"] / fine.values["lhs"]) >= 1.2
    graded = verify_residual(sol, 2.0, 2000, 0.5, points, grading=1.5)
    assert graded.passed(), graded
    assert graded.values["dt"] == pytest.approx(2 * (1 - 0.9995**1.5))


def test_indicator_is_flagged() -> None:
    datum = IndicatorDatum((1.0,), (2.0,))
    sol = solve(PI_INTERVAL, datum, HALF, 32)
    assert not classical_hypothesis(sol).passed()
    choice = choose_truncation(PI_INTERVAL, datum, 1e-8, max_count=64)
    assert choice.count == 64
    assert choice.warning is not None


def test_field_and_csv(tmp_path: Path) -> None:
    sol = solve(PI_INTERVAL, MODE, HALF, 1)
    result = field(sol, [0.0, 1.0], [[0.0], [math.pi / 2]])
    assert result.header() == ["t", "x1", "u", "err"]
    rows = result.rows()
    assert len(rows) == 4
    assert rows[0][3] == 0.0
    assert rows[3][2] == pytest.approx(math.sqrt(2 / math.pi) * H_ONE)
    path = tmp_path / "u.csv"
    result.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,x1,u,err"
    assert float(lines[4].split(",")[2]) == rows[3][2]
    with pytest.raises(DomainError):
        field(sol, [1.0], [[4.0]])


def test_subordinated_value_matches_series() -> None:
    sol = solve(PI_INTERVAL, MODE, HALF, 1)
    estimate = estimate_g(
        SubordinatorSpec.single(0.5), 1.0, 4000, np.random.default_rng(11)
    )
    value = subordinated_value(sol, estimate, [math.pi / 2])
    assert value == pytest.approx(sol(1.0, [math.pi / 2]), abs=0.02)
