import math

import numpy as np
import pytest

from fracbound.eigenbasis import (
    BoxDomain,
    ConstantDatum,
    ModesDatum,
    ZeroDatum,
)
from fracbound.hkernel import mittag_leffler
from fracbound.mixing import DensityComponent, MixingMeasure
from fracbound.solver_mc import (
    KilledPathSample,
    bridge_survival,
    check_commutation,
    ctrw_check,
    estimate_many,
    estimate_u,
)
from fracbound.solver_spectral import solve
from fracbound.subordinate import SubordinatorSpec
from fracbound.tools import CheckStatus, DomainError, UnsupportedCaseError
from fracbound.workers import RandomStreams, WorkerPool

PI_INTERVAL = BoxDomain.interval(math.pi)
HALF = SubordinatorSpec.single(0.5)
MODE = ModesDatum.single((1,))
CENTER = [math.pi / 2]


def exact_mode(t: float) -> float:
    return math.sqrt(2 / math.pi) * mittag_leffler(0.5, -math.sqrt(t))


def test_killed_path_sample() -> None:
    rng = np.random.default_rng(3)
    sample = KilledPathSample.simulate(PI_INTERVAL, CENTER, 100.0, 1e-2, rng)
    assert sample.exited
    assert sample.exit_time is not None and sample.exit_time > 0
    index = int(round(sample.exit_time / 1e-2))
    assert not PI_INTERVAL.contains(sample.positions[index])[0]
    assert np.all(PI_INTERVAL.contains(sample.positions[:index]))
    short = KilledPathSample.simulate(PI_INTERVAL, CENTER, 1e-6, 1e-6, rng)
    assert not short.exited
    assert short.positions.shape == (2, 1)
    with pytest.raises(DomainError):
        KilledPathSample.simulate(PI_INTERVAL, [0.0], 1.0, 1e-2, rng)


def test_bridge_survival() -> None:
    dom = BoxDomain((1.0, 1.0))
    before = np.array([[0.5, 0.5], [0.0, 0.5], [0.01, 0.5]])
    after = np.array([[0.5, 0.5], [0.1, 0.5], [0.01, 0.5]])
    survival = bridge_survival(dom, before, after, np.full(3, 1e-4))
    assert survival[0] == pytest.approx(1.0)
    assert survival[1] == 0.0
    assert survival[2] == pytest.approx(1 - math.exp(-1.0), rel=1e-9)


@pytest.mark.slow
def test_mc_matches_mode_solution() -> None:
    estimates = estimate_many(
        PI_INTERVAL,
        MODE,
        HALF,
        [0.25, 1.0],
        CENTER,
        4000,
        RandomStreams(17),
        dtau=1e-3,
        sub_step=1e-3,
        bridge=True,
    )
    for estimate in estimates:
        exact = exact_mode(estimate.t)
        assert abs(estimate.mean - exact) < 4 * estimate.se + 0.01
        assert estimate.paths == 4000
        assert estimate.bridge


def test_mc_is_reproducible_across_workers() -> None:
    arguments = (PI_INTERVAL, ConstantDatum(1.0), HALF, 0.2, CENTER, 1500)
    inline = estimate_u(*arguments, RandomStreams(5), dtau=1e-2)
    with WorkerPool(2) as pool:
        parallel = estimate_u(*arguments, RandomStreams(5), 1e-2, pool=pool)
    assert parallel.mean == inline.mean
    assert parallel.se == inline.se
    other = estimate_u(*arguments, RandomStreams(6), dtau=1e-2)
    assert other.mean != inline.mean
    assert 0 < inline.mean < 1


def test_mc_rejects_invalid_inputs() -> None:
    streams = RandomStreams(1)
    with pytest.raises(DomainError):
        estimate_u(PI_INTERVAL, MODE, HALF, 1.0, [math.pi], 100, streams)
    with pytest.raises(DomainError):
        estimate_u(PI_INTERVAL, MODE, HALF, 0.0, CENTER, 100, streams)
    with pytest.raises(DomainError):
        estimate_u(PI_INTERVAL, MODE, HALF, 1.0, CENTER, 1, streams)


@pytest.mark.slow
def test_commutation() -> None:
    report = check_commutation(
        PI_INTERVAL, HALF, 1.0, CENTER, 4000, RandomStreams(9)
    )
    assert report.status == CheckStatus.PASSED, report
    rates = [report.values[f"rate_{level}"] for level in (1, 2, 3)]
    assert rates == sorted(rates, reverse=True)
    assert rates[0] > rates[-1]
    assert rates[-1] < 0.02
    assert report.values["decay"] > 0
    assert report.values["scale"] == pytest.approx(1e-6)
    assert 0 <= report.values["exit_rate"] <= 1


def test_commutation_on_coarse_and_fine_grids() -> None:
    coarse = check_commutation(
        PI_INTERVAL,
        HALF,
        1.0,
        CENTER,
        500,
        RandomStreams(9),
        levels=(-14, -16, -15),
    )
    assert coarse.status == CheckStatus.FAILED, coarse
    assert coarse.values["lhs"] >= 0.02
    rates = [coarse.values[f"rate_{level}"] for level in (-16, -15, -14)]
    assert rates == sorted(rates, reverse=True)
    assert "-16: " in repr(coarse)
    assert "bits per level" in repr(coarse)
    fine = check_commutation(
        PI_INTERVAL,
        HALF,
        1.0,
        CENTER,
        500,
        RandomStreams(9),
        levels=(20, 21, 22),
    )
    assert fine.status == CheckStatus.INCONCLUSIVE
    assert fine.values["lhs"] == 0.0
    assert "decay" not in fine.values
    with pytest.raises(DomainError):
        check_commutation(
            PI_INTERVAL, HALF, 1.0, CENTER, 10, RandomStreams(9), levels=()
        )


def test_ctrw_check() -> None:
    m = MixingMeasure.from_scales([(0.5, 1.0)])
    report = ctrw_check(
        PI_INTERVAL,
        MODE,
        m,
        0.2,
        CENTER,
        1000,
        100.0,
        RandomStreams(4),
        paths=1000,
        dtau=1e-2,
    )
    assert report.status in (CheckStatus.PASSED, CheckStatus.FAILED)
    assert abs(report.values["ctrw_mean"]) <= math.sqrt(2 / math.pi)
    assert report.values["ctrw_se"] > 0
    assert report.values["scale"] == 100.0
    density = MixingMeasure(density=DensityComponent.constant(0.2, 0.8, 1.0))
    streams = RandomStreams(4)
    with pytest.raises(UnsupportedCaseError):
        ctrw_check(PI_INTERVAL, MODE, density, 0.2, CENTER, 100, 10.0, streams)
    with pytest.raises(DomainError):
        ctrw_check(PI_INTERVAL, MODE, m, 0.2, CENTER, 100, 0.0, streams)


@pytest.mark.slow
def test_ctrw_converges_with_scale() -> None:
    m = MixingMeasure.from_scales([(0.5, 1.0)])
    reports = [
        ctrw_check(
            PI_INTERVAL,
            MODE,
            m,
            0.2,
            CENTER,
            4000,
            scale,
            RandomStreams(4),
            dtau=1e-3,
        )
        for scale in (1e2, 1e3)
    ]
    assert reports[1].passed(), reports[1]
    assert reports[1].values["lhs"] < 3.0
    gaps = [
        abs(r.values["ctrw_mean"] - r.values["mc_mean"]) for r in reports
    ]
    fine = reports[1].values
    assert gaps[1] <= gaps[0] + 2 * math.hypot(fine["ctrw_se"], fine["mc_se"])


@pytest.mark.slow
def test_two_atom_mc_matches_spectral() -> None:
    m = MixingMeasure.from_scales([(0.3, 1.0), (0.7, 0.5)])
    exact = solve(PI_INTERVAL, MODE, m, 1)(1.0, CENTER)
    estimate = estimate_u(
        PI_INTERVAL,
        MODE,
        SubordinatorSpec.from_measure(m),
        1.0,
        CENTER,
        2000,
        RandomStreams(21),
        dtau=1e-3,
        sub_step=1e-3,
        bridge=True,
    )
    assert abs(estimate.mean - exact) <= 3 * estimate.se + 0.01
    assert estimate.paths == 2000


def test_zero_datum_mc() -> None:
    estimate = estimate_u(
        PI_INTERVAL,
        ZeroDatum(),
        HALF,
        0.5,
        CENTER,
        300,
        RandomStreams(2),
        dtau=1e-2,
    )
    assert estimate.mean == 0.0
    assert estimate.se == 0.0
    assert estimate.paths == 300
