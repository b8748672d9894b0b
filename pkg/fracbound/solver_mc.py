"""
Monte Carlo for u(t, x) = E_x[f(X(E_t)) 1{tau_D(X) > E_t}]
"""
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .eigenbasis import BoxDomain, InitialDatum
from .mixing import MixingMeasure
from .subordinate import (
    SubordinatorSpec,
    increment_scale,
    sample_inverse,
    sample_paths,
)
from .tools import (
    CheckStatus,
    Commutation,
    CtrwAgreement,
    DomainError,
    FloatArray,
    UnsupportedCaseError,
    pairwise_sum,
)
from .workers import (
    DEFAULT_BLOCK_SIZE,
    STREAM_BRIDGE,
    STREAM_BROWNIAN,
    STREAM_CTRW,
    STREAM_PATH,
    STREAM_SUBORDINATOR,
    RandomStreams,
    WorkerPool,
    split_blocks,
)

logger = logging.getLogger(__name__)

MIN_PATHS = 100
DEFAULT_STEP = 1e-3
COMMUTATION_LEVELS = (1, 2, 3)
COMMUTATION_THRESHOLD = 0.02
MAX_CTRW_CHUNK = 2048
CLOCK_MATCH = 1e-12


@dataclass(frozen=True)
class MCEstimate:
    t: float
    x: tuple[float, ...]
    mean: float
    se: float
    paths: int
    dtau: float
    sub_step: float
    bridge: bool = False

    def __post_init__(self) -> None:
        if self.paths < 2:
            raise DomainError("Estimates need at least two paths")

    def to_dict(self) -> dict[str, Any]:
        return {
            "t": self.t,
            "x": list(self.x),
            "mean": self.mean,
            "se": self.se,
            "paths": self.paths,
            "dtau": self.dtau,
            "sub_step": self.sub_step,
            "bridge": self.bridge,
        }


@dataclass(frozen=True, eq=False)
class KilledPathSample:
    """
    One Euler path of the killed motion, kept for inspection and tests
    """

    start: tuple[float, ...]
    grid: FloatArray
    positions: FloatArray = field(repr=False)
    exited: bool
    exit_time: float | None

    @classmethod
    def simulate(
        cls,
        dom: BoxDomain,
        x: Sequence[float],
        horizon: float,
        dtau: float,
        rng: np.random.Generator,
    ) -> "KilledPathSample":
        start = _check_start(dom, x)
        steps = max(1, int(np.ceil(horizon / dtau - 1e-9)))
        # Generator the Laplacian: variance 2 dtau per axis
        increments = rng.normal(0.0, np.sqrt(2 * dtau), (steps, dom.dims))
        positions = np.vstack([start, start + np.cumsum(increments, axis=0)])
        grid = dtau * np.arange(steps + 1)
        outside = ~dom.contains(positions)
        if np.any(outside):
            first = int(np.argmax(outside))
            return cls(tuple(start), grid, positions, True, float(grid[first]))
        return cls(tuple(start), grid, positions, False, None)


def _check_start(dom: BoxDomain, x: Sequence[float]) -> FloatArray:
    start = dom.as_points(x)[0]
    if not dom.contains(start)[0]:
        raise DomainError(f"Starting point {tuple(start)} is not inside D")
    return start


def bridge_survival(
    dom: BoxDomain, before: FloatArray, after: FloatArray, dt: FloatArray
) -> FloatArray:
    """
    Probability that the Brownian bridge between two interior points stays
    inside every face, exp(-d1 d2 / dt) killing per face
    """
    sides = np.asarray(dom.sides)
    survival = np.ones(before.shape[0])
    scale = np.maximum(dt, 1e-300)[:, None]
    for distances in (
        before * after,
        (sides - before) * (sides - after),
    ):
        survival *= np.prod(
            1 - np.exp(-np.maximum(distances, 0) / scale), axis=1
        )
    return survival


@dataclass(frozen=True)
class _MCBlock:
    dom: BoxDomain
    f: InitialDatum
    spec: SubordinatorSpec
    times: tuple[float, ...]
    x: tuple[float, ...]
    index: int
    size: int
    streams: RandomStreams
    dtau: float
    sub_step: float
    bridge: bool


def _run_mc_block(block: _MCBlock) -> tuple[FloatArray, FloatArray]:
    """
    Sums and sums of squares of the killed contributions, one per time
    """
    dom, size = block.dom, block.size
    operational = sample_inverse(
        block.spec,
        block.times,
        block.sub_step,
        size,
        block.streams.generator(STREAM_SUBORDINATOR, block.index),
    )
    brownian = block.streams.generator(STREAM_BROWNIAN, block.index)
    bridge = block.streams.generator(STREAM_BRIDGE, block.index)
    order = np.argsort(block.times, kind="stable")
    targets = operational[:, order]
    positions = np.tile(np.asarray(block.x), (size, 1))
    clock = np.zeros(size)
    alive = np.ones(size, dtype=bool)
    pending = np.zeros(size, dtype=np.int64)
    contributions = np.zeros((size, len(block.times)))
    rows = np.arange(size)
    while True:
        active = pending < len(block.times)
        if not np.any(active):
            break
        target = targets[rows[active], pending[active]]
        # Killed paths jump straight to their next target
        dt = np.where(
            alive[active],
            np.minimum(block.dtau, target - clock[active]),
            target - clock[active],
        )
        moving = dt > 0
        noise = brownian.normal(size=(int(active.sum()), dom.dims))
        previous = positions[active]
        proposed = previous + noise * np.sqrt(2 * np.maximum(dt, 0))[:, None]
        survived = alive[active] & dom.contains(proposed)
        if block.bridge:
            uniforms = bridge.uniform(size=previous.shape[0])
            survival = bridge_survival(dom, previous, proposed, dt)
            survived &= ~moving | (uniforms < survival)
        indices = rows[active]
        positions[indices[moving]] = proposed[moving]
        alive[indices] = survived | ~moving & alive[indices]
        clock[indices] += np.maximum(dt, 0)
        # Record every time whose operational target has been reached
        while True:
            active = pending < len(block.times)
            if not np.any(active):
                break
            reached = np.zeros(size, dtype=bool)
            reached[active] = clock[active] >= targets[
                rows[active], pending[active]
            ] * (1 - CLOCK_MATCH)
            if not np.any(reached):
                break
            values = np.zeros(int(reached.sum()))
            live = alive[reached]
            if np.any(live):
                values[live] = block.f.evaluate(
                    dom, positions[reached][live]
                )
            contributions[rows[reached], order[pending[reached]]] = values
            pending[reached] += 1
    return contributions.sum(axis=0), (contributions**2).sum(axis=0)


def estimate_many(
    dom: BoxDomain,
    f: InitialDatum,
    spec: SubordinatorSpec,
    times: Sequence[float],
    x: Sequence[float],
    paths: int,
    streams: RandomStreams,
    dtau: float = DEFAULT_STEP,
    sub_step: float = DEFAULT_STEP,
    bridge: bool = False,
    pool: WorkerPool | None = None,
    block_size: int = DEFAULT_BLOCK_SIZE,
) -> list[MCEstimate]:
    """
    u(t, x) for several t at one point, all times sharing the same paths
    """
    start = _check_start(dom, x)
    if paths < 2:
        raise DomainError("Estimates need at least two paths")
    if paths < MIN_PATHS:
        logger.warning(f"Only {paths} Monte Carlo paths")
    if any(t <= 0 for t in times):
        raise DomainError("Monte Carlo estimates need t > 0")
    if dtau <= 0 or sub_step <= 0:
        raise DomainError("Steps must be positive")
    tasks = [
        _MCBlock(
            dom,
            f,
            spec,
            tuple(float(t) for t in times),
            tuple(float(v) for v in start),
            index,
            size,
            streams,
            dtau,
            sub_step,
            bridge,
        )
        for index, size in split_blocks(paths, block_size)
    ]
    runner = pool or WorkerPool(1)
    results = runner.map(_run_mc_block, tasks)
    logger.debug(f"Collected {len(results)} Monte Carlo blocks")
    sums = np.array([r[0] for r in results])
    squares = np.array([r[1] for r in results])
    estimates = []
    for column, t in enumerate(times):
        total = pairwise_sum(sums[:, column])
        total_sq = pairwise_sum(squares[:, column])
        mean = total / paths
        variance = max(total_sq - paths * mean * mean, 0.0) / (paths - 1)
        estimates.append(
            MCEstimate(
                float(t),
                tuple(float(v) for v in start),
                mean,
                float(np.sqrt(variance / paths)),
                paths,
                dtau,
                sub_step,
                bridge,
            )
        )
    return estimates


def estimate_u(
    dom: BoxDomain,
    f: InitialDatum,
    spec: SubordinatorSpec,
    t: float,
    x: Sequence[float],
    paths: int,
    streams: RandomStreams,
    dtau: float = DEFAULT_STEP,
    sub_step: float = DEFAULT_STEP,
    bridge: bool = False,
    pool: WorkerPool | None = None,
) -> MCEstimate:
    return estimate_many(
        dom,
        f,
        spec,
        [t],
        x,
        paths,
        streams,
        dtau,
        sub_step,
        bridge,
        pool,
    )[0]


@dataclass(frozen=True)
class _CommutationBlock:
    dom: BoxDomain
    spec: SubordinatorSpec
    t: float
    x: tuple[float, ...]
    index: int
    size: int
    streams: RandomStreams
    step: float
    spacings: tuple[float, ...]


def _run_commutation_block(block: _CommutationBlock) -> FloatArray:
    """
    Per level: paths where X exits before E_t, paths where the composed
    path exits on the s-grid, and paths where exactly one of them does
    """
    rng = block.streams.generator(STREAM_PATH, block.index)
    values = sample_paths(
        block.spec, block.step, block.step, block.size, rng, target=block.t
    )
    passage = np.argmax(values > block.t, axis=1)
    length = int(passage.max()) + 1
    values = values[:, :length]
    increments = rng.normal(
        0.0, np.sqrt(2 * block.step), (block.size, length - 1, block.dom.dims)
    )
    positions = np.concatenate(
        [
            np.tile(np.asarray(block.x), (block.size, 1, 1)),
            np.asarray(block.x) + np.cumsum(increments, axis=1),
        ],
        axis=1,
    )
    outside = ~block.dom.contains(positions.reshape(-1, block.dom.dims))
    outside = outside.reshape(block.size, length)
    columns = np.arange(length)[None, :]
    before = columns <= passage[:, None]
    operational = np.any(outside & before, axis=1)
    counts = np.zeros((len(block.spacings), 3))
    for row, delta in enumerate(block.spacings):
        # Smallest s-grid point not below W(tau_{i-1})
        grid_point = np.ceil(values[:, :-1] / delta) * delta
        visited = np.zeros_like(outside)
        visited[:, 0] = True
        visited[:, 1:] = (grid_point < values[:, 1:]) & (grid_point <= block.t)
        visited |= columns == passage[:, None]
        composed = np.any(outside & before & visited, axis=1)
        counts[row] = (
            operational.sum(),
            composed.sum(),
            (operational != composed).sum(),
        )
    return counts


def check_commutation(
    dom: BoxDomain,
    spec: SubordinatorSpec,
    t: float,
    x: Sequence[float],
    paths: int,
    streams: RandomStreams,
    step: float = DEFAULT_STEP,
    levels: Sequence[int] = COMMUTATION_LEVELS,
    threshold: float = COMMUTATION_THRESHOLD,
    pool: WorkerPool | None = None,
) -> Commutation:
    """
    Disagreement rate of 1{tau_D(X) > E_t} and 1{tau_D(X(E)) > t} on
    nested s-grids of step scale 2^-level, scale being the typical
    increment of W over one operational step. Index i of the operational
    grid is visited by the composed path iff an s-grid point lies in
    [W(tau_{i-1}), W(tau_i)), or i is the passage index of t.

    Refining the s-grid only adds visited indices, so the rates never
    increase with the level. A zero rate at the coarsest level means the
    study resolved nothing and is reported as inconclusive.
    """
    start = _check_start(dom, x)
    if t <= 0:
        raise DomainError(f"The commutation check needs t > 0, got {t}")
    ordered = tuple(sorted({int(level) for level in levels}))
    if not ordered:
        raise DomainError("The commutation check needs refinement levels")
    scale = increment_scale(spec, step)
    tasks = [
        _CommutationBlock(
            dom,
            spec,
            float(t),
            tuple(float(v) for v in start),
            index,
            size,
            streams,
            step,
            tuple(scale * 2.0 ** (-level) for level in ordered),
        )
        for index, size in split_blocks(paths)
    ]
    runner = pool or WorkerPool(1)
    counts = np.sum(runner.map(_run_commutation_block, tasks), axis=0)
    rates = counts[:, 2] / paths
    values = {f"rate_{level}": float(r) for level, r in zip(ordered, rates)}
    values.update(
        {
            "lhs": float(rates[-1]),
            "rhs": threshold,
            "exit_rate": float(counts[0, 0] / paths),
            "scale": scale,
        }
    )
    if len(ordered) > 1 and rates[-1] > 0:
        values["decay"] = float(
            np.log2(rates[0] / rates[-1]) / (ordered[-1] - ordered[0])
        )
    monotone = bool(np.all(np.diff(rates) <= 0))
    if rates[0] == 0:
        logger.warning(
            f"No disagreement at level {ordered[0]}: the s-grid already "
            "visits every operational step, use coarser levels"
        )
        status = CheckStatus.INCONCLUSIVE
    elif monotone and rates[-1] < threshold:
        status = CheckStatus.PASSED
    else:
        status = CheckStatus.FAILED
    return Commutation(status, values)


@dataclass(frozen=True)
class _CtrwBlock:
    dom: BoxDomain
    f: InitialDatum
    betas: tuple[float, ...]
    probabilities: tuple[float, ...]
    t: float
    x: tuple[float, ...]
    scale: float
    jump_sd: float
    index: int
    size: int
    streams: RandomStreams


def _run_ctrw_block(block: _CtrwBlock) -> tuple[float, float]:
    """
    Walkers wait Pareto times with P(J > u | beta) = u^-beta / c, then jump;
    the position at time t is the one after the last jump before t
    """
    rng = block.streams.generator(STREAM_CTRW, block.index)
    dom, size = block.dom, block.size
    betas = np.asarray(block.betas)
    clock = np.zeros(size)
    positions = np.tile(np.asarray(block.x), (size, 1))
    alive = np.ones(size, dtype=bool)
    running = np.ones(size, dtype=bool)
    chunk = 64
    while np.any(running):
        active = np.flatnonzero(running)
        choice = rng.choice(
            betas.size, (active.size, chunk), p=block.probabilities
        )
        beta = betas[choice]
        waits = (block.scale * rng.uniform(size=beta.shape)) ** (-1 / beta)
        jumps = rng.normal(0, block.jump_sd, (active.size, chunk, dom.dims))
        arrivals = clock[active, None] + np.cumsum(waits, axis=1)
        path = positions[active, None, :] + np.cumsum(jumps, axis=1)
        done = arrivals <= block.t
        outside = ~dom.contains(path.reshape(-1, dom.dims)).reshape(
            active.size, chunk
        )
        killed = np.any(outside & done, axis=1)
        finished = killed | ~np.all(done, axis=1)
        made = done.sum(axis=1)
        last = np.maximum(made - 1, 0)
        moved = made > 0
        update = active[moved]
        positions[update] = path[moved, last[moved]]
        clock[active] = arrivals[:, -1]
        alive[active[killed]] = False
        running[active[finished]] = False
        chunk = min(2 * chunk, MAX_CTRW_CHUNK)
    values = np.zeros(size)
    if np.any(alive):
        values[alive] = block.f.evaluate(dom, positions[alive])
    return float(values.sum()), float((values**2).sum())


def ctrw_check(
    dom: BoxDomain,
    f: InitialDatum,
    m: MixingMeasure,
    t: float,
    x: Sequence[float],
    walkers: int,
    scale: float,
    streams: RandomStreams,
    paths: int | None = None,
    dtau: float = DEFAULT_STEP,
    pool: WorkerPool | None = None,
) -> CtrwAgreement:
    """
    CTRW with orders drawn from the normalised measure against the
    time-changed killed motion. Jumps happen at rate c mu(0, 1) per unit of
    operational time, each N(0, 2 / (c mu(0, 1))) per axis.
    """
    if m.has_density:
        raise UnsupportedCaseError(
            "The CTRW check needs an atoms-only measure",
            hint="quantise the density into atoms first",
        )
    if scale <= 0:
        raise DomainError("The CTRW scale must be positive")
    start = _check_start(dom, x)
    mass = sum(a.weight for a in m.atoms)
    probabilities = tuple(a.weight / mass for a in m.atoms)
    tasks = [
        _CtrwBlock(
            dom,
            f,
            tuple(a.beta for a in m.atoms),
            probabilities,
            float(t),
            tuple(float(v) for v in start),
            float(scale),
            float(np.sqrt(2 / (scale * mass))),
            index,
            size,
            streams,
        )
        for index, size in split_blocks(walkers)
    ]
    runner = pool or WorkerPool(1)
    results = runner.map(_run_ctrw_block, tasks)
    total = pairwise_sum(np.array([r[0] for r in results]))
    total_sq = pairwise_sum(np.array([r[1] for r in results]))
    mean = total / walkers
    variance = max(total_sq - walkers * mean * mean, 0.0) / (walkers - 1)
    se = float(np.sqrt(variance / walkers))
    reference = estimate_u(
        dom,
        f,
        SubordinatorSpec.from_measure(m),
        t,
        start,
        paths or walkers,
        streams,
        dtau,
        dtau,
        pool=pool,
    )
    spread = float(np.hypot(se, reference.se))
    if spread == 0:
        z = 0.0 if mean == reference.mean else float("inf")
    else:
        z = (mean - reference.mean) / spread
    return CtrwAgreement.from_bound(
        abs(z),
        3.0,
        {
            "ctrw_mean": mean,
            "ctrw_se": se,
            "mc_mean": reference.mean,
            "mc_se": reference.se,
            "scale": scale,
        },
    )
