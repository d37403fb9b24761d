"""Bayesian safety validation loop.

Every iteration picks three candidates from a tensor grid of cell centers, one
per acquisition heuristic, evaluates them on the SUT and folds the outcomes
into the GP surrogate. The failure probability is the ODD-weighted integral of
the surrogate mean.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .odd import OddPoint, OddSpace, odd_density, odd_sample_array
from .surrogate import GpSurrogate, KernelParams, gp_fit, gp_update
from .sut import BatchError, HarnessError, SutClient, SutDescriptor, Trial

log = logging.getLogger(__name__)

DEFAULT_RESOLUTION = 50
MC_SAMPLES = 100_000
MAX_QUADRATURE_DIMS = 3
# Exponential kernel with a long length scale. A smooth kernel overshoots
# between opposite outcomes and the clamped mean then biases the integral
# upward; short length scales let the 0.5 prior leak back between samples.
BSV_KERNEL = KernelParams(length_scales=(1.0,), kernel="matern12")

__all__ = [
    "AcquisitionKind",
    "AnalyticSurrogate",
    "BoundaryCell",
    "BSV_KERNEL",
    "BsvRunError",
    "BsvState",
    "FailureReport",
    "Grid",
    "InsufficientDataError",
    "Trial",
    "UnsupportedDimensionError",
    "acquire_next",
    "bsv_run",
    "estimate_pfail",
    "extract_boundary",
    "failure_probability",
    "make_grid",
    "most_likely_failure",
]


class InsufficientDataError(ValueError):
    pass


class UnsupportedDimensionError(ValueError):
    pass


class BsvRunError(RuntimeError):
    """The SUT harness failed mid-run; ``state`` holds everything evaluated so far."""

    def __init__(self, cause: BaseException, state: "BsvState"):
        super().__init__(f"BSV run stopped at iteration {state.iteration + 1}: {cause}")
        self.cause = cause
        self.state = state


class AcquisitionKind(enum.Enum):
    UNCERTAINTY_EXPLORATION = "UncertaintyExploration"
    BOUNDARY_REFINEMENT = "BoundaryRefinement"
    FAILURE_DISTRIBUTION_SAMPLING = "FailureDistributionSampling"


ACQUISITION_ORDER = (
    AcquisitionKind.UNCERTAINTY_EXPLORATION,
    AcquisitionKind.BOUNDARY_REFINEMENT,
    AcquisitionKind.FAILURE_DISTRIBUTION_SAMPLING,
)


class AnalyticSurrogate:
    """Known failure-probability function standing in for a fitted GP.

    ``fn`` maps an ``(n, D)`` array of raw continuous coordinates to failure
    probabilities; predictive variance is zero.
    """

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray]):
        self.fn = fn

    def mean_variance(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        m = np.clip(np.asarray(self.fn(X), dtype=float).reshape(len(X)), 0.0, 1.0)
        return m, np.zeros(len(X))


Surrogate = Union[GpSurrogate, AnalyticSurrogate]


@dataclass(frozen=True)
class Grid:
    """Tensor grid of cell centers over the continuous dimensions."""

    axes: tuple[np.ndarray, ...]
    widths: tuple[float, ...]
    points: np.ndarray  # (prod(shape), D), C order over axes

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(len(a) for a in self.axes)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.widths))

    def __len__(self):
        return len(self.points)


def _resolution(space: OddSpace, grid_resolution) -> tuple[int, ...]:
    n = len(space.continuous)
    if np.isscalar(grid_resolution):
        res = (int(grid_resolution),) * n
    else:
        res = tuple(int(r) for r in grid_resolution)
    if len(res) != n or any(r < 1 for r in res):
        raise ValueError(f"grid resolution {grid_resolution!r} invalid for {n} dimensions")
    return res


def make_grid(space: OddSpace, grid_resolution=DEFAULT_RESOLUTION) -> Grid:
    res = _resolution(space, grid_resolution)
    axes, widths = [], []
    for (lo, hi), n in zip(space.bounds, res):
        w = (hi - lo) / n
        axes.append(lo + w * (np.arange(n) + 0.5))
        widths.append(w)
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.column_stack([m.ravel() for m in mesh])
    return Grid(tuple(axes), tuple(widths), points)


@dataclass(frozen=True)
class BsvState:
    space: OddSpace
    surrogate: Surrogate
    trials: tuple[Trial, ...] = ()
    iteration: int = 0
    seed: int = 0

    def with_trials(self, trials: Sequence[Trial]) -> "BsvState":
        """Append trials, refitting the surrogate once per trial in order."""
        model = self.surrogate
        for t in trials:
            model = gp_update(model, t.point, 1.0 if t.failure else 0.0)
        it = max([self.iteration] + [t.iteration for t in trials])
        return replace(self, surrogate=model, trials=self.trials + tuple(trials), iteration=it)


def initial_state(
    space: OddSpace, params: KernelParams = BSV_KERNEL, prior_mean: float = 0.5, seed: int = 0
) -> BsvState:
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return BsvState(space, gp_fit(space, [], [], params, prior_mean), (), 0, seed)


def _candidates(state: BsvState, grid) -> np.ndarray:
    if isinstance(grid, Grid):
        return grid.points
    if len(grid) and isinstance(grid[0], OddPoint):
        return state.space.to_array(grid)
    return np.atleast_2d(np.asarray(grid, dtype=float))


def acquisition_scores(state: BsvState, kind: AcquisitionKind, X: np.ndarray) -> np.ndarray:
    mu, var = state.surrogate.mean_variance(X)
    if kind is AcquisitionKind.UNCERTAINTY_EXPLORATION:
        return var
    if kind is AcquisitionKind.BOUNDARY_REFINEMENT:
        return mu * (1.0 - mu) * np.sqrt(var)
    return mu * state.space.density_array(X)


def _acquire_index(state: BsvState, kind: AcquisitionKind, X: np.ndarray) -> int:
    if len(X) == 0:
        raise ValueError("empty candidate grid")
    if not state.trials:
        kind_index = ACQUISITION_ORDER.index(kind)
        rng = np.random.default_rng([state.seed, state.iteration, kind_index])
        return int(rng.integers(len(X)))
    scores = acquisition_scores(state, kind, X)
    seen = _evaluated_mask(state, X)
    if not seen.all():
        scores = np.where(seen, -np.inf, scores)
    # np.argmax returns the first maximum, i.e. the lowest grid index
    return int(np.argmax(scores))


def _evaluated_mask(state: BsvState, X: np.ndarray) -> np.ndarray:
    """Candidates that coincide with an already evaluated point."""
    if not state.trials:
        return np.zeros(len(X), dtype=bool)
    T = state.space.to_array([t.point for t in state.trials])
    seen = np.zeros(len(X), dtype=bool)
    for row in T:
        seen |= np.all(X == row, axis=1)
    return seen


def acquire_next(state: BsvState, kind: AcquisitionKind, grid) -> OddPoint:
    X = _candidates(state, grid)
    return state.space.from_array(X[_acquire_index(state, kind, X)])[0]


def bsv_run(
    space: OddSpace,
    sut: SutDescriptor,
    iterations: int,
    grid_resolution=DEFAULT_RESOLUTION,
    seed: int = 0,
    params: KernelParams = BSV_KERNEL,
    prior_mean: float = 0.5,
    workers: int = 1,
    progress: Optional[Callable[[BsvState], None]] = None,
) -> BsvState:
    """Run the validation loop for ``iterations`` rounds of three SUT evaluations.

    With one worker each acquisition sees the surrogate refitted on every
    earlier outcome. With more workers the three candidates of a round are
    chosen from the surrogate as it stood at the start of the round so they can
    be evaluated concurrently; outcomes are still applied in acquisition order.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    state = initial_state(space, params, prior_mean, seed)
    grid = make_grid(space, grid_resolution)
    with SutClient(sut, workers) as client:
        for it in range(1, iterations + 1):
            if workers > 1:
                state = _concurrent_round(state, client, grid, it)
            else:
                state = _sequential_round(state, client, grid, it)
            log.debug("iteration %d: %s", it, [t.failure for t in state.trials[-3:]])
            if progress is not None:
                progress(state)
    return state


def _sequential_round(state: BsvState, client: SutClient, grid: Grid, it: int) -> BsvState:
    for kind in ACQUISITION_ORDER:
        point = acquire_next(state, kind, grid)
        try:
            trial = client.evaluate(point, it, kind.value)
        except HarnessError as exc:
            raise BsvRunError(exc, state) from exc
        state = state.with_trials([trial])
    return state


def _concurrent_round(state: BsvState, client: SutClient, grid: Grid, it: int) -> BsvState:
    picks = [acquire_next(state, kind, grid) for kind in ACQUISITION_ORDER]
    tags = [kind.value for kind in ACQUISITION_ORDER]
    try:
        trials = client.evaluate_batch(picks, it, tags)
    except BatchError as exc:
        raise BsvRunError(exc.cause, state.with_trials(exc.completed)) from exc
    except HarnessError as exc:
        raise BsvRunError(exc, state) from exc
    return state.with_trials(trials)


@dataclass(frozen=True)
class BoundaryCell:
    """Dual cell spanned by 2x2 neighbouring grid nodes whose means straddle the level."""

    index: tuple[int, ...]
    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def to_dict(self) -> dict:
        return {"index": list(self.index), "lower": list(self.lower), "upper": list(self.upper)}


@dataclass(frozen=True)
class FailureReport:
    p_fail: float
    num_evaluations: int
    boundary_cells: list
    most_likely_failure: OddPoint
    most_likely_failure_density: float
    grid_resolution: tuple[int, ...]
    method: str = "quadrature"

    def __post_init__(self):
        if not 0.0 <= self.p_fail <= 1.0:
            raise ValueError(f"p_fail {self.p_fail} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "p_fail": self.p_fail,
            "method": self.method,
            "num_evaluations": self.num_evaluations,
            "grid_resolution": list(self.grid_resolution),
            "most_likely_failure": {
                "point": self.most_likely_failure.to_dict(),
                "density": self.most_likely_failure_density,
            },
            "boundary_cells": [c.to_dict() for c in self.boundary_cells],
        }


def failure_probability(
    space: OddSpace,
    surrogate: Surrogate,
    grid_resolution=DEFAULT_RESOLUTION,
    mc_samples: int = MC_SAMPLES,
    seed: int = 0,
) -> tuple[float, str]:
    """Integrate the surrogate mean against the ODD density.

    Midpoint quadrature on the cell-center grid for up to three continuous
    dimensions, Monte Carlo under the ODD otherwise.
    """
    if len(space.continuous) <= MAX_QUADRATURE_DIMS:
        grid = make_grid(space, grid_resolution)
        mu, _ = surrogate.mean_variance(grid.points)
        p = float(np.sum(mu * space.density_array(grid.points)) * grid.cell_volume)
        method = "quadrature"
    else:
        if mc_samples < MC_SAMPLES:
            raise ValueError(f"Monte Carlo estimate needs at least {MC_SAMPLES} draws")
        X = odd_sample_array(space, mc_samples, seed)
        mu, _ = surrogate.mean_variance(X)
        p = float(np.mean(mu))
        method = "monte_carlo"
    return min(max(p, 0.0), 1.0), method


def _require_trials(state: BsvState) -> None:
    if not state.trials:
        raise InsufficientDataError("no trials recorded; run the validation loop first")


def extract_boundary(state: BsvState, grid_resolution=DEFAULT_RESOLUTION, level: float = 0.5) -> list[BoundaryCell]:
    if len(state.space.continuous) != 2:
        raise UnsupportedDimensionError("boundary extraction supports exactly two continuous dimensions")
    grid = make_grid(state.space, grid_resolution)
    mu, _ = state.surrogate.mean_variance(grid.points)
    mu = mu.reshape(grid.shape)
    corners = np.stack([mu[:-1, :-1], mu[1:, :-1], mu[:-1, 1:], mu[1:, 1:]])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    # symmetric in (mu, level) <-> (1 - mu, 1 - level)
    crossing = (lo <= level) & (level <= hi) & (lo < hi)
    a0, a1 = grid.axes
    cells = []
    for i, j in zip(*np.nonzero(crossing)):
        cells.append(
            BoundaryCell(
                (int(i), int(j)),
                (float(a0[i]), float(a1[j])),
                (float(a0[i + 1]), float(a1[j + 1])),
            )
        )
    return cells


def _most_likely_failure(space: OddSpace, surrogate: Surrogate, grid: Grid) -> tuple[OddPoint, float]:
    mu, _ = surrogate.mean_variance(grid.points)
    dens = space.density_array(grid.points)
    k = int(np.argmax(mu * dens))
    point = space.from_array(grid.points[k])[0]
    return point, float(odd_density(space, point))


def most_likely_failure(state: BsvState, grid_resolution=DEFAULT_RESOLUTION) -> OddPoint:
    _require_trials(state)
    return _most_likely_failure(state.space, state.surrogate, make_grid(state.space, grid_resolution))[0]


def estimate_pfail(
    state: BsvState, grid_resolution=DEFAULT_RESOLUTION, mc_samples: int = MC_SAMPLES
) -> FailureReport:
    _require_trials(state)
    p, method = failure_probability(state.space, state.surrogate, grid_resolution, mc_samples, state.seed)
    grid = make_grid(state.space, grid_resolution)
    mlf, dens = _most_likely_failure(state.space, state.surrogate, grid)
    boundary = extract_boundary(state, grid_resolution) if len(state.space.continuous) == 2 else []
    return FailureReport(p, len(state.trials), boundary, mlf, dens, grid.shape, method)
