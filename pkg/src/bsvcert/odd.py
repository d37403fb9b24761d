"""Parametric operational design domain built from independent truncated normals.

Each continuous dimension carries a truncated normal ``N(mu, sigma, [lower, upper])``.
Categorical dimensions (airport, runway, ...) carry an explicit probability table;
they enter the joint density but are not part of the surrogate input space.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import numpy as np
from scipy.special import erfc

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
QUANTILE_TOL = 1e-12
_MAX_NEWTON_STEPS = 200


class OddError(ValueError):
    """Invalid operational domain definition or query."""


class SchemaError(OddError):
    """A point does not match the dimensions of its space."""


class InvalidRestrictionError(OddError):
    pass


def _std_cdf(z):
    return 0.5 * erfc(-np.asarray(z, dtype=float) / _SQRT2)


def _std_sf(z):
    return 0.5 * erfc(np.asarray(z, dtype=float) / _SQRT2)


def _std_pdf(z):
    z = np.asarray(z, dtype=float)
    return _INV_SQRT_2PI * np.exp(-0.5 * z * z)


def _check_finite(x) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise OddError("non-finite input to truncated normal")
    return arr


@dataclass(frozen=True)
class TruncatedNormal:
    mu: float
    sigma: float
    lower: float
    upper: float

    def __post_init__(self):
        for v in (self.mu, self.sigma, self.lower, self.upper):
            if not math.isfinite(v):
                raise OddError("truncated normal parameters must be finite")
        if self.sigma <= 0:
            raise OddError(f"sigma must be positive, got {self.sigma}")
        if not self.lower < self.upper:
            raise OddError(f"empty truncation interval [{self.lower}, {self.upper}]")
        if self.mass <= 0.0:
            raise OddError("truncation interval carries no probability mass")

    @property
    def alpha(self) -> float:
        return (self.lower - self.mu) / self.sigma

    @property
    def beta(self) -> float:
        return (self.upper - self.mu) / self.sigma

    @property
    def mass(self) -> float:
        """Probability of the untruncated normal on ``[lower, upper]``."""
        a, b = self.alpha, self.beta
        # evaluate in the tail that keeps significant digits
        if a > 0:
            return float(_std_sf(a) - _std_sf(b))
        return float(_std_cdf(b) - _std_cdf(a))

    def pdf(self, x):
        return truncnorm_pdf(self, x)

    def cdf(self, x):
        return truncnorm_cdf(self, x)

    def quantile(self, u):
        return truncnorm_quantile(self, u)

    def sample(self, n: int, seed) -> np.ndarray:
        return truncnorm_sample(self, n, seed)

    def restricted(self, lower: float, upper: float) -> "TruncatedNormal":
        lo, hi = max(self.lower, lower), min(self.upper, upper)
        if not lo < hi:
            raise InvalidRestrictionError(
                f"[{lower}, {upper}] does not intersect [{self.lower}, {self.upper}]"
            )
        return replace(self, lower=lo, upper=hi)


def truncnorm_pdf(dist: TruncatedNormal, x):
    """Density of ``dist`` at ``x``; zero outside the truncation interval."""
    arr = _check_finite(x)
    z = (arr - dist.mu) / dist.sigma
    out = _std_pdf(z) / (dist.sigma * dist.mass)
    out = np.where((arr < dist.lower) | (arr > dist.upper), 0.0, out)
    return float(out) if out.ndim == 0 else out


def truncnorm_cdf(dist: TruncatedNormal, x):
    arr = _check_finite(x)
    z = np.clip((arr - dist.mu) / dist.sigma, dist.alpha, dist.beta)
    if dist.alpha > 0:
        num = _std_sf(dist.alpha) - _std_sf(z)
    else:
        num = _std_cdf(z) - _std_cdf(dist.alpha)
    out = np.clip(num / dist.mass, 0.0, 1.0)
    out = np.where(arr <= dist.lower, 0.0, np.where(arr >= dist.upper, 1.0, out))
    return float(out) if out.ndim == 0 else out


def truncnorm_quantile(dist: TruncatedNormal, u):
    """Inverse CDF by bracketed Newton iteration in standardized units.

    Steps that leave the current bracket fall back to bisection, so the
    iteration converges for any ``u`` in ``[0, 1]``.
    """
    u = _check_finite(u)
    if np.any((u < 0) | (u > 1)):
        raise OddError("quantile level outside [0, 1]")
    scalar = u.ndim == 0
    u = np.atleast_1d(u).astype(float)
    a, b, mass = dist.alpha, dist.beta, dist.mass
    upper_tail = a > 0

    lo = np.full_like(u, a)
    hi = np.full_like(u, b)
    z = np.clip(a + u * (b - a), a, b)
    active = np.ones(u.shape, dtype=bool)
    for _ in range(_MAX_NEWTON_STEPS):
        if not active.any():
            break
        za = z[active]
        g = _residual(za, u[active], a, mass, upper_tail)
        lo_a, hi_a = lo[active], hi[active]
        lo_a = np.where(g < 0, za, lo_a)
        hi_a = np.where(g > 0, za, hi_a)
        slope = _std_pdf(za) / mass
        with np.errstate(divide="ignore", invalid="ignore"):
            step = za - g / slope
        bad = ~np.isfinite(step) | (step <= lo_a) | (step >= hi_a)
        step = np.where(bad, 0.5 * (lo_a + hi_a), step)
        done = (np.abs(step - za) <= QUANTILE_TOL * np.maximum(1.0, np.abs(za))) | (g == 0)
        step = np.where(g == 0, za, step)
        z[active] = step
        lo[active], hi[active] = lo_a, hi_a
        idx = np.flatnonzero(active)
        active[idx[done]] = False
    x = dist.mu + dist.sigma * z
    x = np.where(u <= 0, dist.lower, np.where(u >= 1, dist.upper, x))
    x = np.clip(x, dist.lower, dist.upper)
    return float(x[0]) if scalar else x


def _residual(z, u, a, mass, upper_tail):
    if upper_tail:
        return (_std_sf(a) - _std_sf(z)) / mass - u
    return (_std_cdf(z) - _std_cdf(a)) / mass - u


def truncnorm_sample(dist: TruncatedNormal, n: int, seed) -> np.ndarray:
    """Draw ``n`` values by inverse-CDF transform of seeded uniforms."""
    if n < 0:
        raise OddError("sample count must be non-negative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if n == 0:
        return np.empty(0)
    return truncnorm_quantile(dist, rng.random(n))


def truncnorm_moments(dist: TruncatedNormal) -> tuple[float, float]:
    """Closed-form mean and variance of a truncated normal."""
    a, b = dist.alpha, dist.beta
    pa, pb = float(_std_pdf(a)), float(_std_pdf(b))
    z = dist.mass
    mean = dist.mu + dist.sigma * (pa - pb) / z
    var = dist.sigma**2 * (1 + (a * pa - b * pb) / z - ((pa - pb) / z) ** 2)
    return mean, var


@dataclass(frozen=True)
class Categorical:
    """Finite discrete distribution over labelled categories."""

    probabilities: Mapping[str, float]

    def __post_init__(self):
        if not self.probabilities:
            raise OddError("categorical distribution needs at least one category")
        if any(p < 0 for p in self.probabilities.values()):
            raise OddError("negative category probability")
        total = sum(self.probabilities.values())
        if abs(total - 1.0) > 1e-9:
            raise OddError(f"category probabilities sum to {total}, not 1")

    @property
    def categories(self) -> list[str]:
        return list(self.probabilities)

    @property
    def mode(self) -> str:
        return max(self.probabilities, key=lambda c: self.probabilities[c])

    def pmf(self, value) -> float:
        return float(self.probabilities.get(value, 0.0))

    def sample(self, n: int, seed) -> list[str]:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        cats = self.categories
        probs = np.array([self.probabilities[c] for c in cats])
        idx = rng.choice(len(cats), size=n, p=probs / probs.sum())
        return [cats[i] for i in idx]


Distribution = Union[TruncatedNormal, Categorical]


@dataclass(frozen=True)
class OddDimension:
    name: str
    dist: Distribution
    unit: str = ""

    @property
    def continuous(self) -> bool:
        return isinstance(self.dist, TruncatedNormal)


@dataclass(frozen=True)
class OddPoint:
    values: Mapping[str, Union[float, str]]

    def __getitem__(self, name):
        return self.values[name]

    def to_dict(self) -> dict:
        return dict(self.values)


@dataclass(frozen=True)
class OddSpace:
    dimensions: tuple[OddDimension, ...]
    conditioning: str = ""

    def __post_init__(self):
        object.__setattr__(self, "dimensions", tuple(self.dimensions))
        if not self.dimensions:
            raise OddError("an operational domain needs at least one dimension")
        names = [d.name for d in self.dimensions]
        if len(set(names)) != len(names):
            raise OddError(f"duplicate dimension names in {names}")

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.dimensions]

    @property
    def continuous(self) -> list[OddDimension]:
        return [d for d in self.dimensions if d.continuous]

    @property
    def continuous_names(self) -> list[str]:
        return [d.name for d in self.continuous]

    @property
    def bounds(self) -> np.ndarray:
        """``(D, 2)`` array of truncation intervals for the continuous dimensions."""
        return np.array([[d.dist.lower, d.dist.upper] for d in self.continuous], dtype=float)

    def dimension(self, name: str) -> OddDimension:
        for d in self.dimensions:
            if d.name == name:
                return d
        raise SchemaError(f"unknown dimension {name!r}")

    def point(self, **values) -> OddPoint:
        p = OddPoint(dict(values))
        _check_schema(self, p)
        return p

    def density_array(self, X) -> np.ndarray:
        """Joint density of the continuous dimensions at the rows of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        dens = np.ones(X.shape[0])
        for j, dim in enumerate(self.continuous):
            dens = dens * np.atleast_1d(truncnorm_pdf(dim.dist, X[:, j]))
        return dens

    def to_array(self, points: Sequence[OddPoint]) -> np.ndarray:
        names = self.continuous_names
        for p in points:
            _check_schema(self, p)
        return np.array([[float(p[n]) for n in names] for p in points], dtype=float).reshape(
            len(points), len(names)
        )

    def from_array(self, X) -> list[OddPoint]:
        """Points from continuous coordinates; categorical dimensions take their mode."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        fixed = {d.name: d.dist.mode for d in self.dimensions if not d.continuous}
        names = self.continuous_names
        out = []
        for row in X:
            values = {}
            for d in self.dimensions:
                values[d.name] = float(row[names.index(d.name)]) if d.continuous else fixed[d.name]
            out.append(OddPoint(values))
        return out


def _check_schema(space: OddSpace, point: OddPoint) -> None:
    missing = [n for n in space.names if n not in point.values]
    if missing:
        raise SchemaError(f"point is missing dimensions {missing}")
    extra = [n for n in point.values if n not in space.names]
    if extra:
        raise SchemaError(f"point has unknown dimensions {extra}")


def odd_density(space: OddSpace, point: OddPoint) -> float:
    _check_schema(space, point)
    dens = 1.0
    for dim in space.dimensions:
        v = point[dim.name]
        if dim.continuous:
            dens *= truncnorm_pdf(dim.dist, float(v))
        else:
            dens *= dim.dist.pmf(v)
        if dens == 0.0:
            return 0.0
    return float(dens)


def odd_sample(space: OddSpace, n: int, seed) -> list[OddPoint]:
    """Independent draws per dimension from decorrelated child seed streams."""
    if n < 0:
        raise OddError("sample count must be non-negative")
    if n == 0:
        return []
    columns = _sample_columns(space, n, seed)
    return [OddPoint({name: col[i] for name, col in columns.items()}) for i in range(n)]


def odd_sample_array(space: OddSpace, n: int, seed) -> np.ndarray:
    """Like :func:`odd_sample` but returns the continuous coordinates as an array."""
    columns = _sample_columns(space, n, seed)
    if n == 0:
        return np.empty((0, len(space.continuous)))
    return np.column_stack([np.asarray(columns[name], dtype=float) for name in space.continuous_names])


def _sample_columns(space: OddSpace, n: int, seed) -> dict:
    children = np.random.SeedSequence(seed).spawn(len(space.dimensions))
    columns = {}
    for dim, child in zip(space.dimensions, children):
        rng = np.random.default_rng(child)
        if dim.continuous:
            columns[dim.name] = [float(v) for v in truncnorm_sample(dim.dist, n, rng)]
        else:
            columns[dim.name] = dim.dist.sample(n, rng)
    return columns


def odd_restrict(space: OddSpace, dimension: str, interval: Iterable[float]) -> OddSpace:
    lo, hi = (float(v) for v in interval)
    dim = space.dimension(dimension)
    if not dim.continuous:
        raise InvalidRestrictionError(f"{dimension!r} is categorical")
    new_dist = dim.dist.restricted(lo, hi)
    dims = tuple(replace(d, dist=new_dist) if d.name == dimension else d for d in space.dimensions)
    return replace(space, dimensions=dims)


def space_to_dict(space: OddSpace) -> dict:
    dims = []
    for d in space.dimensions:
        if d.continuous:
            dist = d.dist
            dims.append(
                {
                    "name": d.name,
                    "unit": d.unit,
                    "mu": dist.mu,
                    "sigma": dist.sigma,
                    "lower": dist.lower,
                    "upper": dist.upper,
                }
            )
        else:
            dims.append({"name": d.name, "unit": d.unit, "categories": dict(d.dist.probabilities)})
    out: dict = {"dimensions": dims}
    if space.conditioning:
        out["conditioning"] = space.conditioning
    return out


def space_from_dict(data: Mapping) -> OddSpace:
    try:
        raw_dims = data["dimensions"]
    except (KeyError, TypeError):
        raise OddError("ODD document needs a 'dimensions' list") from None
    dims = []
    for raw in raw_dims:
        try:
            if "categories" in raw:
                dist: Distribution = Categorical(dict(raw["categories"]))
            else:
                dist = TruncatedNormal(
                    float(raw["mu"]), float(raw["sigma"]), float(raw["lower"]), float(raw["upper"])
                )
            dims.append(OddDimension(str(raw["name"]), dist, str(raw.get("unit", ""))))
        except KeyError as exc:
            raise OddError(f"ODD dimension missing field {exc}") from None
    return OddSpace(tuple(dims), str(data.get("conditioning", "")))


def load_space(path) -> OddSpace:
    return space_from_dict(json.loads(Path(path).read_text()))


def save_space(space: OddSpace, path) -> None:
    Path(path).write_text(json.dumps(space_to_dict(space), indent=2) + "\n")


def landing_space() -> OddSpace:
    """Two-dimensional approach domain: glideslope angle and distance to runway."""
    return OddSpace(
        (
            OddDimension("glideslope_deg", TruncatedNormal(3.0, 0.3, 1.0, 7.0), "degrees"),
            OddDimension("distance_nm", TruncatedNormal(0.0, 1.5, 0.0, 4.0), "nautical miles"),
        ),
        conditioning="approach",
    )
