"""Failure-probability requirements derived from hazard assessments.

A hazard assessment fixes a development assurance level (DAL) and an exposure
label; a DAL table turns that pair into a maximum tolerated failure
probability. Validation reports are checked against it, and when the check
fails the ODD can be cut back along one dimension until it passes.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np

from .bsv import DEFAULT_RESOLUTION, BsvState, FailureReport, failure_probability, make_grid
from .lineage import canonical_json, sha256
from .odd import odd_restrict

__all__ = [
    "ConfigError",
    "Dal",
    "DalTable",
    "HazardAssessment",
    "Restriction",
    "SeverityClass",
    "VerificationVerdict",
    "dal_threshold",
    "load_assessment",
    "recommend_restriction",
    "restricted_state",
    "report_digest",
    "verify_requirement",
]


class ConfigError(ValueError):
    pass


class SeverityClass(enum.Enum):
    CATASTROPHIC = "Catastrophic"
    HAZARDOUS = "Hazardous"
    MAJOR = "Major"
    MINOR = "Minor"
    NO_EFFECT = "NoEffect"


class Dal(enum.Enum):
    A = "A"
    B = "B"
    C = "C"
    D = "D"
    E = "E"


def _dal(value) -> Dal:
    try:
        return value if isinstance(value, Dal) else Dal(str(value))
    except ValueError:
        raise ConfigError(f"unknown DAL {value!r}") from None


class DalTable:
    """Maps ``(dal, exposure)`` to a maximum failure probability.

    Only the level-C per-approach entry ships by default; every other entry is
    a policy decision and must come from configuration.
    """

    DEFAULT_ENTRIES = {(Dal.C, "per approach"): 1e-4}

    def __init__(self, entries: Optional[Mapping] = None):
        src = self.DEFAULT_ENTRIES if entries is None else entries
        self.entries: dict[tuple[Dal, str], float] = {}
        for (dal, exposure), p in src.items():
            p = float(p)
            if not 0.0 < p < 1.0:
                raise ConfigError(f"requirement {p} for ({dal}, {exposure}) outside (0, 1)")
            self.entries[(_dal(dal), str(exposure))] = p

    def lookup(self, dal, exposure: str) -> float:
        key = (_dal(dal), exposure)
        if key not in self.entries:
            raise ConfigError(f"no requirement configured for DAL {key[0].value} {exposure!r}")
        return self.entries[key]

    def to_dict(self) -> dict:
        rows = sorted(self.entries.items(), key=lambda kv: (kv[0][0].value, kv[0][1]))
        return {"entries": [{"dal": d.value, "exposure": e, "p_fail": p} for (d, e), p in rows]}

    @classmethod
    def from_dict(cls, data) -> "DalTable":
        try:
            return cls({(row["dal"], row["exposure"]): row["p_fail"] for row in data["entries"]})
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed DAL table: {exc}") from None

    @classmethod
    def load(cls, path) -> "DalTable":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def __eq__(self, other):
        return isinstance(other, DalTable) and self.entries == other.entries


def dal_threshold(table: DalTable, dal, exposure: str) -> float:
    return table.lookup(dal, exposure)


@dataclass(frozen=True)
class HazardAssessment:
    function_name: str
    severity_class: SeverityClass
    dal: Dal
    p_fail_requirement: float
    exposure: str = "per approach"

    def __post_init__(self):
        object.__setattr__(self, "severity_class", SeverityClass(self.severity_class))
        object.__setattr__(self, "dal", _dal(self.dal))
        if not 0.0 < self.p_fail_requirement < 1.0:
            raise ConfigError(f"p_fail_requirement {self.p_fail_requirement} outside (0, 1)")

    def to_dict(self) -> dict:
        return {
            "function_name": self.function_name,
            "severity_class": self.severity_class.value,
            "dal": self.dal.value,
            "exposure": self.exposure,
            "p_fail_requirement": self.p_fail_requirement,
        }

    @classmethod
    def from_dict(cls, data: Mapping, table: Optional[DalTable] = None) -> "HazardAssessment":
        """Build from an assessment document; a missing requirement is looked up in ``table``."""
        try:
            exposure = data.get("exposure", "per approach")
            req = data.get("p_fail_requirement")
            if req is None:
                req = (table or DalTable()).lookup(data["dal"], exposure)
            return cls(data["function_name"], data["severity_class"], data["dal"], float(req), exposure)
        except KeyError as exc:
            raise ConfigError(f"assessment missing field {exc}") from None
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def load_assessment(path, table: Optional[DalTable] = None) -> HazardAssessment:
    return HazardAssessment.from_dict(json.loads(Path(path).read_text()), table)


def report_digest(report: Union[FailureReport, Mapping]) -> str:
    data = report.to_dict() if isinstance(report, FailureReport) else report
    return sha256(canonical_json(data))


@dataclass(frozen=True)
class VerificationVerdict:
    passed: bool
    estimated: float
    required: float
    margin: float  # estimated / required
    provenance: str  # digest of the report the verdict was computed from

    def to_dict(self) -> dict:
        return {
            "pass": self.passed,
            "estimated": self.estimated,
            "required": self.required,
            "margin": self.margin,
            "provenance": self.provenance,
        }


def verify_requirement(report: FailureReport, assessment: HazardAssessment) -> VerificationVerdict:
    p, req = report.p_fail, assessment.p_fail_requirement
    return VerificationVerdict(p <= req, p, req, p / req, report_digest(report))


@dataclass(frozen=True)
class Restriction:
    dimension: str
    interval: tuple[float, float]
    projected_p_fail: float

    def to_dict(self) -> dict:
        return {
            "dimension": self.dimension,
            "interval": list(self.interval),
            "projected_p_fail": self.projected_p_fail,
        }


def recommend_restriction(
    state: BsvState,
    assessment: HazardAssessment,
    dimension: str,
    grid_resolution=DEFAULT_RESOLUTION,
) -> Optional[Restriction]:
    """Least restrictive upper cutoff on ``dimension`` that meets the requirement.

    Candidate cutoffs are the interior cell edges of the grid along that
    dimension, tried from the top down; each is scored by re-integrating the
    surrogate over the restricted space. Returns None when no cutoff works.
    """
    space = state.space
    if not 1 <= len(space.continuous) <= 2:
        raise ValueError("restriction search supports one or two continuous dimensions")
    dim = space.dimension(dimension)
    if not dim.continuous:
        raise ValueError(f"dimension {dimension!r} is not continuous")
    req = assessment.p_fail_requirement

    def projected(sub) -> float:
        return failure_probability(sub, state.surrogate, grid_resolution, seed=state.seed)[0]

    lower, upper = dim.dist.lower, dim.dist.upper
    p = projected(space)
    if p <= req:
        return Restriction(dimension, (lower, upper), p)
    grid = make_grid(space, grid_resolution)
    k = space.continuous_names.index(dimension)
    n = grid.shape[k]
    edges = lower + np.arange(1, n) * grid.widths[k]
    for cut in edges[::-1]:
        sub = odd_restrict(space, dimension, (lower, float(cut)))
        p = projected(sub)
        if p <= req:
            return Restriction(dimension, (lower, float(cut)), p)
    return None


def restricted_state(state: BsvState, restriction: Restriction) -> BsvState:
    """The same surrogate and trials viewed over the restricted space."""
    return replace(state, space=odd_restrict(state.space, restriction.dimension, restriction.interval))
