"""Run artifacts: JSON record of a validation run, CSV grid dump, PGM heatmap.

Artifacts are written with sorted keys and no timestamps so that two runs with
the same configuration and seed produce byte-identical files.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .bsv import BsvState, FailureReport, make_grid
from .odd import OddSpace, space_from_dict
from .surrogate import KernelParams, gp_fit
from .sut import Trial

RUN_FILE = "run.json"
GRID_FILE = "grid.csv"
HEATMAP_FILE = "heatmap.pgm"
SURROGATE_FILE = "surrogate.json"
PGM_MAXVAL = 255


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def run_artifact(
    config: Mapping,
    state: BsvState,
    report: FailureReport,
    verdict: Optional[Mapping] = None,
    recommendation: Optional[Mapping] = None,
) -> dict:
    out = {
        "config": dict(config),
        "seed": state.seed,
        "iterations": state.iteration,
        "surrogate": {
            "params": state.surrogate.params.to_dict(),
            "prior_mean": state.surrogate.prior_mean,
        },
        "trials": [t.to_dict() for t in state.trials],
        "report": report.to_dict(),
    }
    if verdict is not None:
        out["verdict"] = dict(verdict)
    if recommendation is not None:
        out["recommendation"] = dict(recommendation)
    return out


def state_from_artifact(artifact: Mapping, space: Optional[OddSpace] = None) -> BsvState:
    """Rebuild the loop state (surrogate refitted from the recorded trials)."""
    if space is None:
        space = space_from_dict(artifact["config"]["odd"])
    trials = tuple(Trial.from_dict(t) for t in artifact["trials"])
    params = KernelParams.from_dict(artifact["surrogate"]["params"])
    model = gp_fit(
        space,
        [t.point for t in trials],
        [1.0 if t.failure else 0.0 for t in trials],
        params,
        artifact["surrogate"]["prior_mean"],
    )
    iteration = max((t.iteration for t in trials), default=0)
    return BsvState(space, model, trials, iteration, int(artifact["seed"]))


def grid_csv(state: BsvState, grid_resolution) -> str:
    grid = make_grid(state.space, grid_resolution)
    mu, var = state.surrogate.mean_variance(grid.points)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(state.space.continuous_names) + ["mean", "variance"])
    for row, m, v in zip(grid.points, mu, var):
        w.writerow([repr(float(x)) for x in row] + [repr(float(m)), repr(float(v))])
    return buf.getvalue()


def heatmap_pgm(state: BsvState, grid_resolution) -> str:
    """Plain (P2) grayscale image of the surrogate mean, white = failure.

    Columns follow the first continuous dimension, rows the second with its
    largest value at the top.
    """
    if len(state.space.continuous) != 2:
        raise ValueError("heatmap needs exactly two continuous dimensions")
    grid = make_grid(state.space, grid_resolution)
    mu, _ = state.surrogate.mean_variance(grid.points)
    img = np.rint(mu.reshape(grid.shape) * PGM_MAXVAL).astype(int).T[::-1]
    h, w = img.shape
    lines = ["P2", f"{w} {h}", str(PGM_MAXVAL)]
    lines += [" ".join(str(v) for v in row) for row in img]
    return "\n".join(lines) + "\n"


def read_pgm(text: str) -> np.ndarray:
    tokens = [t for line in text.splitlines() if not line.startswith("#") for t in line.split()]
    if tokens[0] != "P2":
        raise ValueError("not a plain PGM file")
    w, h = int(tokens[1]), int(tokens[2])
    return np.array(tokens[4 : 4 + w * h], dtype=int).reshape(h, w)


def write_artifacts(out_dir, artifact: Mapping, state: BsvState, grid_resolution) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"run": out / RUN_FILE, "grid": out / GRID_FILE, "surrogate": out / SURROGATE_FILE}
    paths["run"].write_text(dumps(artifact))
    paths["grid"].write_text(grid_csv(state, grid_resolution))
    paths["surrogate"].write_text(dumps(state.surrogate.to_dict()))
    if len(state.space.continuous) == 2:
        paths["heatmap"] = out / HEATMAP_FILE
        paths["heatmap"].write_text(heatmap_pgm(state, grid_resolution))
    return {k: str(v) for k, v in paths.items()}
