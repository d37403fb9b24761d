"""Gaussian-process failure surrogate over the continuous ODD dimensions.

Binary outcomes are regressed directly (no latent link); the posterior mean is
clamped to ``[0, 1]`` so it reads as a failure probability. Inputs are mapped to
the unit hypercube through each dimension's truncation interval, so length
scales are unit-free.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .odd import OddPoint, OddSpace, space_from_dict, space_to_dict

KERNELS = ("squared_exponential", "matern12", "matern32", "matern52")
_JITTER_ESCALATIONS = 6


class GpFitError(RuntimeError):
    pass


@dataclass(frozen=True)
class KernelParams:
    signal_variance: float = 0.25
    length_scales: tuple[float, ...] = (0.2,)
    noise: float = 1e-6
    kernel: str = "squared_exponential"

    def __post_init__(self):
        object.__setattr__(self, "length_scales", tuple(float(v) for v in self.length_scales))
        if self.signal_variance <= 0:
            raise ValueError("signal_variance must be positive")
        if not self.length_scales or any(l <= 0 for l in self.length_scales):
            raise ValueError("length scales must be positive")
        if self.noise < 1e-12:
            raise ValueError("noise must be at least 1e-12")
        if self.kernel not in KERNELS:
            raise ValueError(f"unsupported kernel {self.kernel!r}")

    def for_dims(self, n_dims: int) -> "KernelParams":
        """Broadcast a single length scale to ``n_dims`` dimensions."""
        if len(self.length_scales) == n_dims:
            return self
        if len(self.length_scales) == 1:
            return KernelParams(self.signal_variance, self.length_scales * n_dims, self.noise, self.kernel)
        raise ValueError(f"{len(self.length_scales)} length scales for {n_dims} dimensions")

    def to_dict(self) -> dict:
        return {
            "kernel": self.kernel,
            "signal_variance": self.signal_variance,
            "length_scales": list(self.length_scales),
            "noise": self.noise,
        }

    @classmethod
    def from_dict(cls, data) -> "KernelParams":
        return cls(
            signal_variance=float(data.get("signal_variance", 0.25)),
            length_scales=tuple(data.get("length_scales", (0.2,))),
            noise=float(data.get("noise", 1e-6)),
            kernel=data.get("kernel", "squared_exponential"),
        )


def kernel_matrix(A: np.ndarray, B: np.ndarray, params: KernelParams) -> np.ndarray:
    ls = np.asarray(params.length_scales, dtype=float)
    diff = (A[:, None, :] - B[None, :, :]) / ls
    r2 = np.sum(diff * diff, axis=-1)
    if params.kernel == "squared_exponential":
        return params.signal_variance * np.exp(-0.5 * r2)
    r = np.sqrt(r2)
    if params.kernel == "matern12":
        return params.signal_variance * np.exp(-r)
    if params.kernel == "matern32":
        s = np.sqrt(3.0) * r
        return params.signal_variance * (1.0 + s) * np.exp(-s)
    s = np.sqrt(5.0) * r
    return params.signal_variance * (1.0 + s + s * s / 3.0) * np.exp(-s)


@dataclass(frozen=True)
class GpSurrogate:
    space: OddSpace
    inputs: np.ndarray  # (n, D) normalized observations, as given
    outputs: np.ndarray  # (n,)
    params: KernelParams
    prior_mean: float = 0.5
    noise_used: float = field(default=0.0, compare=False)
    # duplicates merged by averaging; these are what the factorization covers
    train_inputs: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    train_outputs: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    _chol: Optional[tuple] = field(default=None, repr=False, compare=False)
    _alpha: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @property
    def n_dims(self) -> int:
        return len(self.space.continuous)

    def __len__(self):
        return len(self.outputs)

    def normalize(self, X) -> np.ndarray:
        return normalize(self.space, X)

    def predict_normalized(self, Z) -> tuple[np.ndarray, np.ndarray]:
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        sv = self.params.signal_variance
        if len(self.train_outputs) == 0:
            m = np.full(Z.shape[0], self.prior_mean)
            v = np.full(Z.shape[0], sv)
        else:
            Ks = kernel_matrix(Z, self.train_inputs, self.params)
            m = self.prior_mean + Ks @ self._alpha
            w = cho_solve(self._chol, Ks.T)
            v = sv - np.einsum("ij,ji->i", Ks, w)
        return np.clip(m, 0.0, 1.0), np.maximum(v, 0.0)

    def mean_variance(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Posterior (mean, variance) at raw continuous coordinates ``X`` of shape (n, D)."""
        return self.predict_normalized(self.normalize(X))

    def to_dict(self) -> dict:
        return {
            "space": space_to_dict(self.space),
            "inputs": self.inputs.tolist(),
            "outputs": self.outputs.tolist(),
            "params": self.params.to_dict(),
            "prior_mean": self.prior_mean,
        }


def normalize(space: OddSpace, X) -> np.ndarray:
    """Map continuous coordinates onto the unit hypercube of ``space``."""
    b = space.bounds
    X = np.asarray(X, dtype=float).reshape(-1, len(b))
    return (X - b[:, 0]) / (b[:, 1] - b[:, 0])


def _merge_duplicates(Z: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Average outcomes of coincident inputs.

    The result is in lexicographic input order, which makes a fit independent of
    the order observations arrived in.
    """
    if len(y) == 0:
        return Z, y
    uniq, inverse = np.unique(Z, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    sums = np.bincount(inverse, weights=y, minlength=len(uniq))
    counts = np.bincount(inverse, minlength=len(uniq))
    return uniq, sums / counts


def _fit_normalized(space, Z, y, params, prior_mean) -> GpSurrogate:
    params = params.for_dims(len(space.continuous))
    Z = np.asarray(Z, dtype=float).reshape(-1, len(space.continuous))
    y = np.asarray(y, dtype=float).ravel()
    if len(Z) != len(y):
        raise ValueError(f"{len(Z)} inputs but {len(y)} outcomes")
    Zm, ym = _merge_duplicates(Z, y)
    if len(ym) == 0:
        return GpSurrogate(space, Z, y, params, float(prior_mean), params.noise, Zm, ym)
    K = kernel_matrix(Zm, Zm, params)
    noise = params.noise
    for _ in range(_JITTER_ESCALATIONS):
        try:
            chol = cho_factor(K + noise * np.eye(len(ym)), lower=True)
            break
        except LinAlgError:
            noise *= 10.0
    else:
        raise GpFitError(f"kernel matrix not positive definite even with jitter {noise:g}")
    alpha = cho_solve(chol, ym - prior_mean)
    return GpSurrogate(space, Z, y, params, float(prior_mean), noise, Zm, ym, chol, alpha)


def gp_fit(
    space: OddSpace,
    points: Sequence[OddPoint],
    outcomes: Sequence[float],
    params: KernelParams = KernelParams(),
    prior_mean: float = 0.5,
) -> GpSurrogate:
    """Fit the surrogate to (point, outcome) pairs; outcome 1 marks a failure."""
    if len(points) != len(outcomes):
        raise ValueError(f"{len(points)} points but {len(outcomes)} outcomes")
    Z = normalize(space, space.to_array(points))
    return _fit_normalized(space, Z, outcomes, params, prior_mean)


def gp_predict(model: GpSurrogate, point: OddPoint) -> tuple[float, float]:
    X = model.space.to_array([point])
    m, v = model.mean_variance(X)
    return float(m[0]), float(v[0])


def gp_update(model: GpSurrogate, point: OddPoint, outcome: float) -> GpSurrogate:
    """Refit on the training set extended by one observation."""
    z = model.normalize(model.space.to_array([point]))
    Z = np.vstack([model.inputs, z])
    y = np.append(model.outputs, float(outcome))
    return _fit_normalized(model.space, Z, y, model.params, model.prior_mean)


def surrogate_from_dict(data) -> GpSurrogate:
    space = space_from_dict(data["space"])
    Z = np.asarray(data["inputs"], dtype=float).reshape(-1, len(space.continuous))
    return _fit_normalized(
        space, Z, data["outputs"], KernelParams.from_dict(data["params"]), data["prior_mean"]
    )


def save_surrogate(model: GpSurrogate, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=2) + "\n")


def load_surrogate(path) -> GpSurrogate:
    return surrogate_from_dict(json.loads(Path(path).read_text()))
