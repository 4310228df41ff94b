"""Gaussian-mixture pose prior over the non-root joint rotations."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_LOG_2PI = np.log(2.0 * np.pi)


class PriorValidationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GMMPrior:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, dim)
    covariances: np.ndarray  # (K, dim, dim)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        cov = np.asarray(self.covariances, dtype=np.float64)
        K, dim = mu.shape
        if w.shape != (K,) or cov.shape != (K, dim, dim):
            raise PriorValidationError(
                f"prior shapes disagree: weights {w.shape}, means {mu.shape}, covariances {cov.shape}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise PriorValidationError(f"mixture weights must be non-negative and sum to 1, got sum {w.sum()!r}")
        if not np.allclose(cov, np.swapaxes(cov, 1, 2), atol=1e-12):
            raise PriorValidationError("covariances must be symmetric")
        chol = np.empty_like(cov)
        for k in range(K):
            try:
                chol[k] = np.linalg.cholesky(cov[k])
            except np.linalg.LinAlgError:
                raise PriorValidationError(f"covariances[{k}] is not positive definite") from None
        precision = np.linalg.inv(cov)
        logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
        with np.errstate(divide="ignore"):
            log_norm = np.log(w) - 0.5 * (dim * _LOG_2PI + logdet)
        for name, val in (("weights", w), ("means", mu), ("covariances", cov), ("_precision", precision),
                          ("_log_norm", log_norm)):
            object.__setattr__(self, name, val)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(),
                "covariances": self.covariances.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GMMPrior":
        return cls(np.asarray(d["weights"]), np.asarray(d["means"]), np.asarray(d["covariances"]))


def gmm_nll(theta_body, prior: GMMPrior, return_grad: bool = False):
    """Negative log of the mixture density, evaluated with log-sum-exp."""
    x = np.asarray(theta_body, dtype=np.float64).reshape(-1)
    if x.shape[0] != prior.dim:
        raise ValueError(f"prior has dimension {prior.dim}, got a vector of length {x.shape[0]}")
    diff = x[None, :] - prior.means
    sol = np.einsum("kij,kj->ki", prior._precision, diff)
    maha = np.einsum("ki,ki->k", diff, sol)
    logp = prior._log_norm - 0.5 * maha
    top = logp.max()
    lse = top + np.log(np.exp(logp - top).sum())
    if not return_grad:
        return float(-lse)
    resp = np.exp(logp - lse)
    return float(-lse), resp @ sol


def make_synthetic_prior(dim: int, seed: int = 0, n_components: int = 2, spread: float = 0.25) -> GMMPrior:
    """Small deterministic mixture for tests and synthetic problems.

    The heaviest component sits at the zero pose; the others are random
    nearby modes.  Covariances are random SPD matrices of scale ``spread``.
    """
    rng = np.random.default_rng(seed)
    raw = np.linspace(2.0, 1.0, n_components)
    weights = raw / raw.sum()
    means = rng.normal(scale=0.15, size=(n_components, dim))
    means[0] = 0.0
    covs = np.empty((n_components, dim, dim))
    for k in range(n_components):
        A = rng.normal(scale=0.3, size=(dim, dim)) / np.sqrt(dim)
        covs[k] = spread ** 2 * (np.eye(dim) + A @ A.T)
    return GMMPrior(weights, means, covs)


def load_prior(path) -> GMMPrior:
    with open(Path(path)) as fh:
        return GMMPrior.from_dict(json.load(fh))


def save_prior(prior: GMMPrior, path) -> None:
    with open(path, "w") as fh:
        json.dump(prior.to_dict(), fh)
