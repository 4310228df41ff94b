"""Test-time fitting of pose, shape and root translation to dense-body observations."""
from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .body_model import BodyModel, forward, matrix_to_axis_angle, rodrigues
from .heatmaps import from_grid
from .objectives import LossWeights, ZeroWeightWarning, total_fit_objective
from .observations import Observations
from .prior import GMMPrior

log = logging.getLogger(__name__)

BETA_LIMIT = 5.0
VISIBLE_THRESHOLD = 0.5
MIN_KABSCH_JOINTS = 3


class NumericalError(RuntimeError):
    """The objective or its gradient became non-finite."""


@dataclass(frozen=True)
class FitConfig:
    max_iters: int = 100
    learning_rate: float = 0.05
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_final_factor: float = 1.0  # < 1 decays the learning rate geometrically to this fraction by the last step
    rel_tol: float = 1e-6
    patience: int = 5
    # a step raising the objective by more than backtrack_tol over the best
    # accepted value is undone and the learning rate is scaled by backtrack_factor
    backtrack_tol: float = 0.05
    backtrack_factor: float = 0.5
    beta_limit: float = BETA_LIMIT
    weights: LossWeights = field(default_factory=LossWeights)
    weighting: str = "visibility"
    edge_regularizer: bool = False
    freeze_translation: bool = False
    seed: int = 0

    def __post_init__(self):
        if int(self.max_iters) < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 < self.lr_final_factor <= 1:
            raise ValueError(f"lr_final_factor must lie in (0, 1], got {self.lr_final_factor}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_eps > 0):
            raise ValueError("Adam moments must lie in [0, 1) and eps must be positive")
        if not (self.backtrack_tol > 0 and 0 < self.backtrack_factor <= 1):
            raise ValueError("backtrack_tol must be positive and backtrack_factor in (0, 1]")
        if self.weighting not in ("visibility", "uniform"):
            raise ValueError(f"weighting must be 'visibility' or 'uniform', got {self.weighting!r}")
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights.from_dict(self.weights))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown fit config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True, eq=False)
class FitProblem:
    model: BodyModel
    observations: Observations
    prior: GMMPrior | None = None

    def __post_init__(self):
        self.observations.check_model(self.model)
        if self.prior is not None and self.prior.dim != 3 * (self.model.n_kin - 1):
            raise ValueError(f"prior dimension {self.prior.dim} does not match {3 * (self.model.n_kin - 1)} "
                             "body pose parameters")


@dataclass
class FitResult:
    theta: np.ndarray
    beta: np.ndarray
    transl: np.ndarray
    objective: float
    trace: list
    n_iters: int
    converged: bool
    low_confidence_init: bool = False
    stop_reason: str = "max_iters"

    def to_dict(self) -> dict:
        return {"theta": self.theta.tolist(), "beta": self.beta.tolist(), "transl": self.transl.tolist(),
                "objective": self.objective, "n_iters": self.n_iters, "converged": self.converged,
                "stop_reason": self.stop_reason, "low_confidence_init": self.low_confidence_init,
                "trace": self.trace}

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        return cls(np.asarray(d["theta"], dtype=np.float64), np.asarray(d["beta"], dtype=np.float64),
                   np.asarray(d["transl"], dtype=np.float64), float(d["objective"]), list(d["trace"]),
                   int(d["n_iters"]), bool(d["converged"]), bool(d.get("low_confidence_init", False)),
                   d.get("stop_reason", "max_iters"))


# --------------------------------------------------------------------------
# initialisation


def kabsch_rotation(source, target) -> np.ndarray:
    """Proper rotation ``R`` minimising ``sum |R s_i - t_i|^2`` over centred point sets."""
    S = np.asarray(source, dtype=np.float64)
    T = np.asarray(target, dtype=np.float64)
    S = S - S.mean(axis=0)
    T = T - T.mean(axis=0)
    U, _, Vt = np.linalg.svd(T.T @ S)
    d = np.sign(np.linalg.det(U @ Vt)) or 1.0
    return U @ np.diag([1.0, 1.0, d]) @ Vt


def _fully_visible(S) -> np.ndarray:
    return np.all(np.asarray(S) >= VISIBLE_THRESHOLD, axis=1)


def estimate_root_depth(model: BodyModel, obs: Observations) -> float | None:
    """Root depth that makes back-projected mesh edges as long as the rest edges.

    Back-projecting grid coordinates with root depth ``Z`` gives points
    ``Z u_i + w_i``, so the summed squared length of edges between fully
    visible vertices is a quadratic in ``Z``; its larger root is returned
    (``None`` when no such edge exists or the quadratic has no positive root).
    """
    g = obs.vertices
    vis = _fully_visible(obs.vertex_visibility)
    f = model.faces
    a = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
    b = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    keep = vis[a] & vis[b]
    if not keep.any():
        return None
    a, b = a[keep], b[keep]
    unit = from_grid(obs.camera, obs.grid, obs.crop, g, 1.0) - from_grid(obs.camera, obs.grid, obs.crop, g, 0.0)
    offs = from_grid(obs.camera, obs.grid, obs.crop, g, 0.0)
    du, dw = unit[a] - unit[b], offs[a] - offs[b]
    rest = model.template_vertices
    target = np.sum((rest[a] - rest[b]) ** 2)
    qa, qb, qc = np.sum(du * du), 2.0 * np.sum(du * dw), np.sum(dw * dw) - target
    disc = qb * qb - 4.0 * qa * qc
    if qa <= 0 or disc < 0:
        return None
    z = (-qb + np.sqrt(disc)) / (2.0 * qa)
    return float(z) if z > 0 else None


def init_params(problem: FitProblem):
    """Deterministic starting point ``(theta0, beta0, t0, low_confidence)``.

    The body pose starts at the mean of the heaviest prior component (zero
    without a prior) and the shape at zero.  The global rotation aligns the
    visible observed joints to the model joints by Kabsch; the translation is
    the median offset between them.
    """
    model, obs, prior = problem.model, problem.observations, problem.prior
    theta = np.zeros((model.n_kin, 3))
    body_idx = np.arange(model.n_kin) != model.root_index
    if prior is not None:
        theta[body_idx] = prior.means[int(np.argmax(prior.weights))].reshape(-1, 3)
    beta = np.zeros(model.n_betas)

    root_depth = obs.root_depth
    if root_depth is None:
        root_depth = estimate_root_depth(model, obs)
    if root_depth is None:
        root_depth = 1.0 + obs.camera.fx * 1.7 / max(obs.crop.width, obs.crop.height)
        log.warning("root depth unavailable; falling back to %.3f m from the crop size", root_depth)

    observed = from_grid(obs.camera, obs.grid, obs.crop, obs.joints, root_depth)
    ref = forward(model, theta, beta).joints_out
    vis = _fully_visible(obs.joint_visibility)
    low_confidence = int(vis.sum()) < MIN_KABSCH_JOINTS
    if low_confidence:
        log.warning("only %d visible joints; global rotation initialised to zero", int(vis.sum()))
        R = np.eye(3)
        pts = observed[vis] if vis.any() else observed
        refs = ref[vis] if vis.any() else ref
    else:
        pts, refs = observed[vis], ref[vis]
        R = kabsch_rotation(refs, pts)
        theta[model.root_index] = matrix_to_axis_angle(R @ rodrigues(theta[model.root_index]))
    t = np.median(pts - refs @ R.T, axis=0)
    if obs.root_depth is not None:
        t[2] = obs.root_depth
    return theta, beta, t, low_confidence


# --------------------------------------------------------------------------
# optimisation


def gradient(objective, params):
    """Gradient of an objective given as ``f(params, return_grad=True) -> (value, grad)``."""
    params = np.asarray(params, dtype=np.float64)
    if not np.all(np.isfinite(params)):
        raise NumericalError("parameters must be finite")
    _, g = objective(params, return_grad=True)
    return np.asarray(g, dtype=np.float64)


def learning_rate_at(step: int, config: FitConfig) -> float:
    """Learning rate of Adam step ``step`` (from 1) under geometric decay."""
    if config.lr_final_factor == 1.0:
        return config.learning_rate
    return config.learning_rate * config.lr_final_factor ** ((step - 1) / max(config.max_iters - 1, 1))


def adam_step(x, g, m, v, step: int, config: FitConfig, lr: float | None = None):
    """One Adam update (``step`` counts from 1); returns ``(x, m, v)``.

    ``lr`` defaults to the scheduled rate of ``step``.
    """
    m = config.adam_beta1 * m + (1.0 - config.adam_beta1) * g
    v = config.adam_beta2 * v + (1.0 - config.adam_beta2) * g * g
    m_hat = m / (1.0 - config.adam_beta1 ** step)
    v_hat = v / (1.0 - config.adam_beta2 ** step)
    if lr is None:
        lr = learning_rate_at(step, config)
    return x - lr * m_hat / (np.sqrt(v_hat) + config.adam_eps), m, v


def _first_bad_term(terms: dict) -> str | None:
    for k, v in terms.items():
        if not np.isfinite(v):
            return k
    return None


def fit(problem: FitProblem, config: FitConfig = FitConfig(), init=None) -> FitResult:
    """Minimise the visibility-weighted objective with Adam.

    Stops after ``config.max_iters`` Adam steps or once the best objective
    has decreased by less than ``rel_tol`` (relative) over ``patience``
    accepted steps.  A step that lifts the objective more than
    ``backtrack_tol`` above the best accepted value is rejected: parameters
    and moments return to that best iterate and the learning rate shrinks.
    The trace holds the per-term losses of every evaluated iterate, with
    ``"accepted"`` marking the ones the optimiser kept.
    """
    model, obs = problem.model, problem.observations
    nk3, nb = 3 * model.n_kin, model.n_betas
    low_conf = False
    if init is None:
        theta, beta, t, low_conf = init_params(problem)
    else:
        theta, beta, t = (np.asarray(p, dtype=np.float64) for p in init)
    x = np.concatenate([np.reshape(theta, -1), beta, t])

    def evaluate(x):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ZeroWeightWarning)
            value, terms, g = total_fit_objective(
                model, x[:nk3], x[nk3:nk3 + nb], x[nk3 + nb:], obs, config.weights, problem.prior,
                weighting=config.weighting, edge_regularizer=config.edge_regularizer, return_grad=True)
        grad = np.concatenate([g["theta"].reshape(-1), g["beta"], g["transl"]])
        if config.freeze_translation:
            grad[nk3 + nb:] = 0.0
        return value, terms, grad

    m = np.zeros_like(x)
    v = np.zeros_like(x)
    trace, best = [], []
    snapshot = None  # (x, m, v, value, grad, adam_step) of the best accepted iterate
    lr_scale, step = 1.0, 0
    converged, reason = False, "max_iters"
    for it in range(config.max_iters + 1):
        value, terms, grad = evaluate(x)
        bad = _first_bad_term(terms)
        if bad is not None or not np.all(np.isfinite(grad)):
            where = "initialisation" if it == 0 else f"iteration {it}"
            raise NumericalError(f"non-finite objective term {bad or 'gradient'!r} at {where}")
        accepted = snapshot is None or value <= snapshot[3] + config.backtrack_tol * abs(snapshot[3])
        trace.append({"iter": it, **terms, "accepted": accepted})
        log.debug("iter %d objective %.6g%s", it, value, "" if accepted else " (rejected)")
        if accepted:
            best.append(min(value, best[-1]) if best else value)
            if snapshot is None or value <= snapshot[3]:
                snapshot = (x.copy(), m.copy(), v.copy(), value, grad, step)
            if len(best) > config.patience:
                # best-so-far, so that Adam's oscillation on the L1 terms is not mistaken for convergence
                old = best[-1 - config.patience]
                if old - best[-1] < config.rel_tol * max(abs(old), 1e-12):
                    converged, reason = True, "rel_tol"
                    break
        else:
            x, m, v, _, grad, step = (a.copy() if isinstance(a, np.ndarray) else a for a in snapshot)
            lr_scale *= config.backtrack_factor
        if it == config.max_iters:
            break
        step += 1
        x, m, v = adam_step(x, grad, m, v, step, config, lr_scale * learning_rate_at(it + 1, config))
        x[nk3:nk3 + nb] = np.clip(x[nk3:nk3 + nb], -config.beta_limit, config.beta_limit)

    final = trace[-1] if trace[-1]["accepted"] else None
    if final is None:
        # the budget ran out on a rejected step: report the best iterate instead
        x, value = snapshot[0], snapshot[3]
    return FitResult(theta=x[:nk3].reshape(model.n_kin, 3).copy(), beta=x[nk3:nk3 + nb].copy(),
                     transl=x[nk3 + nb:].copy(), objective=float(value), trace=trace,
                     n_iters=len(trace) - 1, converged=converged, low_confidence_init=low_conf,
                     stop_reason=reason)
