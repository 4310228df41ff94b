"""Parametric articulated body: shape blendshapes, axis-angle kinematics,
linear blend skinning and joint regression.

The model layout follows SMPL (template + shape directions + kinematic tree +
skinning weights + joint regressor) but any number of kinematic joints, output
joints and shape coefficients is accepted.  Outputs are root-relative: the
root kinematic joint sits at the origin after skinning.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TWO_PI = 2.0 * np.pi
# below this angle the Rodrigues coefficients switch to their Taylor series
_SMALL_ANGLE = 1e-2


class ModelValidationError(ValueError):
    """Raised when a body model violates one of its structural invariants."""


@dataclass(frozen=True, eq=False)
class BodyModel:
    template_vertices: np.ndarray  # (N_V, 3) metres
    shape_dirs: np.ndarray  # (N_V, 3, N_beta)
    faces: np.ndarray  # (N_F, 3) int
    kin_parents: np.ndarray  # (N_K,) int, -1 at the root
    kin_regressor: np.ndarray  # (N_K, N_V)
    skin_weights: np.ndarray  # (N_V, N_K)
    joint_regressor_W: np.ndarray  # (N_J, N_V)
    part_labels: np.ndarray  # (N_V,) int in [1, N_P]
    vertex_uv: np.ndarray  # (N_V, 2)
    pose_dirs: np.ndarray = field(default_factory=lambda: np.zeros((0, 3, 0)))
    root_index: int = 0
    joint_names: tuple = ()

    def __post_init__(self):
        for name in ("template_vertices", "shape_dirs", "kin_regressor", "skin_weights",
                     "joint_regressor_W", "vertex_uv", "pose_dirs"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for name in ("faces", "kin_parents", "part_labels"):
            arr = np.array(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "joint_names", tuple(self.joint_names))

    @property
    def n_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def n_kin(self) -> int:
        return self.kin_parents.shape[0]

    @property
    def n_joints(self) -> int:
        return self.joint_regressor_W.shape[0]

    @property
    def n_betas(self) -> int:
        return self.shape_dirs.shape[2]

    @property
    def n_parts(self) -> int:
        return int(self.part_labels.max())

    @property
    def kin_order(self) -> np.ndarray:
        """Kinematic joints sorted so every parent precedes its children."""
        return _topological_order(self.kin_parents)

    def shaped_template(self, beta) -> np.ndarray:
        beta = np.asarray(beta, dtype=np.float64)
        return self.template_vertices + self.shape_dirs @ beta

    def validate(self) -> "BodyModel":
        validate_model(self)
        return self


@dataclass(frozen=True, eq=False)
class PosedBody:
    vertices: np.ndarray  # (N_V, 3) root-relative
    joints_kin: np.ndarray  # (N_K, 3)
    joints_out: np.ndarray  # (N_J, 3)


def _topological_order(parents: np.ndarray) -> np.ndarray:
    parents = np.asarray(parents)
    n = len(parents)
    depth = np.full(n, -1)
    for start in range(n):
        chain = []
        j = start
        while j >= 0 and depth[j] < 0:
            chain.append(j)
            if len(chain) > n:
                raise ModelValidationError("kin_parents: cycle detected")
            j = parents[j]
        base = depth[j] if j >= 0 else -1
        for k in reversed(chain):
            base += 1
            depth[k] = base
    return np.argsort(depth, kind="stable")


def validate_model(model: BodyModel, name: str = "model") -> None:
    """Check every structural invariant, raising with a path-qualified message."""
    nv = model.template_vertices.shape[0]

    def fail(path, msg):
        raise ModelValidationError(f"{name}.{path}: {msg}")

    def expect_shape(path, arr, shape):
        if arr.ndim != len(shape) or any(s is not None and a != s for a, s in zip(arr.shape, shape)):
            fail(path, f"expected shape {tuple('*' if s is None else s for s in shape)}, got {arr.shape}")

    expect_shape("template_vertices", model.template_vertices, (None, 3))
    nk = model.kin_parents.shape[0]
    expect_shape("shape_dirs", model.shape_dirs, (nv, 3, None))
    expect_shape("faces", model.faces, (None, 3))
    expect_shape("kin_parents", model.kin_parents, (nk,))
    expect_shape("kin_regressor", model.kin_regressor, (nk, nv))
    expect_shape("skin_weights", model.skin_weights, (nv, nk))
    expect_shape("joint_regressor_W", model.joint_regressor_W, (None, nv))
    expect_shape("part_labels", model.part_labels, (nv,))
    expect_shape("vertex_uv", model.vertex_uv, (nv, 2))
    if model.pose_dirs.size:
        expect_shape("pose_dirs", model.pose_dirs, (nv, 3, 9 * (nk - 1)))

    for fname in ("template_vertices", "shape_dirs", "kin_regressor", "skin_weights",
                  "joint_regressor_W", "vertex_uv"):
        arr = getattr(model, fname)
        if not np.all(np.isfinite(arr)):
            idx = tuple(int(i) for i in np.argwhere(~np.isfinite(arr))[0])
            fail(f"{fname}{list(idx)}", "non-finite value")

    sw = model.skin_weights
    neg = np.argwhere(sw < 0)
    if len(neg):
        fail(f"skin_weights[{neg[0][0]}]", "negative weight")
    row_err = np.abs(sw.sum(axis=1) - 1.0)
    if np.any(row_err > 1e-6):
        i = int(np.argmax(row_err))
        fail(f"skin_weights[{i}]", f"row sums to {sw[i].sum():.9g}, expected 1 within 1e-6")

    roots = np.flatnonzero(model.kin_parents < 0)
    if len(roots) != 1 or roots[0] != model.root_index:
        fail("kin_parents", f"expected exactly one root at index {model.root_index}, found {roots.tolist()}")
    bad = np.flatnonzero((model.kin_parents >= nk) | (model.kin_parents == np.arange(nk)))
    if len(bad):
        fail(f"kin_parents[{bad[0]}]", f"invalid parent {model.kin_parents[bad[0]]}")
    _topological_order(model.kin_parents)

    if model.faces.size and (model.faces.min() < 0 or model.faces.max() >= nv):
        f = int(np.argwhere((model.faces < 0) | (model.faces >= nv))[0][0])
        fail(f"faces[{f}]", f"vertex index out of range [0, {nv})")
    degenerate = np.flatnonzero((model.faces[:, 0] == model.faces[:, 1])
                                | (model.faces[:, 1] == model.faces[:, 2])
                                | (model.faces[:, 0] == model.faces[:, 2]))
    if len(degenerate):
        fail(f"faces[{degenerate[0]}]", "repeated vertex index")
    edges = np.sort(model.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    if np.any(counts > 2):
        fail("faces", "mesh is not edge-manifold (an edge is shared by more than two faces)")

    jr_err = np.abs(model.joint_regressor_W.sum(axis=1) - 1.0)
    if np.any(jr_err > 1e-5):
        j = int(np.argmax(jr_err))
        fail(f"joint_regressor_W[{j}]", f"row sums to {model.joint_regressor_W[j].sum():.9g}, expected 1 within 1e-5")

    if model.part_labels.min() < 1:
        i = int(np.argmin(model.part_labels))
        fail(f"part_labels[{i}]", f"part id {model.part_labels[i]} outside [1, N_P]")
    uv = model.vertex_uv
    if np.any((uv < 0) | (uv > 1)):
        i = int(np.argwhere((uv < 0) | (uv > 1))[0][0])
        fail(f"vertex_uv[{i}]", "uv outside [0, 1]^2")


# --------------------------------------------------------------------------
# rotations


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def canonicalize_axis_angle(aa) -> np.ndarray:
    """Wrap axis-angle vectors with norm >= 2*pi back into [0, 2*pi).

    The represented rotation is unchanged.  Works on (3,) or (..., 3) input.
    """
    aa = np.array(aa, dtype=np.float64)
    norm = np.linalg.norm(aa, axis=-1, keepdims=True)
    wrapped = np.mod(norm, TWO_PI)
    scale = np.divide(wrapped, norm, out=np.ones_like(norm), where=norm >= TWO_PI)
    return aa * scale


def _rodrigues_coeffs(theta: float):
    """a = sin t / t, b = (1 - cos t) / t^2 and their derivatives divided by t."""
    if theta < _SMALL_ANGLE:
        t2 = theta * theta
        a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        da = -1.0 / 3.0 + t2 / 30.0 - t2 * t2 / 840.0
        db = -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0
    else:
        s, c = np.sin(theta), np.cos(theta)
        a = s / theta
        b = (1.0 - c) / theta ** 2
        da = (theta * c - s) / theta ** 3
        db = (theta * s - 2.0 * (1.0 - c)) / theta ** 4
    return a, b, da, db


_BASIS_SKEW = np.array([skew(e) for e in np.eye(3)])


def rodrigues(axis_angle) -> np.ndarray:
    """Rotation matrix of an axis-angle vector (zero vector gives identity)."""
    v = np.asarray(axis_angle, dtype=np.float64)
    theta = float(np.sqrt(v @ v))
    a, b, _, _ = _rodrigues_coeffs(theta)
    K = skew(v)
    return np.eye(3) + a * K + b * (K @ K)


def rodrigues_with_jacobian(axis_angle):
    """Return R and dR/dv as a (3, 3, 3) array indexed [component, row, col]."""
    v = np.asarray(axis_angle, dtype=np.float64)
    theta = float(np.sqrt(v @ v))
    a, b, da, db = _rodrigues_coeffs(theta)
    K = skew(v)
    K2 = K @ K
    R = np.eye(3) + a * K + b * K2
    dR = (a * _BASIS_SKEW
          + b * (_BASIS_SKEW @ K + K @ _BASIS_SKEW)
          + (da * v)[:, None, None] * K
          + (db * v)[:, None, None] * K2)
    return R, dR


def matrix_to_axis_angle(R) -> np.ndarray:
    """Inverse of :func:`rodrigues`, returning a vector with norm in [0, pi]."""
    R = np.asarray(R, dtype=np.float64)
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(cos)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < 1e-6:
        return 0.5 * w
    if np.pi - angle < 1e-4:
        # near a half turn the antisymmetric part vanishes; use the symmetric part
        S = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(S)))
        axis = S[:, k] / np.sqrt(max(S[k, k], 1e-300))
        if w @ axis < 0:
            axis = -axis
        return axis * angle
    return w * (angle / (2.0 * np.sin(angle)))


# --------------------------------------------------------------------------
# forward kinematics and skinning


def regress_joints(vertices, W) -> np.ndarray:
    vertices = np.asarray(vertices, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or vertices.ndim != 2 or W.shape[1] != vertices.shape[0]:
        raise ValueError(f"regressor of shape {W.shape} cannot act on vertices of shape {vertices.shape}")
    return W @ vertices


def _check_params(model: BodyModel, theta, beta):
    theta = np.asarray(theta, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if theta.size != model.n_kin * 3:
        raise ValueError(f"pose: expected {model.n_kin * 3} values ({model.n_kin}x3), got shape {theta.shape}")
    if beta.shape != (model.n_betas,):
        raise ValueError(f"shape: expected ({model.n_betas},), got {beta.shape}")
    if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(beta))):
        raise ValueError("pose/shape parameters must be finite")
    return theta.reshape(model.n_kin, 3), beta


def _forward_core(model: BodyModel, theta, beta):
    theta, beta = _check_params(model, theta, beta)
    nk = model.n_kin
    parents = model.kin_parents
    v_shaped = model.shaped_template(beta)
    J = model.kin_regressor @ v_shaped

    rots = np.empty((nk, 3, 3))
    drots = np.empty((nk, 3, 3, 3))
    for k in range(nk):
        rots[k], drots[k] = rodrigues_with_jacobian(theta[k])

    v_base = v_shaped
    if model.pose_dirs.size:
        feat = (rots[np.arange(nk) != model.root_index] - np.eye(3)).reshape(-1)
        v_base = v_shaped + model.pose_dirs @ feat

    M = np.empty((nk, 3, 3))  # global rotations
    p = np.empty((nk, 3))  # global joint positions
    for k in model.kin_order:
        par = parents[k]
        if par < 0:
            M[k] = rots[k]
            p[k] = J[k]
        else:
            M[k] = M[par] @ rots[k]
            p[k] = M[par] @ (J[k] - J[par]) + p[par]

    a = p - np.einsum("kij,kj->ki", M, J)
    sw = model.skin_weights
    T = np.einsum("vk,kij->vij", sw, M)
    posed = np.einsum("vij,vj->vi", T, v_base) + sw @ a
    root = p[model.root_index]
    vertices = posed - root
    cache = dict(theta=theta, beta=beta, v_shaped=v_shaped, v_base=v_base, J=J,
                 rots=rots, drots=drots, M=M, p=p, T=T)
    return vertices, p - root, cache


def forward(model: BodyModel, pose, shape) -> PosedBody:
    """Pose and shape the body; outputs are root-relative.

    ``pose`` is ``(N_K, 3)`` axis-angle (or flat ``3 N_K``), ``shape`` is
    ``(N_beta,)``.
    """
    vertices, joints_kin, _ = _forward_core(model, pose, shape)
    return PosedBody(vertices, joints_kin, model.joint_regressor_W @ vertices)


def forward_with_vjp(model: BodyModel, pose, shape):
    """Like :func:`forward` but also return a vector-Jacobian product.

    The returned ``vjp(grad_vertices, grad_shaped=None)`` maps a gradient on
    the root-relative vertices (and optionally on the shaped rest template)
    to ``(grad_theta (N_K, 3), grad_beta (N_beta,))``.
    """
    vertices, joints_kin, c = _forward_core(model, pose, shape)
    body = PosedBody(vertices, joints_kin, model.joint_regressor_W @ vertices)

    def vjp(grad_vertices, grad_shaped=None):
        return _backward(model, c, np.asarray(grad_vertices, dtype=np.float64), grad_shaped)

    return body, vjp


def _backward(model: BodyModel, c, gV, grad_shaped):
    nk = model.n_kin
    parents = model.kin_parents
    sw = model.skin_weights
    J, M, T, rots = c["J"], c["M"], c["T"], c["rots"]
    root = model.root_index

    gM = np.einsum("vk,vi,vj->kij", sw, gV, c["v_base"])
    ga = sw.T @ gV
    g_vbase = np.einsum("vij,vi->vj", T, gV)
    gp = ga.copy()
    gp[root] -= gV.sum(axis=0)
    gM -= np.einsum("ki,kj->kij", ga, J)
    gJ = -np.einsum("kij,ki->kj", M, ga)

    gR = np.empty((nk, 3, 3))
    for k in model.kin_order[::-1]:
        par = parents[k]
        if par < 0:
            gR[k] = gM[k]
            gJ[k] += gp[k]
        else:
            gR[k] = M[par].T @ gM[k]
            gM[par] += gM[k] @ rots[k].T + np.outer(gp[k], J[k] - J[par])
            gp[par] += gp[k]
            step = M[par].T @ gp[k]
            gJ[k] += step
            gJ[par] -= step

    g_vshaped = g_vbase + model.kin_regressor.T @ gJ
    if grad_shaped is not None:
        g_vshaped = g_vshaped + np.asarray(grad_shaped, dtype=np.float64)
    if model.pose_dirs.size:
        nonroot = np.flatnonzero(np.arange(nk) != root)
        gfeat = np.einsum("vdp,vd->p", model.pose_dirs, g_vbase).reshape(len(nonroot), 3, 3)
        gR[nonroot] += gfeat

    g_theta = np.einsum("kcij,kij->kc", c["drots"], gR)
    g_beta = np.einsum("vdb,vd->b", model.shape_dirs, g_vshaped)
    return g_theta, g_beta


# --------------------------------------------------------------------------
# JSON asset


_ARRAY_KEYS = ("template_vertices", "shape_dirs", "faces", "kin_parents", "kin_regressor",
               "skin_weights", "joint_regressor_W", "part_labels", "vertex_uv")


def model_to_dict(model: BodyModel) -> dict:
    out = {k: getattr(model, k).tolist() for k in _ARRAY_KEYS}
    if model.pose_dirs.size:
        out["pose_dirs"] = model.pose_dirs.tolist()
    out["root_index"] = model.root_index
    if model.joint_names:
        out["joint_names"] = list(model.joint_names)
    return out


def model_from_dict(data: dict, name: str = "model") -> BodyModel:
    missing = [k for k in _ARRAY_KEYS if k not in data]
    if missing:
        raise ModelValidationError(f"{name}: missing keys {missing}")
    kwargs = {}
    for k in _ARRAY_KEYS:
        try:
            kwargs[k] = np.asarray(data[k], dtype=np.int64 if k in ("faces", "kin_parents", "part_labels") else np.float64)
        except (TypeError, ValueError) as exc:
            raise ModelValidationError(f"{name}.{k}: not a rectangular numeric array ({exc})") from None
    if "shape_dirs" in data and kwargs["shape_dirs"].ndim == 2:
        kwargs["shape_dirs"] = kwargs["shape_dirs"].reshape(-1, 3, 0)
    if data.get("pose_dirs"):
        kwargs["pose_dirs"] = np.asarray(data["pose_dirs"], dtype=np.float64)
    model = BodyModel(**kwargs, root_index=int(data.get("root_index", 0)),
                      joint_names=tuple(data.get("joint_names", ())))
    validate_model(model, name)
    return model


def load_model(path) -> BodyModel:
    path = Path(path)
    with open(path) as fh:
        data = json.load(fh)
    return model_from_dict(data, name=str(path))


def save_model(model: BodyModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh)
