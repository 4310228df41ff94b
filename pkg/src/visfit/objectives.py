"""Loss terms for dense-body training and visibility-weighted model fitting.

Every loss returns a float; with ``return_grad=True`` it also returns the
gradient with respect to its continuous inputs.  Coordinate losses are means
(batch-size independent), mesh losses (normal, edge, depth ordering) are sums.
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .body_model import BodyModel, forward_with_vjp
from .heatmaps import to_grid
from .observations import Observations
from .prior import GMMPrior, gmm_nll
from .visibility import Correspondence

BCE_EPS = 1e-7
_EDGE_PAIRS = ((0, 1), (1, 2), (2, 0))


class ZeroWeightWarning(RuntimeWarning):
    """A weighted loss had no weight mass; it evaluated to zero."""


class DegenerateEdgeWarning(RuntimeWarning):
    """A mesh edge shorter than 1e-9 was skipped."""


@dataclass(frozen=True)
class LossWeights:
    joint: float = 1.0
    vert: float = 1.0
    r_joint: float = 1.0
    norm: float = 0.1
    edge: float = 0.1
    vis: float = 1.0
    depth: float = 0.1
    uv: float = 1.0
    smpl: float = 1.0
    smpl_vert: float = 1.0
    smpl_joint: float = 1.0
    prior: float = 1e-3

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {k!r} must be finite and non-negative, got {v!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown loss weights: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})


# --------------------------------------------------------------------------
# coordinate losses


def l1_coord_loss(pred, target, weights=None, return_grad: bool = False):
    """Mean absolute coordinate error, optionally weighted.

    With weights (broadcastable to ``pred``) the result is
    ``sum(w * |pred - target|) / sum(w)``; zero total weight gives 0 and a
    :class:`ZeroWeightWarning`.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"pred {pred.shape} and target {target.shape} differ in shape")
    diff = pred - target
    if weights is None:
        w = np.ones_like(diff)
    else:
        w = np.broadcast_to(np.asarray(weights, dtype=np.float64), diff.shape)
    total = w.sum()
    if total <= 0:
        warnings.warn("all loss weights are zero", ZeroWeightWarning, stacklevel=2)
        return (0.0, np.zeros_like(diff)) if return_grad else 0.0
    # masked entries must not leak NaN/inf from garbage targets
    wabs = np.where(w > 0, w * np.abs(diff), 0.0)
    value = float(wabs.sum() / total)
    if not return_grad:
        return value
    return value, np.where(w > 0, w * np.sign(diff), 0.0) / total


def regressed_joint_loss(vertices, W, joints_target, weights=None, return_grad: bool = False):
    W = np.asarray(W, dtype=np.float64)
    V = np.asarray(vertices, dtype=np.float64)
    if W.shape[1] != V.shape[0]:
        raise ValueError(f"regressor {W.shape} does not match vertices {V.shape}")
    out = l1_coord_loss(W @ V, joints_target, weights, return_grad)
    if not return_grad:
        return out
    value, g = out
    return value, W.T @ g


def smpl_param_loss(theta, beta, theta_target, beta_target, return_grad: bool = False):
    dt = np.asarray(theta, dtype=np.float64) - np.asarray(theta_target, dtype=np.float64)
    db = np.asarray(beta, dtype=np.float64) - np.asarray(beta_target, dtype=np.float64)
    value = float(np.abs(dt).sum() + np.abs(db).sum())
    if not return_grad:
        return value
    return value, (np.sign(dt), np.sign(db))


# --------------------------------------------------------------------------
# mesh regularisers


def face_normals(vertices, faces) -> np.ndarray:
    V = np.asarray(vertices, dtype=np.float64)
    tri = V[np.asarray(faces)]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def _edges(V, faces):
    a = np.concatenate([faces[:, i] for i, _ in _EDGE_PAIRS])
    b = np.concatenate([faces[:, j] for _, j in _EDGE_PAIRS])
    return a, b, V[a] - V[b]


def normal_loss(vertices, faces, target_normals, return_grad: bool = False):
    """Sum over faces and their three edges of ``|<unit edge, target normal>|``."""
    V = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    n = np.tile(np.asarray(target_normals, dtype=np.float64), (3, 1))
    a, b, e = _edges(V, faces)
    length = np.linalg.norm(e, axis=1)
    ok = length >= 1e-9
    if not ok.all():
        warnings.warn(f"{int((~ok).sum())} degenerate edges ignored", DegenerateEdgeWarning, stacklevel=2)
    safe = np.where(ok, length, 1.0)
    u = e / safe[:, None]
    dot = np.where(ok, np.einsum("ij,ij->i", u, n), 0.0)
    value = float(np.abs(dot).sum())
    if not return_grad:
        return value
    ge = (np.sign(dot) / safe)[:, None] * (n - dot[:, None] * u)
    ge[~ok] = 0.0
    g = np.zeros_like(V)
    np.add.at(g, a, ge)
    np.add.at(g, b, -ge)
    return value, g


def edge_loss(vertices, vertices_target, faces, return_grad: bool = False):
    """Sum over faces and edges of the absolute edge-length difference.

    The gradient is returned for both vertex sets: ``(grad, grad_target)``.
    """
    V = np.asarray(vertices, dtype=np.float64)
    Vt = np.asarray(vertices_target, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    a, b, e = _edges(V, faces)
    _, _, et = _edges(Vt, faces)
    le = np.linalg.norm(e, axis=1)
    lt = np.linalg.norm(et, axis=1)
    d = le - lt
    value = float(np.abs(d).sum())
    if not return_grad:
        return value
    s = np.sign(d)
    ge = (s / np.where(le > 0, le, 1.0))[:, None] * e
    gt = -(s / np.where(lt > 0, lt, 1.0))[:, None] * et
    g = np.zeros_like(V)
    np.add.at(g, a, ge)
    np.add.at(g, b, -ge)
    g_t = np.zeros_like(Vt)
    np.add.at(g_t, a, gt)
    np.add.at(g_t, b, -gt)
    return value, (g, g_t)


# --------------------------------------------------------------------------
# visibility, depth ordering, UV correspondence


def visibility_bce(pred, target, return_grad: bool = False):
    """Mean binary cross entropy with predictions clamped to ``[1e-7, 1 - 1e-7]``."""
    p_raw = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    p = np.clip(p_raw, BCE_EPS, 1.0 - BCE_EPS)
    loss = -(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    value = float(loss.mean())
    if not return_grad:
        return value
    inside = (p_raw > BCE_EPS) & (p_raw < 1.0 - BCE_EPS)
    g = np.where(inside, (p - t) / (p * (1.0 - p)), 0.0) / loss.size
    return value, g


def depth_ordering_loss(coords, sz, part_labels, D: int, return_grad: bool = False):
    """Penalise depth orders that contradict the predicted occlusion.

    Vertices are binned by ``floor`` of their in-frame x, y grid coordinates.
    In every bin holding vertices of at least two parts, the part of the
    vertex with the highest ``sz`` (lowest id on ties) is the front part; the
    bin adds ``relu(max z over front part - min z over the other parts)``.
    The gradient only touches the z column.
    """
    c = np.asarray(coords, dtype=np.float64)
    sz = np.asarray(sz, dtype=np.float64).reshape(-1)
    parts = np.asarray(part_labels)
    grad = np.zeros_like(c)
    inframe = np.all((c[:, :2] >= 0) & (c[:, :2] < D), axis=1)
    ids = np.flatnonzero(inframe)
    if len(ids) < 2:
        return (0.0, grad) if return_grad else 0.0
    bins = np.floor(c[ids, :2]).astype(np.int64)
    key = bins[:, 1] * D + bins[:, 0]
    order = np.lexsort((ids, key))  # pixel-major, then vertex id
    ids, key = ids[order], key[order]
    starts = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
    group = np.cumsum(np.r_[False, key[1:] != key[:-1]])
    pos = np.arange(len(ids))
    big = len(ids)

    s = sz[ids]
    smax = np.maximum.reduceat(s, starts)
    front_pos = np.minimum.reduceat(np.where(s == smax[group], pos, big), starts)
    front_part = parts[ids[front_pos]]
    in_front = parts[ids] == front_part[group]
    z = c[ids, 2]
    zq = np.where(in_front, z, -np.inf)
    zb = np.where(in_front, np.inf, z)
    max_q = np.maximum.reduceat(zq, starts)
    min_b = np.minimum.reduceat(zb, starts)
    active = np.isfinite(min_b) & (max_q > min_b)
    value = float(np.sum(np.where(active, max_q - min_b, 0.0)))
    if not return_grad:
        return value
    arg_q = np.minimum.reduceat(np.where(zq == max_q[group], pos, big), starts)
    arg_b = np.minimum.reduceat(np.where(zb == min_b[group], pos, big), starts)
    np.add.at(grad[:, 2], ids[arg_q[active]], 1.0)
    np.add.at(grad[:, 2], ids[arg_b[active]], -1.0)
    return value, grad


def uv_correspondence_loss(coords, sz, corr: Correspondence, D: int, return_grad: bool = False):
    """``sum_v sz_v * |v_xy - centroid of its pixels|_1`` over mapped vertices.

    Pixel centroids are converted from the correspondence raster to grid
    units.  Gradients are returned for the coordinates and for ``sz``.
    """
    c = np.asarray(coords, dtype=np.float64)
    sz = np.asarray(sz, dtype=np.float64).reshape(-1)
    cent = corr.centroids() * np.array([D / corr.width, D / corr.height])
    mapped = corr.counts > 0
    diff = np.zeros((len(c), 2))
    diff[mapped] = c[mapped, :2] - cent[mapped]
    l1 = np.abs(diff).sum(axis=1)
    value = float(np.sum(sz * l1))
    if not return_grad:
        return value
    g = np.zeros_like(c)
    g[:, :2] = sz[:, None] * np.sign(diff)
    return value, (g, l1)


def training_objective(pred: dict, target: dict, model: BodyModel, weights: LossWeights = LossWeights(),
                       corr: Correspondence | None = None, D: int = 64, fine_tune: bool = False,
                       return_grad: bool = False):
    """Weighted sum of the dense-body training losses.

    ``pred``/``target`` hold ``J``, ``V`` (grid units) and ``S_J``, ``S_V``
    (scores / binary labels).  Depth-ordering and UV terms join only when
    ``fine_tune`` is set.  Returns ``(total, terms)`` and, with
    ``return_grad``, a dict of gradients keyed like ``pred``.
    """
    J, V, SJ, SV = (np.asarray(pred[k], dtype=np.float64) for k in ("J", "V", "S_J", "S_V"))
    Jt, Vt = np.asarray(target["J"]), np.asarray(target["V"])
    terms, grads = {}, {"J": np.zeros_like(J), "V": np.zeros_like(V),
                        "S_J": np.zeros_like(SJ), "S_V": np.zeros_like(SV)}

    def add(name, w, out, *slots):
        value, g = out
        terms[name] = value
        gs = g if isinstance(g, tuple) else (g,)
        for slot, gi in zip(slots, gs):
            if slot is not None:
                grads[slot] = grads[slot] + w * gi

    add("joint", weights.joint, l1_coord_loss(J, Jt, return_grad=True), "J")
    add("vert", weights.vert, l1_coord_loss(V, Vt, return_grad=True), "V")
    add("r_joint", weights.r_joint, regressed_joint_loss(V, model.joint_regressor_W, Jt, return_grad=True), "V")
    add("norm", weights.norm, normal_loss(V, model.faces, face_normals(Vt, model.faces), return_grad=True), "V")
    add("edge", weights.edge, edge_loss(V, Vt, model.faces, return_grad=True), "V", None)
    vj = visibility_bce(SJ, target["S_J"], return_grad=True)
    vv = visibility_bce(SV, target["S_V"], return_grad=True)
    terms["vis"] = vj[0] + vv[0]
    grads["S_J"] += weights.vis * vj[1]
    grads["S_V"] += weights.vis * vv[1]
    if fine_tune:
        dv, gd = depth_ordering_loss(V, SV[:, 2], model.part_labels, D, return_grad=True)
        terms["depth"] = dv
        grads["V"] += weights.depth * gd
        if corr is not None:
            uvv, (gu, gs) = uv_correspondence_loss(V, SV[:, 2], corr, D, return_grad=True)
            terms["uv"] = uvv
            grads["V"] += weights.uv * gu
            grads["S_V"][:, 2] += weights.uv * gs
    total = float(sum(getattr(weights, k) * v for k, v in terms.items()))
    return (total, terms, grads) if return_grad else (total, terms)


# --------------------------------------------------------------------------
# model fitting


def fit_weights(visibility, mode: str = "visibility") -> np.ndarray:
    """Per-coordinate confidence weights from visibility triplets.

    ``"visibility"`` weights each axis by its own score times the occlusion
    score, so a depth-occluded element drops out on every axis while a
    truncated axis only drops itself.  ``"uniform"`` ignores visibility.
    """
    S = np.asarray(visibility, dtype=np.float64)
    if mode == "uniform":
        return np.ones_like(S)
    if mode != "visibility":
        raise ValueError(f"unknown weighting mode {mode!r}")
    return S * S[:, 2:3]


def total_fit_objective(model: BodyModel, theta, beta, transl, obs: Observations,
                        weights: LossWeights = LossWeights(), prior: GMMPrior | None = None, *,
                        weighting: str = "visibility", edge_regularizer: bool = False,
                        return_grad: bool = False):
    """Visibility-weighted fitting objective in heatmap-grid units.

    The posed, root-relative body is placed at ``transl`` in camera space and
    mapped to the grid (root depth = ``transl[2]``); vertex and regressed
    joint coordinates are compared with the observations under per-axis
    visibility weights, plus the GMM prior on the non-root pose and an
    optional edge-length regulariser against the shaped template.

    Returns ``(total, terms)``; with ``return_grad`` a third item holds
    ``{"theta", "beta", "transl"}`` gradients.
    """
    theta = np.asarray(theta, dtype=np.float64).reshape(model.n_kin, 3)
    beta = np.asarray(beta, dtype=np.float64)
    t = np.asarray(transl, dtype=np.float64).reshape(3)
    body, vjp = forward_with_vjp(model, theta, beta)
    cam, grid, crop = obs.camera, obs.grid, obs.crop
    zscale = grid.D / (2.0 * grid.depth_half_range)

    gv, jv = to_grid(cam, grid, crop, body.vertices + t, t[2], return_jacobian=True)
    gj, jj = to_grid(cam, grid, crop, body.joints_out + t, t[2], return_jacobian=True)
    wv = fit_weights(obs.vertex_visibility, weighting)
    wj = fit_weights(obs.joint_visibility, weighting)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ZeroWeightWarning)
        l_v, d_gv = l1_coord_loss(gv, obs.vertices, wv, return_grad=True)
        l_j, d_gj = l1_coord_loss(gj, obs.joints, wj, return_grad=True)
    terms = {"smpl_vert": l_v, "smpl_joint": l_j}
    total = weights.smpl_vert * l_v + weights.smpl_joint * l_j

    body_idx = np.arange(model.n_kin) != model.root_index
    g_prior = None
    if prior is not None:
        l_p, g_prior = gmm_nll(theta[body_idx].reshape(-1), prior, return_grad=True)
        terms["prior"] = l_p
        total += weights.prior * l_p

    g_edge = None
    if edge_regularizer:
        l_e, g_edge = edge_loss(body.vertices, model.shaped_template(beta), model.faces, return_grad=True)
        terms["edge"] = l_e
        total += weights.edge * l_e
    terms["total"] = float(total)
    if not return_grad:
        return float(total), terms

    dPv = weights.smpl_vert * np.einsum("ni,nij->nj", d_gv, jv)
    dPj = weights.smpl_joint * np.einsum("ni,nij->nj", d_gj, jj)
    g_t = dPv.sum(axis=0) + dPj.sum(axis=0)
    # the z grid coordinate is root-relative, so it does not move with transl
    g_t[2] -= zscale * (weights.smpl_vert * d_gv[:, 2].sum() + weights.smpl_joint * d_gj[:, 2].sum())
    gV = dPv + model.joint_regressor_W.T @ dPj
    g_shaped = None
    if g_edge is not None:
        gV = gV + weights.edge * g_edge[0]
        g_shaped = weights.edge * g_edge[1]
    g_theta, g_beta = vjp(gV, g_shaped)
    if g_prior is not None:
        g_theta[body_idx] += weights.prior * g_prior.reshape(-1, 3)
    return float(total), terms, {"theta": g_theta, "beta": g_beta, "transl": g_t}
