"""Pose and mesh error metrics in millimetres, plus visibility-label accuracy."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

M_TO_MM = 1000.0
AXES = ("x", "y", "z")


class DegenerateAlignmentError(ValueError):
    """Procrustes alignment needs at least three non-collinear points."""


def _as_points(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"{name}: expected shape (N, 3), got {a.shape}")
    return a


def _root_aligned_error(pred, gt, pred_root, gt_root) -> float:
    return float(np.mean(np.linalg.norm((pred - pred_root) - (gt - gt_root), axis=1)))


def mpjpe(pred, gt, root_index: int = 0) -> float:
    """Mean joint distance after translating both sets so the root joints coincide."""
    pred, gt = _as_points(pred, "pred"), _as_points(gt, "gt")
    if pred.shape != gt.shape:
        raise ValueError(f"pred {pred.shape} and gt {gt.shape} differ in shape")
    return _root_aligned_error(pred, gt, pred[root_index], gt[root_index])


def mpve(pred_vertices, gt_vertices, pred_root=None, gt_root=None) -> float:
    """Mean vertex distance after root alignment.

    ``pred_root``/``gt_root`` are the root joint positions; when omitted the
    vertices are assumed to be root-relative already.
    """
    pred, gt = _as_points(pred_vertices, "pred"), _as_points(gt_vertices, "gt")
    if pred.shape != gt.shape:
        raise ValueError(f"pred {pred.shape} and gt {gt.shape} differ in shape")
    pr = np.zeros(3) if pred_root is None else np.asarray(pred_root, dtype=np.float64)
    gr = np.zeros(3) if gt_root is None else np.asarray(gt_root, dtype=np.float64)
    return _root_aligned_error(pred, gt, pr, gr)


def procrustes_align(pred, gt):
    """Similarity transform ``(s, R, t)`` minimising ``sum |s R p_i + t - g_i|^2``.

    Solved in closed form from the centred cross-covariance; a reflection in
    the orthogonal factor is corrected so that ``det R = +1``.
    """
    pred, gt = _as_points(pred, "pred"), _as_points(gt, "gt")
    if pred.shape != gt.shape:
        raise ValueError(f"pred {pred.shape} and gt {gt.shape} differ in shape")
    if len(pred) < 3:
        raise DegenerateAlignmentError(f"need at least 3 points, got {len(pred)}")
    mp, mg = pred.mean(axis=0), gt.mean(axis=0)
    P, G = pred - mp, gt - mg
    var_p = np.sum(P ** 2)
    sv_p = np.linalg.svd(P, compute_uv=False)
    if var_p < 1e-18 or sv_p[1] <= 1e-9 * sv_p[0]:
        raise DegenerateAlignmentError("points are collinear or coincident")
    U, S, Vt = np.linalg.svd(G.T @ P)
    d = np.sign(np.linalg.det(U @ Vt))
    E = np.diag([1.0, 1.0, d])
    R = U @ E @ Vt
    s = float(np.sum(S * np.diag(E)) / var_p)
    t = mg - s * R @ mp
    return s, R, t


def apply_similarity(points, s, R, t) -> np.ndarray:
    return s * np.asarray(points, dtype=np.float64) @ np.asarray(R).T + t


def pa_mpjpe(pred, gt) -> float:
    """Mean joint distance after similarity Procrustes alignment of ``pred`` onto ``gt``."""
    s, R, t = procrustes_align(pred, gt)
    aligned = apply_similarity(pred, s, R, t)
    return float(np.mean(np.linalg.norm(aligned - np.asarray(gt, dtype=np.float64), axis=1)))


def visibility_accuracy(pred_labels, gt_labels) -> np.ndarray:
    """Fraction of matching binary labels per axis (x, y, z)."""
    p = np.asarray(pred_labels).astype(bool)
    g = np.asarray(gt_labels).astype(bool)
    if p.shape != g.shape or p.ndim != 2 or p.shape[1] != 3:
        raise ValueError(f"labels must share an (N, 3) shape, got {p.shape} and {g.shape}")
    if len(p) == 0:
        return np.full(3, np.nan)
    return (p == g).mean(axis=0)


@dataclass
class MetricsReport:
    mpjpe_mm: float
    pa_mpjpe_mm: float
    mpve_mm: float
    per_example: list = field(default_factory=list)
    visibility_accuracy: dict | None = None

    def to_dict(self) -> dict:
        d = {"mpjpe_mm": self.mpjpe_mm, "pa_mpjpe_mm": self.pa_mpjpe_mm, "mpve_mm": self.mpve_mm,
             "per_example": self.per_example}
        if self.visibility_accuracy is not None:
            d["visibility_accuracy"] = self.visibility_accuracy
        return d

    def write_csv(self, path) -> None:
        cols = ["example", "mpjpe_mm", "pa_mpjpe_mm", "mpve_mm"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
            w.writeheader()
            for row in self.per_example:
                w.writerow(row)


def evaluate_examples(examples, root_index: int = 0) -> MetricsReport:
    """Aggregate metrics over examples.

    Each example is a mapping with ``name``, ``pred_joints``, ``gt_joints``
    (metres, same frame convention) and optionally ``pred_vertices``,
    ``gt_vertices``, ``pred_visibility``, ``gt_visibility``.
    """
    rows, vis_p, vis_g = [], [], []
    for i, ex in enumerate(examples):
        pj = _as_points(ex["pred_joints"], "pred_joints") * M_TO_MM
        gj = _as_points(ex["gt_joints"], "gt_joints") * M_TO_MM
        row = {"example": ex.get("name", str(i)), "mpjpe_mm": mpjpe(pj, gj, root_index),
               "pa_mpjpe_mm": pa_mpjpe(pj, gj)}
        if ex.get("pred_vertices") is not None and ex.get("gt_vertices") is not None:
            row["mpve_mm"] = mpve(np.asarray(ex["pred_vertices"]) * M_TO_MM, np.asarray(ex["gt_vertices"]) * M_TO_MM,
                                  pj[root_index], gj[root_index])
        else:
            row["mpve_mm"] = float("nan")
        if row["pa_mpjpe_mm"] > row["mpjpe_mm"] + 1e-9:
            # least-squares alignment can lose to root alignment when one joint is a far outlier
            log.warning("%s: pa_mpjpe %.3f mm exceeds mpjpe %.3f mm", row["example"], row["pa_mpjpe_mm"],
                        row["mpjpe_mm"])
        rows.append(row)
        if ex.get("pred_visibility") is not None and ex.get("gt_visibility") is not None:
            vis_p.append(np.asarray(ex["pred_visibility"]))
            vis_g.append(np.asarray(ex["gt_visibility"]))
    if not rows:
        raise ValueError("no examples to evaluate")
    mean = lambda k: float(np.mean([r[k] for r in rows]))
    acc = None
    if vis_p:
        a = visibility_accuracy(np.concatenate(vis_p), np.concatenate(vis_g))
        acc = dict(zip(AXES, map(float, a)))
    return MetricsReport(mean("mpjpe_mm"), mean("pa_mpjpe_mm"), mean("mpve_mm"), rows, acc)
