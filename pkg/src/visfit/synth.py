"""Synthetic fitting problems with known ground truth."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .body_model import BodyModel, forward
from .heatmaps import CropBox, HeatmapGrid, PerspectiveCamera, project, to_grid
from .observations import Observations
from .prior import GMMPrior
from .visibility import (
    Correspondence, DenseUVMap, occlusion_labels_from_uv, pixel_to_vertex, synth_iuv, visibility_labels,
)

DEFAULT_CAMERA = PerspectiveCamera(fx=500.0, fy=500.0, cx=256.0, cy=256.0, width=512, height=512)
ROOT_DEPTH = 4.0
# the mini model stands upright along +y; a half turn about x puts it upright in camera space
UPRIGHT = np.array([np.pi, 0.0, 0.0])


@dataclass(frozen=True)
class SyntheticProblemSpec:
    seed: int = 0
    pose_noise: float = 0.35  # std of body joint rotations (rad)
    pose_clip: float = 3.0  # body rotations clipped to +-pose_clip * pose_noise
    global_noise: float = 0.3  # std of the global orientation around upright (rad)
    shape_noise: float = 1.0
    occluded_fraction: float = 0.0  # vertices forced to sz=0 with corrupted observations
    occlusion_pattern: str = "blob"  # "blob": nearest vertices to a random image point; "random": scattered
    corrupt_joints: bool = False  # also hide and corrupt joints whose vertices become mostly hidden
    corruption: str = "uniform"  # "uniform": redraw anywhere in the grid; "gaussian": add noise
    corruption_scale: float = 10.0  # std of the gaussian corruption (grid units)
    crop_shift: float = 0.0  # max crop shift as a fraction of the crop size
    crop_scale: float = 1.1
    obs_noise: float = 0.0  # std of observation noise (grid units)
    full_visibility: bool = False  # start from all-ones visibility instead of rendered labels
    iuv_resolution: int = 128
    pose_from_prior: bool = False

    def __post_init__(self):
        for name in ("occluded_fraction", "crop_shift"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {val}")
        for name in ("pose_noise", "global_noise", "shape_noise", "corruption_scale", "obs_noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.occlusion_pattern not in ("blob", "random"):
            raise ValueError(f"occlusion_pattern must be 'blob' or 'random', got {self.occlusion_pattern!r}")
        if self.corruption not in ("uniform", "gaussian"):
            raise ValueError(f"corruption must be 'uniform' or 'gaussian', got {self.corruption!r}")
        if self.crop_scale <= 0 or self.iuv_resolution < 1:
            raise ValueError("crop_scale and iuv_resolution must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticProblemSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synth keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    theta: np.ndarray
    beta: np.ndarray
    transl: np.ndarray
    vertices: np.ndarray  # root-relative, metres
    joints: np.ndarray  # root-relative output joints, metres
    visibility_joints: np.ndarray  # clean labels before any corruption
    visibility_vertices: np.ndarray

    def to_dict(self) -> dict:
        return {k: np.asarray(getattr(self, k)).tolist() for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(**{k: np.asarray(d[k], dtype=np.float64) for k in cls.__dataclass_fields__})


@dataclass(frozen=True, eq=False)
class SyntheticProblem:
    spec: SyntheticProblemSpec
    observations: Observations
    truth: GroundTruth
    iuv: DenseUVMap
    correspondence: Correspondence


def body_height(model: BodyModel, beta) -> float:
    """Vertical extent of the shaped rest template."""
    v = model.shaped_template(beta)
    return float(v[:, 1].max() - v[:, 1].min())


def sample_parameters(model: BodyModel, spec: SyntheticProblemSpec, rng, prior: GMMPrior | None = None):
    theta = np.zeros((model.n_kin, 3))
    body = np.arange(model.n_kin) != model.root_index
    if spec.pose_from_prior and prior is not None:
        k = rng.choice(prior.n_components, p=prior.weights)
        sample = rng.multivariate_normal(prior.means[k], prior.covariances[k])
        theta[body] = sample.reshape(-1, 3)
    else:
        lim = spec.pose_clip * spec.pose_noise
        theta[body] = np.clip(rng.normal(0.0, spec.pose_noise, (model.n_kin - 1, 3)), -lim, lim)
    theta[model.root_index] = UPRIGHT + rng.normal(0.0, spec.global_noise, 3)
    beta = np.clip(rng.normal(0.0, spec.shape_noise, model.n_betas), -3.0, 3.0)
    transl = np.array([rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), ROOT_DEPTH + rng.uniform(-0.3, 0.3)])
    return theta, beta, transl


def fit_crop(camera: PerspectiveCamera, points, scale: float = 1.1, shift: float = 0.0, rng=None) -> CropBox:
    """Square box around the projected points, optionally shifted by up to ``shift`` of its size."""
    pix = project(camera, points)
    lo, hi = pix.min(axis=0), pix.max(axis=0)
    size = float((hi - lo).max() * scale)
    centre = (lo + hi) / 2.0
    if shift > 0 and rng is not None:
        centre = centre + rng.uniform(-shift, shift, 2) * size
    return CropBox(float(centre[0] - size / 2.0), float(centre[1] - size / 2.0), size, size)


def occluded_vertices(coords, n: int, pattern: str, rng) -> np.ndarray:
    """Sorted ids of ``n`` vertices to hide.

    ``"blob"`` hides the vertices nearest (in image x, y) to a randomly chosen
    vertex, like an occluding object; ``"random"`` hides a uniform sample.
    """
    nv = len(coords)
    if pattern == "random":
        return np.sort(rng.choice(nv, size=n, replace=False))
    centre = coords[rng.integers(nv), :2]
    d2 = np.sum((coords[:, :2] - centre) ** 2, axis=1)
    return np.sort(np.argsort(d2, kind="stable")[:n])


def _corrupt(coords, spec: SyntheticProblemSpec, D: int, rng) -> np.ndarray:
    if spec.corruption == "uniform":
        return rng.uniform(0.0, D, coords.shape)
    return coords + rng.normal(0.0, spec.corruption_scale, coords.shape)


def make_problem(model: BodyModel, spec: SyntheticProblemSpec, prior: GMMPrior | None = None,
                 camera: PerspectiveCamera = DEFAULT_CAMERA, grid: HeatmapGrid = HeatmapGrid()) -> SyntheticProblem:
    """Pose the model, render a UV map, and derive observations with visibility.

    Clean visibility comes from the rendered UV map (truncation from the
    grid coordinates, occlusion from the pixel-to-vertex mapping).  A random
    ``occluded_fraction`` of vertices is then forced to ``sz = 0``, their
    observed coordinates are corrupted, and the pixels mapping to them are
    cleared from the UV map as if an object covered them.
    """
    rng = np.random.default_rng(spec.seed)
    theta, beta, transl = sample_parameters(model, spec, rng, prior)
    body = forward(model, theta, beta)
    V_cam = body.vertices + transl
    J_cam = body.joints_out + transl
    crop = fit_crop(camera, V_cam, spec.crop_scale, spec.crop_shift, rng)
    Vg = to_grid(camera, grid, crop, V_cam, transl[2])
    Jg = to_grid(camera, grid, crop, J_cam, transl[2])

    iuv = synth_iuv(V_cam, model, camera, crop, spec.iuv_resolution)
    # labels are derived from the 8-bit chart values the PNG stores, so re-reading the file reproduces them
    iuv = DenseUVMap(iuv.part, np.rint(255 * iuv.u) / 255.0, np.rint(255 * iuv.v) / 255.0)
    corr = pixel_to_vertex(iuv, model)
    labels = visibility_labels(model, Vg, Jg, occlusion_labels_from_uv(corr, model.n_vertices), grid.D)
    clean_v = labels.vertices.astype(np.float64)
    clean_j = labels.joints.astype(np.float64)
    if spec.full_visibility:
        sv, sj = np.ones_like(clean_v), np.ones_like(clean_j)
    else:
        sv, sj = clean_v.copy(), clean_j.copy()

    obs_v = Vg + rng.normal(0.0, spec.obs_noise, Vg.shape) if spec.obs_noise > 0 else Vg.copy()
    obs_j = Jg + rng.normal(0.0, spec.obs_noise, Jg.shape) if spec.obs_noise > 0 else Jg.copy()
    n_occ = int(round(spec.occluded_fraction * model.n_vertices))
    if n_occ:
        occ = occluded_vertices(Vg, n_occ, spec.occlusion_pattern, rng)
        sv[occ, 2] = 0.0
        obs_v[occ] = _corrupt(obs_v[occ], spec, grid.D, rng)
        if spec.corrupt_joints:
            joint_sz = visibility_labels(model, Vg, Jg, sv[:, 2], grid.D).joints[:, 2]
            hidden = np.flatnonzero((joint_sz == 0) & (sj[:, 2] > 0))
            sj[hidden, 2] = 0.0
            obs_j[hidden] = _corrupt(obs_j[hidden], spec, grid.D, rng)
        # the occluder covers every pixel that maps to a hidden vertex
        covered = corr.pixels[np.isin(corr.vertex_ids, occ)]
        part, u, v = iuv.part.copy(), iuv.u.copy(), iuv.v.copy()
        part[covered[:, 0], covered[:, 1]] = 0
        u[covered[:, 0], covered[:, 1]] = 0.0
        v[covered[:, 0], covered[:, 1]] = 0.0
        iuv = DenseUVMap(part, u, v)
        corr = pixel_to_vertex(iuv, model)

    obs = Observations(obs_j, obs_v, sj, sv, camera, crop, grid)
    truth = GroundTruth(theta, beta, transl, body.vertices, body.joints_out, clean_j, clean_v)
    return SyntheticProblem(spec, obs, truth, iuv, corr)
