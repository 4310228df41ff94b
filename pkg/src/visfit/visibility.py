"""Visibility labels: truncation from projection, occlusion from a z-buffer or
from dense UV correspondence.

Images here are crop rasters: pixel ``(row, col)`` has its centre at
``(col + 0.5, row + 0.5)`` in raster units, and the raster spans the crop box.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .body_model import BodyModel
from .heatmaps import CropBox, PerspectiveCamera, project

DEPTH_TIE_EPS = 1e-9
JOINT_VISIBLE_FRACTION = 0.2


class UnknownPartError(ValueError):
    """IUV map references a part id the body model does not have."""

    def __init__(self, parts):
        self.parts = sorted(int(p) for p in parts)
        super().__init__(f"IUV part ids not present in the body model: {self.parts}")


@dataclass(frozen=True, eq=False)
class DenseUVMap:
    """Per-pixel body-part index (0 = background) and chart coordinates."""

    part: np.ndarray  # (H, W) int
    u: np.ndarray  # (H, W) float in [0, 1]
    v: np.ndarray

    def __post_init__(self):
        part = np.asarray(self.part, dtype=np.int64)
        u = np.asarray(self.u, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if not (part.shape == u.shape == v.shape and part.ndim == 2):
            raise ValueError(f"IUV channels disagree in shape: {part.shape}, {u.shape}, {v.shape}")
        if np.any(part < 0):
            raise ValueError("IUV part ids must be non-negative")
        bg = part == 0
        u = np.where(bg, 0.0, u)
        v = np.where(bg, 0.0, v)
        object.__setattr__(self, "part", part)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def height(self) -> int:
        return self.part.shape[0]

    @property
    def width(self) -> int:
        return self.part.shape[1]

    @classmethod
    def empty(cls, width: int, height: int) -> "DenseUVMap":
        z = np.zeros((height, width))
        return cls(z.astype(np.int64), z, z)


@dataclass(frozen=True, eq=False)
class Correspondence:
    """Pixel-to-vertex map and its inverse.

    ``pixels[i] = (row, col)`` maps to ``vertex_ids[i]``; the inverse lists
    are derived from the same arrays, so both directions always agree.
    """

    pixels: np.ndarray  # (P, 2) int, row-major order
    vertex_ids: np.ndarray  # (P,) int
    n_vertices: int
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "pixels", np.asarray(self.pixels, dtype=np.int64).reshape(-1, 2))
        object.__setattr__(self, "vertex_ids", np.asarray(self.vertex_ids, dtype=np.int64).reshape(-1))
        if len(self.pixels) != len(self.vertex_ids):
            raise ValueError("pixels and vertex_ids differ in length")

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.vertex_ids, minlength=self.n_vertices)

    def vertex_to_pixels(self, vertex: int) -> np.ndarray:
        return self.pixels[self.vertex_ids == vertex]

    def pixel_lists(self) -> list:
        order = np.argsort(self.vertex_ids, kind="stable")
        splits = np.cumsum(self.counts)[:-1]
        return np.split(self.pixels[order], splits)

    def centroids(self) -> np.ndarray:
        """Mean (col + 0.5, row + 0.5) raster position per vertex; NaN when unmapped."""
        counts = self.counts
        centre = self.pixels[:, ::-1] + 0.5
        sums = np.zeros((self.n_vertices, 2))
        np.add.at(sums, self.vertex_ids, centre)
        with np.errstate(invalid="ignore", divide="ignore"):
            return sums / counts[:, None]

    def to_dict(self) -> dict:
        return {
            "width": self.width, "height": self.height, "n_vertices": self.n_vertices,
            "pixel_to_vertex": np.column_stack([self.pixels, self.vertex_ids]).tolist(),
            "vertex_to_pixel": {str(v): p.tolist() for v, p in enumerate(self.pixel_lists()) if len(p)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Correspondence":
        table = np.asarray(d["pixel_to_vertex"], dtype=np.int64).reshape(-1, 3)
        return cls(table[:, :2], table[:, 2], int(d["n_vertices"]), int(d["width"]), int(d["height"]))


@dataclass(frozen=True, eq=False)
class Raster:
    depth: np.ndarray  # (H, W), inf where nothing is drawn
    face_id: np.ndarray  # (H, W), -1 where nothing is drawn
    bary: np.ndarray  # (H, W, 3) perspective-correct barycentrics of the winning face
    screen: np.ndarray  # (N_V, 2) vertex positions in raster units
    vertex_depth: np.ndarray  # (N_V,)

    @property
    def covered(self) -> np.ndarray:
        return self.face_id >= 0


@dataclass(frozen=True, eq=False)
class VisibilityLabels:
    joints: np.ndarray  # (N_J, 3) {0, 1}
    vertices: np.ndarray  # (N_V, 3)

    def to_dict(self) -> dict:
        return {"joints": self.joints.astype(int).tolist(), "vertices": self.vertices.astype(int).tolist()}


# --------------------------------------------------------------------------
# truncation


def truncation_labels(coords_grid, D: int) -> np.ndarray:
    """``(N, 2)`` int labels: 1 where ``0 <= coord < D`` on x (col 0) and y (col 1)."""
    c = np.asarray(coords_grid, dtype=np.float64)
    xy = c[..., :2]
    return ((xy >= 0) & (xy < D)).astype(np.int64)


def _resolution(resolution):
    if np.isscalar(resolution):
        return int(resolution), int(resolution)
    w, h = resolution
    return int(w), int(h)


def to_raster(camera: PerspectiveCamera, crop: CropBox, points, resolution) -> np.ndarray:
    """Camera-space points to crop-raster coordinates ``(x, y)``."""
    W, H = _resolution(resolution)
    pix = project(camera, points)
    return np.stack([(pix[..., 0] - crop.x0) * (W / crop.width),
                     (pix[..., 1] - crop.y0) * (H / crop.height)], axis=-1)


# --------------------------------------------------------------------------
# z-buffer


def rasterize_zbuffer(vertices, faces, camera: PerspectiveCamera, crop: CropBox, resolution) -> Raster:
    """Z-buffer rasterisation of a camera-space mesh over the crop.

    Depth is interpolated perspective-correctly (linear in ``1/z``), which is
    the exact depth of the triangle's plane along each pixel ray.  Both
    windings are drawn.  Faces are visited in index order and only a strictly
    nearer fragment (by more than ``1e-9``) replaces the stored one, so the
    lower face id wins ties.  Zero-area triangles are skipped.
    """
    W, H = _resolution(resolution)
    V = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    screen = to_raster(camera, crop, V, (W, H))
    z = V[:, 2]
    depth = np.full((H, W), np.inf)
    face_id = np.full((H, W), -1, dtype=np.int64)
    bary = np.zeros((H, W, 3))

    tri = screen[faces]
    x0, y0 = tri[:, 0, 0], tri[:, 0, 1]
    area = (tri[:, 1, 0] - x0) * (tri[:, 2, 1] - y0) - (tri[:, 2, 0] - x0) * (tri[:, 1, 1] - y0)
    cmin = np.maximum(np.ceil(tri[:, :, 0].min(axis=1) - 0.5), 0).astype(np.int64)
    cmax = np.minimum(np.floor(tri[:, :, 0].max(axis=1) - 0.5), W - 1).astype(np.int64)
    rmin = np.maximum(np.ceil(tri[:, :, 1].min(axis=1) - 0.5), 0).astype(np.int64)
    rmax = np.minimum(np.floor(tri[:, :, 1].max(axis=1) - 0.5), H - 1).astype(np.int64)

    for f in range(len(faces)):
        if abs(area[f]) < 1e-12 or cmin[f] > cmax[f] or rmin[f] > rmax[f]:
            continue
        cols = np.arange(cmin[f], cmax[f] + 1) + 0.5
        rows = np.arange(rmin[f], rmax[f] + 1) + 0.5
        px, py = np.meshgrid(cols, rows)
        (ax, ay), (bx, by), (cx, cy) = tri[f]
        l0 = ((bx - px) * (cy - py) - (cx - px) * (by - py)) / area[f]
        l1 = ((cx - px) * (ay - py) - (ax - px) * (cy - py)) / area[f]
        l2 = 1.0 - l0 - l1
        inside = (l0 >= -1e-12) & (l1 >= -1e-12) & (l2 >= -1e-12)
        if not inside.any():
            continue
        iz = 1.0 / z[faces[f]]
        inv = l0 * iz[0] + l1 * iz[1] + l2 * iz[2]
        d = 1.0 / inv
        rs, cs = slice(rmin[f], rmax[f] + 1), slice(cmin[f], cmax[f] + 1)
        win = inside & (d < depth[rs, cs] - DEPTH_TIE_EPS)
        if not win.any():
            continue
        depth[rs, cs][win] = d[win]
        face_id[rs, cs][win] = f
        b = np.stack([l0 * iz[0], l1 * iz[1], l2 * iz[2]], axis=-1) * d[..., None]
        bary[rs, cs][win] = b[win]
    return Raster(depth, face_id, bary, screen, z.copy())


def occlusion_labels_from_raster(faces, raster: Raster) -> np.ndarray:
    """Per-vertex depth visibility from a z-buffer.

    A vertex is visible when, at some covered pixel, it belongs to the winning
    face and carries that face's largest barycentric weight there, i.e. the
    visible surface sample is closest to that vertex.
    """
    faces = np.asarray(faces, dtype=np.int64)
    covered = raster.covered
    fid = raster.face_id[covered]
    dominant = np.argmax(raster.bary[covered], axis=1)
    sz = np.zeros(len(raster.screen), dtype=np.int64)
    sz[faces[fid, dominant]] = 1
    return sz


# --------------------------------------------------------------------------
# dense UV correspondence


def pixel_to_vertex(iuv: DenseUVMap, model: BodyModel) -> Correspondence:
    """Map every human pixel to the vertex of its part with the nearest UV.

    Ties go to the lowest vertex id.  Raises :class:`UnknownPartError` when the
    map uses a part the model lacks.
    """
    present = np.unique(iuv.part[iuv.part > 0])
    missing = set(present.tolist()) - set(np.unique(model.part_labels).tolist())
    if missing:
        raise UnknownPartError(missing)
    rows, cols = np.nonzero(iuv.part > 0)
    vertex_ids = np.empty(len(rows), dtype=np.int64)
    pix_part = iuv.part[rows, cols]
    pix_uv = np.stack([iuv.u[rows, cols], iuv.v[rows, cols]], axis=1)
    for p in present:
        sel = np.flatnonzero(pix_part == p)
        cand = np.flatnonzero(model.part_labels == p)
        cand_uv = model.vertex_uv[cand]
        for start in range(0, len(sel), 2048):
            chunk = sel[start:start + 2048]
            du = pix_uv[chunk, None, 0] - cand_uv[None, :, 0]
            dv = pix_uv[chunk, None, 1] - cand_uv[None, :, 1]
            vertex_ids[chunk] = cand[np.argmin(du * du + dv * dv, axis=1)]
    return Correspondence(np.column_stack([rows, cols]), vertex_ids, model.n_vertices,
                          iuv.width, iuv.height)


def occlusion_labels_from_uv(corr: Correspondence, n_vertices: int | None = None) -> np.ndarray:
    """1 for every vertex that at least one pixel maps to."""
    n = corr.n_vertices if n_vertices is None else n_vertices
    return (np.bincount(corr.vertex_ids, minlength=n)[:n] >= 1).astype(np.int64)


def joint_depth_visibility(model: BodyModel, vertex_sz, min_fraction: float = JOINT_VISIBLE_FRACTION) -> np.ndarray:
    """Joint occlusion labels from vertex labels.

    Each output joint is tied to the kinematic joint that dominates the
    skinning of its regressor vertices; it counts as visible when at least
    ``min_fraction`` of the vertices whose largest skinning weight belongs to
    that kinematic joint are visible.
    """
    vertex_sz = np.asarray(vertex_sz, dtype=np.float64)
    owner = np.argmax(model.skin_weights, axis=1)
    influence = model.joint_regressor_W @ model.skin_weights
    out = np.zeros(model.n_joints, dtype=np.int64)
    for j in range(model.n_joints):
        members = owner == int(np.argmax(influence[j]))
        if members.any():
            out[j] = int(vertex_sz[members].mean() >= min_fraction)
    return out


def uv_seam_faces(model: BodyModel, ratio: float = 3.0) -> np.ndarray:
    """Faces whose UV cannot be interpolated: they span parts or cross a chart cut.

    A face crosses a cut when one of its edges is stretched in UV, relative to
    its rest-pose length, more than ``ratio`` times the part's median stretch.
    """
    f = model.faces
    parts = model.part_labels[f]
    mixed = ~((parts[:, 0] == parts[:, 1]) & (parts[:, 1] == parts[:, 2]))
    uv = model.vertex_uv[f]
    xyz = model.template_vertices[f]
    nxt = [1, 2, 0]
    duv = np.linalg.norm(uv - uv[:, nxt], axis=2)
    dx = np.linalg.norm(xyz - xyz[:, nxt], axis=2)
    stretch = duv / np.maximum(dx, 1e-12)
    seam = mixed.copy()
    for p in np.unique(parts[:, 0]):
        sel = (parts[:, 0] == p) & ~mixed
        if sel.any():
            typical = np.median(stretch[sel])
            seam[sel] |= np.any(stretch[sel] > ratio * typical, axis=1)
    return seam


def synth_iuv(vertices, model: BodyModel, camera: PerspectiveCamera, crop: CropBox, resolution,
              raster: Raster | None = None) -> DenseUVMap:
    """Render a dense UV map of a camera-space mesh, standing in for a dense-UV estimator.

    Covered pixels take the winning face's part and barycentrically
    interpolated UV.  Faces spanning several parts take the majority part and
    the UV of their dominant vertex in that part; faces that cross a chart
    seam (see :func:`uv_seam_faces`) also snap to the dominant vertex's UV.
    """
    if raster is None:
        raster = rasterize_zbuffer(vertices, model.faces, camera, crop, resolution)
    H, W = raster.face_id.shape
    part = np.zeros((H, W), dtype=np.int64)
    u = np.zeros((H, W))
    v = np.zeros((H, W))
    covered = raster.covered
    fid = raster.face_id[covered]
    b = raster.bary[covered]
    fv = model.faces[fid]
    fparts = model.part_labels[fv]
    fuv = model.vertex_uv[fv]

    smooth = ~uv_seam_faces(model)[fid]

    # majority part; with three different parts the dominant vertex decides
    maj = np.where(fparts[:, 0] == fparts[:, 1], fparts[:, 0],
                   np.where(fparts[:, 2] == fparts[:, 0], fparts[:, 0],
                            np.where(fparts[:, 1] == fparts[:, 2], fparts[:, 1],
                                     fparts[np.arange(len(b)), np.argmax(b, axis=1)])))
    masked = np.where(fparts == maj[:, None], b, -1.0)
    snap = np.argmax(masked, axis=1)
    snapped = fuv[np.arange(len(b)), snap]
    interp = np.einsum("pi,pij->pj", b, fuv)
    uv = np.where(smooth[:, None], interp, snapped)

    part[covered] = maj
    u[covered] = np.clip(uv[:, 0], 0.0, 1.0)
    v[covered] = np.clip(uv[:, 1], 0.0, 1.0)
    return DenseUVMap(part, u, v)


def visibility_labels(model: BodyModel, coords_vertices, coords_joints, vertex_sz, D: int) -> VisibilityLabels:
    """Assemble (sx, sy, sz) triplets for vertices and joints."""
    tv = truncation_labels(coords_vertices, D)
    tj = truncation_labels(coords_joints, D)
    vertex_sz = np.asarray(vertex_sz, dtype=np.int64)
    sv = np.column_stack([tv, vertex_sz])
    sj = np.column_stack([tj, joint_depth_visibility(model, vertex_sz)])
    return VisibilityLabels(sj, sv)


# --------------------------------------------------------------------------
# IUV files


def write_iuv(path, iuv: DenseUVMap, sidecar: bool = False) -> None:
    """Write a 3-channel 8-bit IUV PNG; optionally a lossless JSON sidecar next to it."""
    if iuv.part.max(initial=0) > 255:
        raise ValueError("part ids above 255 do not fit an 8-bit PNG")
    img = np.stack([iuv.part, np.rint(255 * iuv.u), np.rint(255 * iuv.v)], axis=-1).astype(np.uint8)
    Image.fromarray(img, mode="RGB").save(path)
    if sidecar:
        with open(Path(path).with_suffix(".json"), "w") as fh:
            json.dump({"part": iuv.part.tolist(), "u": iuv.u.tolist(), "v": iuv.v.tolist()}, fh)


def read_iuv(path, use_sidecar: bool = True) -> DenseUVMap:
    path = Path(path)
    side = path.with_suffix(".json")
    if use_sidecar and side.exists():
        with open(side) as fh:
            d = json.load(fh)
        return DenseUVMap(np.asarray(d["part"]), np.asarray(d["u"]), np.asarray(d["v"]))
    with Image.open(path) as im:
        img = np.asarray(im.convert("RGB"))
    return DenseUVMap(img[..., 0].astype(np.int64), img[..., 1] / 255.0, img[..., 2] / 255.0)
