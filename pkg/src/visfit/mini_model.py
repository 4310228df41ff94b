"""Deterministic desk-scale body model: a "capsule person".

Every kinematic joint owns one closed capsule running from the joint to its
bone end.  Capsules are triangulated as latitude rings and can be refined by
midpoint subdivision with re-projection onto the capsule surface, so each
level multiplies the face count by exactly four.
"""
from __future__ import annotations

import numpy as np

from .body_model import BodyModel, validate_model

JOINT_NAMES = (
    "pelvis", "spine", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
)
EXTRA_JOINT_NAMES = ("l_hand", "r_hand", "l_toe", "r_toe")

PARENTS = np.array([-1, 0, 1, 2, 1, 4, 5, 1, 7, 8, 0, 10, 11, 0, 13, 14])

# rest pose: y up, facing +z, T-pose arms
REST_JOINTS = np.array([
    [0.00, 0.95, 0.00],
    [0.00, 1.20, 0.00],
    [0.00, 1.45, 0.00],
    [0.00, 1.56, 0.00],
    [0.18, 1.40, 0.00],
    [0.45, 1.40, 0.00],
    [0.70, 1.40, 0.00],
    [-0.18, 1.40, 0.00],
    [-0.45, 1.40, 0.00],
    [-0.70, 1.40, 0.00],
    [0.10, 0.90, 0.00],
    [0.10, 0.50, 0.00],
    [0.10, 0.10, 0.00],
    [-0.10, 0.90, 0.00],
    [-0.10, 0.50, 0.00],
    [-0.10, 0.10, 0.00],
])

# bone end for joints without a child capsule
_TIPS = {
    3: [0.00, 1.74, 0.00],
    6: [0.84, 1.40, 0.00],
    9: [-0.84, 1.40, 0.00],
    12: [0.10, 0.05, 0.14],
    15: [-0.10, 0.05, 0.14],
}
_CHILD = {0: 1, 1: 2, 2: 3, 4: 5, 5: 6, 7: 8, 8: 9, 10: 11, 11: 12, 13: 14, 14: 15}
_RADII = np.array([0.13, 0.14, 0.05, 0.10, 0.05, 0.045, 0.04, 0.05, 0.045, 0.04,
                   0.075, 0.06, 0.045, 0.075, 0.06, 0.045])
# parts: 1 torso, 2 head, 3 left arm, 4 right arm, 5 left leg, 6 right leg
_PART_OF = np.array([1, 1, 2, 2, 3, 3, 3, 4, 4, 4, 5, 5, 5, 6, 6, 6])
_EXTRA_JOINT_OF = (6, 9, 12, 15)

N_SEGMENTS = 8
N_BETAS = 10
_UV_MARGIN = 0.02
_BLEND = 0.25


class _Capsule:
    def __init__(self, start, end, radius):
        self.start = np.asarray(start, dtype=np.float64)
        self.end = np.asarray(end, dtype=np.float64)
        self.radius = float(radius)
        axis = self.end - self.start
        self.length = float(np.linalg.norm(axis))
        self.axis = axis / self.length
        helper = np.eye(3)[int(np.argmin(np.abs(self.axis)))]
        self.f1 = np.cross(self.axis, helper)
        self.f1 /= np.linalg.norm(self.f1)
        self.f2 = np.cross(self.axis, self.f1)

    def local(self, x):
        d = x - self.start
        a = d @ self.axis
        rho = d - np.outer(a, self.axis)
        return a, rho

    def project(self, x):
        a, rho = self.local(x)
        out = np.empty_like(x)
        for i in range(len(x)):
            if a[i] < 0.0:
                d = x[i] - self.start
                out[i] = self.start + self.radius * d / np.linalg.norm(d)
            elif a[i] > self.length:
                d = x[i] - self.end
                out[i] = self.end + self.radius * d / np.linalg.norm(d)
            else:
                out[i] = self.start + a[i] * self.axis + self.radius * rho[i] / np.linalg.norm(rho[i])
        return out

    def base_mesh(self):
        r, L = self.radius, self.length
        # (axial offset, radial scale) of each latitude ring
        c45 = np.sqrt(0.5)
        rings = [(-r * c45, r * c45), (0.0, r), (L / 2, r), (L, r), (L + r * c45, r * c45)]
        phi = 2.0 * np.pi * np.arange(N_SEGMENTS) / N_SEGMENTS
        circle = np.outer(np.cos(phi), self.f1) + np.outer(np.sin(phi), self.f2)
        verts = [self.start - r * self.axis]
        for a, rad in rings:
            verts.extend(self.start + a * self.axis + rad * circle)
        verts.append(self.end + r * self.axis)
        verts = np.array(verts)
        n = N_SEGMENTS
        last = len(verts) - 1
        ring = lambda k, i: 1 + k * n + (i % n)
        faces = []
        for i in range(n):
            faces.append((0, ring(0, i + 1), ring(0, i)))
            faces.append((last, ring(len(rings) - 1, i), ring(len(rings) - 1, i + 1)))
        for k in range(len(rings) - 1):
            for i in range(n):
                faces.append((ring(k, i), ring(k, i + 1), ring(k + 1, i + 1)))
                faces.append((ring(k, i), ring(k + 1, i + 1), ring(k + 1, i)))
        return verts, np.array(faces, dtype=np.int64)

    @property
    def profile_length(self) -> float:
        return np.pi * self.radius + self.length

    def chart(self, x):
        """Metric chart coordinates: u = (azimuth - pi) * radial distance, v = profile arc length.

        The cylinder maps isometrically; caps shrink towards their poles like a
        sinusoidal projection, so the pole sits at u = 0.
        """
        a, rho = self.local(x)
        r, L = self.radius, self.length
        rnorm = np.linalg.norm(rho, axis=1)
        phi = np.mod(np.arctan2(rho @ self.f2, rho @ self.f1), 2.0 * np.pi)
        u = np.where(rnorm < 1e-9 * max(r, 1.0), 0.0, (phi - np.pi) * rnorm)
        arc = np.where(
            a < 0.0, r * np.arctan2(rnorm, -a),
            np.where(a > L, r * np.pi / 2 + L + r * (np.pi / 2 - np.arctan2(rnorm, a - L)),
                     r * np.pi / 2 + a))
        return u, np.clip(arc, 0.0, self.profile_length)


def _subdivide(verts, faces, capsule):
    edge_index = {}
    mids = []
    out = []
    for f in faces:
        m = []
        for i, j in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            key = (min(i, j), max(i, j))
            if key not in edge_index:
                edge_index[key] = len(verts) + len(mids)
                mids.append((verts[i] + verts[j]) / 2.0)
            m.append(edge_index[key])
        out.extend([(f[0], m[0], m[2]), (m[0], f[1], m[1]), (m[2], m[1], f[2]), (m[0], m[1], m[2])])
    return np.vstack([verts, capsule.project(np.array(mids))]), np.array(out, dtype=np.int64)


def _orient_outward(verts, faces, capsule):
    tri = verts[faces]
    normal = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    centroid = tri.mean(axis=1)
    a, _ = capsule.local(centroid)
    a = np.clip(a, 0.0, capsule.length)
    outward = centroid - (capsule.start + np.outer(a, capsule.axis))
    flip = np.einsum("ij,ij->i", normal, outward) < 0
    faces = faces.copy()
    faces[flip] = faces[flip][:, ::-1]
    return faces


def make_mini_model(n_subdiv: int = 0, seed: int = 0) -> BodyModel:
    """Build the capsule-person model.

    16 kinematic joints, 20 output joints, 6 parts and 10 shape directions.
    ``n_subdiv`` midpoint-subdivision passes refine every capsule; ``seed``
    drives the randomised part of the shape space only.
    """
    if n_subdiv < 0:
        raise ValueError("n_subdiv must be >= 0")
    nk = len(PARENTS)
    all_verts, all_faces, owner = [], [], []
    caps = []
    offset = 0
    for k in range(nk):
        end = REST_JOINTS[_CHILD[k]] if k in _CHILD else _TIPS[k]
        cap = _Capsule(REST_JOINTS[k], end, _RADII[k])
        caps.append(cap)
        verts, faces = cap.base_mesh()
        for _ in range(n_subdiv):
            verts, faces = _subdivide(verts, faces, cap)
        faces = _orient_outward(verts, faces, cap)
        all_verts.append(verts)
        all_faces.append(faces + offset)
        owner.append(np.full(len(verts), k))
        offset += len(verts)
    template = np.vstack(all_verts)
    faces = np.vstack(all_faces)
    owner = np.concatenate(owner)
    nv = len(template)

    part_labels = _PART_OF[owner]
    uv = np.zeros((nv, 2))
    skin = np.zeros((nv, nk))
    kin_reg = np.zeros((nk, nv))
    end_rings = {}
    radial = np.zeros((nv, 3))
    for k, cap in enumerate(caps):
        idx = np.flatnonzero(owner == k)
        x = template[idx]
        a, rho = cap.local(x)
        rn = np.linalg.norm(rho, axis=1, keepdims=True)
        radial[idx] = np.divide(rho, rn, out=np.zeros_like(rho), where=rn > 1e-12) * cap.radius

        u, t = cap.chart(x)
        uv[idx, 0] = u
        uv[idx, 1] = t
        s = np.clip(a / cap.length, 0.0, 1.0)
        w_par = 0.5 * np.clip(1.0 - s / _BLEND, 0.0, None) if PARENTS[k] >= 0 else np.zeros_like(s)
        w_child = 0.5 * np.clip(1.0 - (1.0 - s) / _BLEND, 0.0, None) if k in _CHILD else np.zeros_like(s)
        skin[idx, k] = 1.0 - w_par - w_child
        if PARENTS[k] >= 0:
            skin[idx, PARENTS[k]] += w_par
        if k in _CHILD:
            skin[idx, _CHILD[k]] += w_child

        tol = 1e-9
        start_ring = idx[np.abs(a) < tol]
        kin_reg[k, start_ring] = 1.0 / len(start_ring)
        end_rings[k] = idx[np.abs(a - cap.length) < tol]

    _layout_charts(uv, owner, caps)

    joint_W = np.zeros((nk + len(_EXTRA_JOINT_OF), nv))
    joint_W[:nk] = kin_reg
    for e, k in enumerate(_EXTRA_JOINT_OF):
        ring = end_rings[k]
        joint_W[nk + e, ring] = 1.0 / len(ring)

    shape_dirs = _shape_space(template, owner, radial, seed)

    model = BodyModel(
        template_vertices=template, shape_dirs=shape_dirs, faces=faces,
        kin_parents=PARENTS, kin_regressor=kin_reg, skin_weights=skin,
        joint_regressor_W=joint_W, part_labels=part_labels, vertex_uv=uv,
        joint_names=JOINT_NAMES + EXTRA_JOINT_NAMES,
    )
    validate_model(model, "mini_model")
    return model


def _layout_charts(uv, owner, caps):
    """Place each part's capsule charts in [0, 1]^2 at one shared metric scale.

    Capsules of a part are stacked along v, so UV distances within a part are
    proportional to surface distances on every cylinder.
    """
    for part in np.unique(_PART_OF):
        members = [k for k in range(len(caps)) if _PART_OF[k] == part]
        widths = [2.0 * np.pi * caps[k].radius for k in members]
        heights = [caps[k].profile_length for k in members]
        gap = 0.02 * sum(heights)
        extent = max(max(widths), sum(heights) + gap * (len(members) - 1))
        scale = (1.0 - 2.0 * _UV_MARGIN) / extent
        v0 = _UV_MARGIN
        for k, h in zip(members, heights):
            idx = owner == k
            uv[idx, 0] = 0.5 + uv[idx, 0] * scale
            uv[idx, 1] = v0 + uv[idx, 1] * scale
            v0 += (h + gap) * scale


def _shape_space(template, owner, radial, seed):
    nv = len(template)
    dirs = np.zeros((nv, 3, N_BETAS))
    pelvis = REST_JOINTS[0]
    dirs[:, :, 0] = 0.06 * (template - pelvis)
    dirs[:, 1, 1] = 0.05 * (template[:, 1] - pelvis[1])
    torso = np.isin(owner, [0, 1])
    dirs[torso, :, 2] = 0.15 * radial[torso]
    limbs = ~np.isin(owner, [0, 1, 2, 3])
    dirs[limbs, :, 3] = 0.15 * radial[limbs]
    for side, joints in ((1.0, [4, 5, 6]), (-1.0, [7, 8, 9])):
        m = np.isin(owner, joints)
        dirs[m, 0, 4] = 0.06 * (template[m, 0] - side * 0.18)

    rng = np.random.default_rng(seed)
    for b in range(5, N_BETAS):
        for part in np.unique(_PART_OF):
            m = _PART_OF[owner] == part
            centre = template[m].mean(axis=0)
            A = rng.normal(scale=0.03, size=(3, 3))
            dirs[m, :, b] = (template[m] - centre) @ A.T
    return dirs
