"""Wavefront OBJ export and a minimal reader for triangle meshes."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def export_obj(path, vertices, faces) -> None:
    """Write ``v x y z`` lines (6 decimals) then 1-indexed ``f i j k`` lines, LF endings.

    An empty mesh raises ``ValueError`` before anything is written.
    """
    V = np.asarray(vertices, dtype=np.float64)
    F = np.asarray(faces, dtype=np.int64)
    if V.size == 0 or F.size == 0:
        raise ValueError("cannot export an empty mesh")
    if V.ndim != 2 or V.shape[1] != 3 or F.ndim != 2 or F.shape[1] != 3:
        raise ValueError(f"expected (N, 3) vertices and (M, 3) faces, got {V.shape} and {F.shape}")
    if F.min() < 0 or F.max() >= len(V):
        raise ValueError("face index out of range")
    if not np.all(np.isfinite(V)):
        raise ValueError("vertices must be finite")
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in V]
    lines += [f"f {i + 1} {j + 1} {k + 1}" for i, j, k in F]
    with open(Path(path), "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_obj(path):
    """Read vertices and triangle faces; texture/normal indices after ``/`` are dropped."""
    verts, faces = [], []
    with open(Path(path)) as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                # fan-triangulate polygons
                for a in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[a], idx[a + 1]])
    return np.asarray(verts, dtype=np.float64).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3)
