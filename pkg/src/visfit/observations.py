"""Dense-body observations: grid coordinates and visibility for joints and vertices."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .heatmaps import CropBox, HeatmapGrid, PerspectiveCamera


class ObservationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Observations:
    joints: np.ndarray  # (N_J, 3) grid units
    vertices: np.ndarray  # (N_V, 3) grid units
    joint_visibility: np.ndarray  # (N_J, 3) in [0, 1]
    vertex_visibility: np.ndarray  # (N_V, 3) in [0, 1]
    camera: PerspectiveCamera
    crop: CropBox
    grid: HeatmapGrid = HeatmapGrid()
    root_depth: float | None = None

    def __post_init__(self):
        for name in ("joints", "vertices", "joint_visibility", "vertex_visibility"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 2 or arr.shape[1] != 3:
                raise ObservationError(f"{name}: expected shape (N, 3), got {arr.shape}")
            object.__setattr__(self, name, arr)
        if self.joints.shape != self.joint_visibility.shape:
            raise ObservationError("joints and joint_visibility differ in shape")
        if self.vertices.shape != self.vertex_visibility.shape:
            raise ObservationError("vertices and vertex_visibility differ in shape")
        for name in ("joint_visibility", "vertex_visibility"):
            arr = getattr(self, name)
            if np.any(~np.isfinite(arr) | (arr < 0) | (arr > 1)):
                raise ObservationError(f"{name}: values must lie in [0, 1]")

    def check_model(self, model) -> None:
        if self.joints.shape[0] != model.n_joints:
            raise ObservationError(f"observations have {self.joints.shape[0]} joints, model has {model.n_joints}")
        if self.vertices.shape[0] != model.n_vertices:
            raise ObservationError(
                f"observations have {self.vertices.shape[0]} vertices, model has {model.n_vertices}")

    def replace(self, **changes) -> "Observations":
        fields = dict(joints=self.joints, vertices=self.vertices, joint_visibility=self.joint_visibility,
                      vertex_visibility=self.vertex_visibility, camera=self.camera, crop=self.crop,
                      grid=self.grid, root_depth=self.root_depth)
        fields.update(changes)
        return Observations(**fields)

    def to_dict(self) -> dict:
        d = {
            "joints": {"coords": self.joints.tolist(), "visibility": self.joint_visibility.tolist()},
            "vertices": {"coords": self.vertices.tolist(), "visibility": self.vertex_visibility.tolist()},
            "camera": self.camera.to_dict(),
            "crop_box": self.crop.to_list(),
            "grid": self.grid.to_dict(),
        }
        if self.root_depth is not None:
            d["root_depth"] = self.root_depth
        return d

    @classmethod
    def from_dict(cls, d: dict, name: str = "observations") -> "Observations":
        try:
            return cls(
                joints=np.asarray(d["joints"]["coords"], dtype=np.float64),
                vertices=np.asarray(d["vertices"]["coords"], dtype=np.float64),
                joint_visibility=np.asarray(d["joints"]["visibility"], dtype=np.float64),
                vertex_visibility=np.asarray(d["vertices"]["visibility"], dtype=np.float64),
                camera=PerspectiveCamera.from_dict(d["camera"]),
                crop=CropBox.from_list(d["crop_box"]),
                grid=HeatmapGrid.from_dict(d.get("grid", {})),
                root_depth=None if d.get("root_depth") is None else float(d["root_depth"]),
            )
        except KeyError as exc:
            raise ObservationError(f"{name}: missing key {exc}") from None
        except (TypeError, ValueError) as exc:
            raise ObservationError(f"{name}: {exc}") from None


def load_observations(path) -> Observations:
    path = Path(path)
    with open(path) as fh:
        return Observations.from_dict(json.load(fh), name=str(path))


def save_observations(obs: Observations, path) -> None:
    with open(path, "w") as fh:
        json.dump(obs.to_dict(), fh)
