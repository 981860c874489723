"""Pinhole cameras: ray generation, projection, look-at poses, JSON I/O.

Conventions: camera frame has +z forward, +x right, +y down (image rows
grow downward); the pose is world-from-camera, so the camera center is the
pose translation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple

import numpy as np

from .tracer import Ray


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray     # (3,3) world-from-camera, orthonormal det +1
    translation: np.ndarray  # (3,) camera center in world coordinates

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        err = np.linalg.norm(self.rotation.T @ self.rotation - np.eye(3))
        if err > 1e-6 or np.linalg.det(self.rotation) < 0:
            raise ValueError("rotation must be orthonormal with det +1")

    @property
    def center(self) -> np.ndarray:
        return self.translation

    def pixel_ray(self, p: Tuple[float, float]) -> Ray:
        """World-space ray through pixel coordinate p = (px, py)."""
        px, py = p
        if not (0 <= px < self.width and 0 <= py < self.height):
            raise ValueError(f"pixel {p} outside {self.width}x{self.height} image")
        d_cam = np.array([(px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0])
        d = self.rotation @ d_cam
        d /= np.linalg.norm(d)
        return Ray(origin=self.translation.copy(), direction=d)

    def pixel_grid_rays(self) -> Tuple[np.ndarray, np.ndarray]:
        """Rays for all pixel centers; returns (origins (H*W,3), dirs (H*W,3))."""
        ys, xs = np.mgrid[0:self.height, 0:self.width]
        d_cam = np.stack(
            [
                (xs.ravel() - self.cx) / self.fx,
                (ys.ravel() - self.cy) / self.fy,
                np.ones(xs.size),
            ],
            axis=-1,
        )
        d = d_cam @ self.rotation.T
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        o = np.broadcast_to(self.translation, d.shape).copy()
        return o, d

    def project(self, x_world: np.ndarray) -> np.ndarray:
        """Project world point(s) to pixel coordinates (px, py)."""
        x = np.atleast_2d(np.asarray(x_world, dtype=np.float64))
        x_cam = (x - self.translation) @ self.rotation
        px = self.fx * x_cam[:, 0] / x_cam[:, 2] + self.cx
        py = self.fy * x_cam[:, 1] / x_cam[:, 2] + self.cy
        out = np.stack([px, py], axis=-1)
        return out[0] if np.asarray(x_world).ndim == 1 else out

    def pose_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


def pixel_ray(camera: Camera, p: Tuple[float, float]) -> Ray:
    return camera.pixel_ray(p)


def look_at(
    position: np.ndarray,
    target: np.ndarray,
    up: np.ndarray = (0.0, 1.0, 0.0),
    fov_deg: float = 40.0,
    width: int = 128,
    height: int = 128,
) -> Camera:
    """Camera at `position` aimed at `target`, square pixels, given FOV."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward], axis=-1)
    f = (width / 2.0) / np.tan(np.deg2rad(fov_deg) / 2.0)
    return Camera(
        fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
        width=width, height=height, rotation=rot, translation=position,
    )


def save_cameras(path: str | Path, cameras: List[Camera], mm_per_unit: float = 180.0,
                 normalization: np.ndarray | None = None) -> None:
    norm = np.eye(4) if normalization is None else np.asarray(normalization)
    payload = {
        "mm_per_unit": mm_per_unit,
        "normalization": norm.reshape(-1).tolist(),
        "views": [
            {
                "intrinsics": {
                    "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
                    "width": c.width, "height": c.height,
                },
                "world_from_camera": c.pose_matrix().reshape(-1).tolist(),
            }
            for c in cameras
        ],
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=1)


def load_cameras(path: str | Path) -> Tuple[List[Camera], float, np.ndarray]:
    with open(path) as f:
        payload = json.load(f)
    cams = []
    for v in payload["views"]:
        intr = v["intrinsics"]
        m = np.asarray(v["world_from_camera"], dtype=np.float64).reshape(4, 4)
        cams.append(
            Camera(
                fx=intr["fx"], fy=intr["fy"], cx=intr["cx"], cy=intr["cy"],
                width=int(intr["width"]), height=int(intr["height"]),
                rotation=m[:3, :3], translation=m[:3, 3],
            )
        )
    norm = np.asarray(payload["normalization"], dtype=np.float64).reshape(4, 4)
    return cams, float(payload["mm_per_unit"]), norm
