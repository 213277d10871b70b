"""Pinhole intrinsics and rigid camera-to-world poses.

Cameras look along +Z with x to the right and y pointing down. Pixel
(i, j) has its center at continuous coordinate (j + 0.5, i + 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ContractError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width < 1 or self.height < 1:
            raise ContractError(f"image extent must be positive, got {self.width}x{self.height}")

    @classmethod
    def from_fov(cls, fov_deg: float, height: int, width: int) -> "Intrinsics":
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(float(f), float(f), width / 2.0, height / 2.0, width, height)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def resized(self, height: int, width: int) -> "Intrinsics":
        if (height, width) == (self.height, self.width):
            return self
        sx, sy = width / self.width, height / self.height
        return Intrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)

    def pixel_rays(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Camera-space directions with unit z for continuous pixel coordinates; ``[..., 3]``."""
        return np.stack([(x - self.cx) / self.fx, (y - self.cy) / self.fy, np.ones_like(x, dtype=np.float64)], -1)

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        y, x = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        return x + 0.5, y + 0.5

    def project(self, pc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Continuous pixel coordinates of camera-space points ``[..., 3]``."""
        z = pc[..., 2]
        return self.fx * pc[..., 0] / z + self.cx, self.fy * pc[..., 1] / z + self.cy


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform: ``X_world = R @ X_cam + t``."""

    rotation: tuple
    translation: tuple

    @classmethod
    def from_arrays(cls, R, t) -> "Pose":
        R = np.asarray(R, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        return cls(tuple(tuple(float(v) for v in row) for row in R), tuple(float(v) for v in t))

    @classmethod
    def identity(cls) -> "Pose":
        return cls.from_arrays(np.eye(3), np.zeros(3))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0)) -> "Pose":
        eye = np.asarray(eye, dtype=np.float64)
        f = np.asarray(target, dtype=np.float64) - eye
        f /= np.linalg.norm(f)
        r = np.cross(f, np.asarray(up, dtype=np.float64))
        r /= np.linalg.norm(r)
        d = np.cross(f, r)
        return cls.from_arrays(np.stack([r, d, f], axis=1), eye)

    @property
    def R(self) -> np.ndarray:
        return np.array(self.rotation, dtype=np.float64)

    @property
    def t(self) -> np.ndarray:
        return np.array(self.translation, dtype=np.float64)

    def check(self) -> None:
        R = self.R
        dev = np.abs(R.T @ R - np.eye(3)).max()
        if dev > ORTHO_TOL or np.linalg.det(R) < 0:
            raise ContractError(f"pose rotation is not orthonormal with det +1 (max |R^T R - I| = {dev:.3g})")

    def to_world(self, pc: np.ndarray) -> np.ndarray:
        return pc @ self.R.T + self.t

    def to_camera(self, pw: np.ndarray) -> np.ndarray:
        return (pw - self.t) @ self.R
