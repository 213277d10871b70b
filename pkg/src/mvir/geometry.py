"""Back-projection, cross-view reprojection, flow warping and point-cloud fusion.

Two resampling paths exist on purpose. ``reproject_map`` forward-splats
source pixels into the destination with a z-buffer; it is a metric tool
and not differentiable. ``warp_backward`` samples a map bilinearly at
flow-displaced positions and is differentiable with respect to the map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .camera import Intrinsics, Pose
from .errors import EmptyInputError
from .tensor import Tensor

OCCLUSION_TOL = 0.01
_SNAP = 1e-9


@dataclass
class CameraView:
    intrinsics: Intrinsics
    pose: Pose
    depth: np.ndarray | None = None

    def __post_init__(self):
        self.pose.check()
        if self.depth is not None:
            self.depth = np.asarray(self.depth, dtype=np.float64)
            if self.depth.shape != (self.intrinsics.height, self.intrinsics.width):
                raise ValueError(f"depth shape {self.depth.shape} does not match intrinsics "
                                 f"{self.intrinsics.height}x{self.intrinsics.width}")

    @classmethod
    def from_bundle(cls, bundle) -> "CameraView":
        return cls(bundle.intrinsics, bundle.pose, bundle.depth)

    @property
    def hit(self) -> np.ndarray:
        return np.isfinite(self.depth) & (self.depth > 0)


@dataclass
class PointCloudPBR:
    positions: np.ndarray  # [P,3] world
    albedo: np.ndarray  # [P,3]
    metallic: np.ndarray  # [P]
    roughness: np.ndarray  # [P]
    normal: np.ndarray  # [P,3] world, unit
    source: np.ndarray  # [P,3] (view, row, col)

    def __len__(self) -> int:
        return len(self.positions)

    def subset(self, idx) -> "PointCloudPBR":
        return PointCloudPBR(*(getattr(self, k)[idx] for k in
                               ("positions", "albedo", "metallic", "roughness", "normal", "source")))


def backproject(view: CameraView) -> tuple[np.ndarray, np.ndarray]:
    """World point per pixel ``[H,W,3]`` (NaN where depth is not finite) and the valid mask."""
    view.pose.check()
    hit = view.hit
    x, y = view.intrinsics.pixel_centers()
    z = np.where(hit, view.depth, np.nan)
    pc = view.intrinsics.pixel_rays(x, y) * z[..., None]
    return view.pose.to_world(pc), hit


def project(view: CameraView, pw: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Continuous pixel coordinates and camera z of world points ``[...,3]``."""
    pc = view.pose.to_camera(pw)
    z = pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        x, y = view.intrinsics.project(pc)
    return x, y, z


def reproject_map(src: CameraView, src_map: np.ndarray, dst: CameraView,
                  tol: float = OCCLUSION_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Splat ``src_map`` ``[C,H,W]`` into ``dst``; returns the map and overlap mask.

    Each valid source pixel lands on the destination pixel containing its
    projection. Collisions keep the nearest point, ties broken by source
    pixel order. A destination pixel overlaps when it received a point
    whose depth agrees with the destination depth within ``tol`` relative.
    """
    src_map = np.asarray(src_map)
    h, w = dst.intrinsics.height, dst.intrinsics.width
    pw, hit = backproject(src)
    x, y, z = project(dst, pw[hit])
    j = np.floor(x + _SNAP)
    i = np.floor(y + _SNAP)
    inb = (z > 0) & (j >= 0) & (j < w) & (i >= 0) & (i < h)
    src_idx = np.flatnonzero(hit)[inb]
    lin = (i[inb] * w + j[inb]).astype(np.int64)
    zs = z[inb]
    # deterministic z-buffer: sort by destination, then depth, then source index
    order = np.lexsort((src_idx, zs, lin))
    lin, zs, src_idx = lin[order], zs[order], src_idx[order]
    first = np.ones(len(lin), dtype=bool)
    first[1:] = lin[1:] != lin[:-1]
    lin, zs, src_idx = lin[first], zs[first], src_idx[first]

    out = np.zeros((src_map.shape[0], h * w))
    overlap = np.zeros(h * w, dtype=bool)
    d_dst = dst.depth.reshape(-1)[lin]
    agree = np.isfinite(d_dst) & (np.abs(zs - d_dst) <= tol * np.where(np.isfinite(d_dst), d_dst, 0.0))
    flat = src_map.reshape(src_map.shape[0], -1)
    out[:, lin[agree]] = flat[:, src_idx[agree]]
    overlap[lin[agree]] = True
    return out.reshape(-1, h, w), overlap.reshape(h, w)


def warp_backward(map_next, flow: np.ndarray, valid: np.ndarray | None = None):
    """Sample ``map_next`` ``[...,H,W]`` at ``pixel + flow``; returns (warped, mask).

    ``flow`` is ``[2,H,W]`` in pixels on the target frame's grid. The mask
    keeps pixels that are marked valid and whose bilinear taps with nonzero
    weight are all in bounds; the warped map is zero elsewhere.
    """
    x = map_next if isinstance(map_next, Tensor) else Tensor(np.asarray(map_next, dtype=np.float64))
    h, w = x.shape[-2:]
    flow = np.asarray(flow, dtype=np.float64)
    if flow.shape != (2, h, w):
        raise ValueError(f"flow must be [2,{h},{w}], got {flow.shape}")
    px = np.arange(w)[None, :] + flow[0]
    py = np.arange(h)[:, None] + flow[1]
    mask = (px >= -_SNAP) & (px <= w - 1 + _SNAP) & (py >= -_SNAP) & (py <= h - 1 + _SNAP) & np.isfinite(px + py)
    if valid is not None:
        mask &= np.asarray(valid, dtype=bool)
    px = np.where(mask, np.clip(px, 0, w - 1), 0.0)
    py = np.where(mask, np.clip(py, 0, h - 1), 0.0)
    return T.sample_bilinear(x, px, py) * mask.astype(x.dtype), mask


def fuse_pointcloud(views: list[CameraView], maps, voxel: float | None = None) -> PointCloudPBR:
    """Lift every valid pixel of every view into one world-space cloud.

    ``maps`` is a list of per-view intrinsic sets (``[C,H,W]`` arrays) or
    one batched set. With ``voxel`` set, points sharing a grid cell are
    collapsed to the one nearest its own camera.
    """
    if not views:
        raise EmptyInputError("fuse_pointcloud needs at least one view")
    parts = {k: [] for k in ("positions", "albedo", "metallic", "roughness", "normal", "source", "dist")}
    for v_idx, view in enumerate(views):
        m = maps[v_idx] if isinstance(maps, (list, tuple)) else maps.select(v_idx)
        pw, hit = backproject(view)
        rows, cols = np.nonzero(hit)
        n_world = np.moveaxis(np.asarray(m.normal), 0, -1)[hit] @ view.pose.R.T
        n_world /= np.linalg.norm(n_world, axis=-1, keepdims=True)
        parts["positions"].append(pw[hit])
        parts["albedo"].append(np.moveaxis(np.asarray(m.albedo), 0, -1)[hit])
        parts["metallic"].append(np.asarray(m.metallic).reshape(hit.shape)[hit])
        parts["roughness"].append(np.asarray(m.roughness).reshape(hit.shape)[hit])
        parts["normal"].append(n_world)
        parts["source"].append(np.stack([np.full(len(rows), v_idx), rows, cols], -1))
        parts["dist"].append(view.depth[hit])
    cat = {k: np.concatenate(v) for k, v in parts.items()}
    if len(cat["positions"]) == 0:
        raise EmptyInputError("fuse_pointcloud: no view has a valid depth pixel")
    keep = np.arange(len(cat["positions"]))
    if voxel is not None:
        if voxel <= 0:
            raise ValueError(f"voxel size must be positive, got {voxel}")
        cells = np.floor(cat["positions"] / voxel).astype(np.int64)
        order = np.lexsort((keep, cat["dist"], cells[:, 2], cells[:, 1], cells[:, 0]))
        sc = cells[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = np.any(sc[1:] != sc[:-1], axis=1)
        keep = np.sort(order[first])
    return PointCloudPBR(cat["positions"][keep], cat["albedo"][keep], cat["metallic"][keep],
                         cat["roughness"][keep], cat["normal"][keep], cat["source"][keep])
