"""Relighting a materialized point cloud and editing surface albedo.

Point clouds carry no connectivity, so relit points are never shadowed.
Edits replace a pixel with ``new_albedo * shading``; on glossy pixels this
drops the specular part of the original image.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import brdf
from .camera import Intrinsics, Pose
from .geometry import CameraView, PointCloudPBR, backproject
from .scenegen import PointLight, SceneSpec

SPLAT_RADIUS = 1.5


@dataclass(frozen=True)
class LightRig:
    lights: tuple
    ambient: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        for light in self.lights:
            if min(light.intensity) < 0:
                raise ValueError(f"light intensity must be nonnegative, got {light.intensity}")
        if min(self.ambient) < 0:
            raise ValueError(f"ambient must be nonnegative, got {self.ambient}")

    @classmethod
    def from_scene(cls, scene: SceneSpec) -> "LightRig":
        return cls(tuple(scene.lights), tuple(scene.ambient))

    def scaled(self, factor: float) -> "LightRig":
        return LightRig(tuple(PointLight(l.position, tuple(factor * c for c in l.intensity)) for l in self.lights),
                        tuple(factor * a for a in self.ambient))


class EmptyRegionWarning(UserWarning):
    pass


@dataclass(frozen=True)
class EditRegion:
    """World-space axis-aligned box, or an explicit set of cloud point indices."""

    lo: tuple | None = None
    hi: tuple | None = None
    indices: tuple | None = None

    def __post_init__(self):
        if (self.lo is None) != (self.hi is None):
            raise ValueError("a box region needs both lo and hi corners")
        if self.lo is None and self.indices is None:
            raise ValueError("a region needs a box or an index set")

    def contains(self, points: np.ndarray) -> np.ndarray:
        if self.lo is None:
            raise ValueError("index-set regions only apply to point clouds")
        p = np.asarray(points)
        return np.all((p >= np.asarray(self.lo)) & (p <= np.asarray(self.hi)), axis=-1)

    def select(self, cloud: PointCloudPBR) -> np.ndarray:
        if self.indices is not None:
            sel = np.zeros(len(cloud), dtype=bool)
            sel[np.asarray(self.indices, dtype=np.int64)] = True
            return sel
        return self.contains(cloud.positions)


def _albedo_for(new_albedo, points: np.ndarray) -> np.ndarray:
    if callable(new_albedo):
        out = np.asarray(new_albedo(points), dtype=np.float64)
    else:
        out = np.broadcast_to(np.asarray(new_albedo, dtype=np.float64), points.shape)
    if out.size and (out.min() < 0 or out.max() > 1):
        raise ValueError("replacement albedo must lie in [0, 1]")
    return out


def shade_point(albedo, metallic, roughness, n, view_dir, position, rig: LightRig,
                specular: bool = True) -> np.ndarray:
    """Outgoing linear radiance ``[...,3]`` of surface points under ``rig``.

    Diffuse is ``(1 - metallic) * albedo / pi`` times irradiance, specular is
    the shared microfacet model, and ambient adds ``ambient * albedo / pi``.
    """
    albedo = np.asarray(albedo, dtype=np.float64)
    metallic = np.asarray(metallic, dtype=np.float64)
    p = np.asarray(position, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    v = np.asarray(view_dir, dtype=np.float64)
    f0 = brdf.base_reflectance(albedo, metallic)
    kd = (1.0 - metallic)[..., None] * albedo / np.pi
    out = albedo * (np.asarray(rig.ambient) / np.pi)
    for light in rig.lights:
        ld = np.asarray(light.position) - p
        d2 = np.sum(ld * ld, -1)
        l = ld / np.sqrt(d2)[..., None]
        cos = np.maximum(np.sum(n * l, -1), 0.0)
        irr = np.asarray(light.intensity) / d2[..., None]
        out = out + kd * irr * cos[..., None]
        if specular:
            out = out + irr * brdf.specular_cos(n, v, l, f0, roughness)
    return out


def splat(cloud: PointCloudPBR, intr: Intrinsics, pose: Pose, radius: float = SPLAT_RADIUS):
    """Z-buffered disc splat: index of the winning point per pixel (-1 if none)."""
    pc = pose.to_camera(cloud.positions)
    z = pc[:, 2]
    front = z > 0
    x, y = intr.project(np.where(front[:, None], pc, 1.0))
    r = int(np.ceil(radius))
    h, w = intr.height, intr.width
    lin_all, z_all, idx_all = [], [], []
    base_i, base_j = np.floor(y - 0.5).astype(np.int64), np.floor(x - 0.5).astype(np.int64)
    for di in range(-r, r + 2):
        for dj in range(-r, r + 2):
            i, j = base_i + di, base_j + dj
            near = (j + 0.5 - x) ** 2 + (i + 0.5 - y) ** 2 <= radius * radius
            ok = front & near & (i >= 0) & (i < h) & (j >= 0) & (j < w)
            lin_all.append(i[ok] * w + j[ok])
            z_all.append(z[ok])
            idx_all.append(np.flatnonzero(ok))
    lin, zs, idx = np.concatenate(lin_all), np.concatenate(z_all), np.concatenate(idx_all)
    order = np.lexsort((idx, zs, lin))
    lin, idx = lin[order], idx[order]
    first = np.ones(len(lin), dtype=bool)
    first[1:] = lin[1:] != lin[:-1]
    winner = np.full(h * w, -1, dtype=np.int64)
    winner[lin[first]] = idx[first]
    return winner.reshape(h, w)


def render_relit(cloud: PointCloudPBR, intr: Intrinsics, pose: Pose, rig: LightRig,
                 radius: float = SPLAT_RADIUS, background: float = 0.0, specular: bool = True,
                 clamp: bool = True) -> np.ndarray:
    """Render the cloud from ``pose`` under ``rig``; returns ``[3,H,W]``."""
    if len(cloud) == 0:
        raise ValueError("render_relit: empty point cloud")
    winner = splat(cloud, intr, pose, radius)
    img = np.full((intr.height, intr.width, 3), float(background))
    cov = winner >= 0
    k = winner[cov]
    p = cloud.positions[k]
    v = pose.t - p
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    img[cov] = shade_point(cloud.albedo[k], cloud.metallic[k], cloud.roughness[k], cloud.normal[k], v, p, rig,
                           specular)
    if clamp:
        img = np.clip(img, 0.0, 1.0)
    return np.ascontiguousarray(np.moveaxis(img, -1, 0))


def edit_cloud(cloud: PointCloudPBR, region: EditRegion, new_albedo) -> PointCloudPBR:
    sel = region.select(cloud)
    if not sel.any():
        raise ValueError("edit region selects no points")
    albedo = cloud.albedo.copy()
    albedo[sel] = _albedo_for(new_albedo, cloud.positions[sel])
    return PointCloudPBR(cloud.positions, albedo, cloud.metallic, cloud.roughness, cloud.normal, cloud.source)


def edit_material(views: list[CameraView], preds, images, region: EditRegion, new_albedo) -> list[np.ndarray]:
    """Recolor the region in every view as ``new_albedo * predicted shading``.

    Pixels outside the region's footprint are copied unchanged.
    """
    outputs, touched = [], 0
    for i, view in enumerate(views):
        m = preds[i] if isinstance(preds, (list, tuple)) else preds.select(i)
        img = np.array(images[i], dtype=np.float64, copy=True)
        pts, hit = backproject(view)
        foot = np.zeros(hit.shape, dtype=bool)
        foot[hit] = region.contains(pts[hit])
        if foot.any():
            touched += 1
            alb = _albedo_for(new_albedo, pts[foot])
            img[:, foot] = (alb * np.moveaxis(np.asarray(m.shading), 0, -1)[foot]).T
        outputs.append(img)
    if touched == 0:
        warnings.warn("edit region projects to no pixels; images left unedited", EmptyRegionWarning, stacklevel=2)
    return outputs


def parse_rig(cfg: dict) -> LightRig:
    """Build a rig from ``light = x y z r g b`` (repeatable) and ``ambient = r g b`` entries."""
    lights = []
    for entry in cfg.get("light", []):
        vals = [float(v) for v in entry.split()]
        if len(vals) != 6:
            raise ValueError(f"light needs 6 numbers (position, intensity), got {entry!r}")
        lights.append(PointLight(tuple(vals[:3]), tuple(vals[3:])))
    amb = cfg.get("ambient", ["0 0 0"])[-1]
    return LightRig(tuple(lights), tuple(float(v) for v in amb.split()))


def parse_region(cfg: dict) -> tuple[EditRegion, tuple]:
    """Box region from ``region_min``/``region_max`` plus the ``albedo = r g b`` replacement."""
    try:
        lo = tuple(float(v) for v in cfg["region_min"][-1].split())
        hi = tuple(float(v) for v in cfg["region_max"][-1].split())
        albedo = tuple(float(v) for v in cfg["albedo"][-1].split())
    except KeyError as exc:
        raise ValueError(f"edit config is missing {exc.args[0]}") from None
    return EditRegion(lo, hi), albedo
