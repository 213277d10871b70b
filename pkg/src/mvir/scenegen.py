"""Procedural sphere-and-plane scenes with an analytic ground-truth renderer.

World space is y-up; the optional ground plane is ``y = height`` facing +y.
Every rendered view carries the image plus exact albedo, metallic,
roughness, camera-space normals, diffuse shading, z-depth and a primitive
id map. The diffuse image equals ``albedo * shading`` by construction.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import brdf
from .camera import Intrinsics, Pose
from .model import IntrinsicSet

BACKGROUND = 0.5
OCCLUSION_TOL = 0.01
MISS = -1
_SNAP = 1e-9


@dataclass(frozen=True)
class Texture:
    """Smooth two-tone pattern ``base + (color - base) * w`` in world x/z with
    ``w = (0.5 + 0.5 sin(2 pi x / period) sin(2 pi z / period)) * g`` and a
    Gaussian falloff ``g`` of width ``extent`` so distant surfaces stay flat
    instead of aliasing."""

    color: tuple
    period: float
    extent: float = 2.5


@dataclass(frozen=True)
class Material:
    albedo: tuple
    metallic: float = 0.0
    roughness: float = 1.0
    specular: bool = True
    texture: Texture | None = None

    def __post_init__(self):
        if not all(0.0 <= a <= 1.0 for a in self.albedo):
            raise ValueError(f"albedo must lie in [0, 1], got {self.albedo}")
        if not 0.0 <= self.metallic <= 1.0:
            raise ValueError(f"metallic must lie in [0, 1], got {self.metallic}")
        if not brdf.MIN_ROUGHNESS <= self.roughness <= 1.0:
            raise ValueError(f"roughness must lie in [{brdf.MIN_ROUGHNESS}, 1], got {self.roughness}")

    def albedo_at(self, pw: np.ndarray) -> np.ndarray:
        base = np.broadcast_to(np.asarray(self.albedo, dtype=np.float64), pw.shape).copy()
        if self.texture is None:
            return base
        k = 2 * np.pi / self.texture.period
        w = 0.5 + 0.5 * np.sin(k * pw[..., 0]) * np.sin(k * pw[..., 2])
        w = w * np.exp(-(pw[..., 0] ** 2 + pw[..., 2] ** 2) / (2 * self.texture.extent ** 2))
        return base + (np.asarray(self.texture.color) - base) * w[..., None]


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    material: Material


@dataclass(frozen=True)
class Plane:
    height: float
    material: Material


@dataclass(frozen=True)
class PointLight:
    position: tuple
    intensity: tuple


@dataclass(frozen=True)
class SceneSpec:
    spheres: tuple
    plane: Plane | None
    lights: tuple
    ambient: tuple
    poses: tuple
    intrinsics: Intrinsics
    seed: int = 0
    difficulty: str = "custom"

    def __post_init__(self):
        if not self.spheres and self.plane is None:
            raise ValueError("a scene needs at least one primitive")
        if not self.lights:
            raise ValueError("a scene needs at least one light")
        if not self.poses:
            raise ValueError("a scene needs at least one camera pose")

    @property
    def num_primitives(self) -> int:
        return len(self.spheres) + (self.plane is not None)

    @property
    def num_views(self) -> int:
        return len(self.poses)

    def materials(self) -> list[Material]:
        mats = [s.material for s in self.spheres]
        if self.plane is not None:
            mats.append(self.plane.material)
        return mats

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        def mat(m):
            tex = m.get("texture")
            return Material(tuple(m["albedo"]), m["metallic"], m["roughness"], m["specular"],
                            Texture(tuple(tex["color"]), tex["period"], tex["extent"]) if tex else None)

        plane = d.get("plane")
        return cls(
            spheres=tuple(Sphere(tuple(s["center"]), s["radius"], mat(s["material"])) for s in d["spheres"]),
            plane=Plane(plane["height"], mat(plane["material"])) if plane else None,
            lights=tuple(PointLight(tuple(l["position"]), tuple(l["intensity"])) for l in d["lights"]),
            ambient=tuple(d["ambient"]),
            poses=tuple(Pose(tuple(tuple(r) for r in p["rotation"]), tuple(p["translation"])) for p in d["poses"]),
            intrinsics=Intrinsics(**d["intrinsics"]),
            seed=d.get("seed", 0),
            difficulty=d.get("difficulty", "custom"),
        )

    def scaled_lights(self, factor: float) -> "SceneSpec":
        lights = tuple(PointLight(l.position, tuple(factor * c for c in l.intensity)) for l in self.lights)
        return replace(self, lights=lights, ambient=tuple(factor * a for a in self.ambient))


@dataclass(frozen=True)
class Difficulty:
    name: str
    spheres: tuple = (1, 3)
    plane: bool = True
    textured: bool = False
    lambertian: bool = False
    lights: tuple = (1, 2)
    light_height: tuple = (2.5, 3.5)
    ambient: tuple = (0.1, 0.3)
    num_views: int = 10
    orbit_step_deg: float = 6.0
    metallic_max: float = 0.5
    camera_distance: float | None = None  # None: 3.4 with a ground plane, 2.0 without
    camera_elevation: float | None = None  # None: 2.2 with a ground plane, 0.8 without
    fov_deg: float = 55.0
    image_size: tuple = (64, 64)


PRESETS = {
    "minimal": Difficulty("minimal", spheres=(1, 1), plane=False, lambertian=True, lights=(1, 1), orbit_step_deg=0.0,
                          metallic_max=0.0),
    # soft, high lighting and a close camera: spheres fill a sizeable part of
    # the frame and shading varies less than albedo across it
    "easy": Difficulty("easy", spheres=(2, 4), light_height=(6.0, 8.0), ambient=(0.4, 1.2), camera_distance=2.2,
                       camera_elevation=1.4),
    "medium": Difficulty("medium", spheres=(2, 4), textured=True, lights=(1, 3), orbit_step_deg=10.0, metallic_max=1.0),
    "lambertian": Difficulty("lambertian", spheres=(2, 3), lambertian=True, metallic_max=0.0),
}


def shading_bound(spheres, plane, lights, ambient) -> np.ndarray:
    """Per-channel upper bound on diffuse shading over every surface point."""
    bound = np.asarray(ambient, dtype=np.float64) / np.pi
    for light in lights:
        p = np.asarray(light.position)
        dists = [np.linalg.norm(p - np.asarray(s.center)) - s.radius for s in spheres]
        if plane is not None:
            dists.append(abs(p[1] - plane.height))
        dmin = min(dists)
        if dmin <= 0:
            raise ValueError(f"light at {light.position} lies inside or on a primitive")
        bound = bound + np.asarray(light.intensity) / (np.pi * dmin * dmin)
    return bound


def _rand_material(rng, diff: Difficulty, textured: bool = False) -> Material:
    albedo = tuple(float(a) for a in rng.uniform(0.1, 0.9, size=3))
    tex = None
    if textured:
        tex = Texture(tuple(float(a) for a in rng.uniform(0.1, 0.9, size=3)), float(rng.uniform(3.0, 5.0)))
    if diff.lambertian:
        return Material(albedo, 0.0, 1.0, specular=False, texture=tex)
    return Material(albedo, float(rng.uniform(0.0, diff.metallic_max)), float(rng.uniform(0.3, 1.0)), texture=tex)


def gen_scene(seed: int, difficulty: str | Difficulty = "easy") -> SceneSpec:
    """Deterministic random scene for ``seed`` at the given difficulty."""
    diff = PRESETS[difficulty] if isinstance(difficulty, str) else difficulty
    rng = np.random.default_rng(seed)
    n_spheres = int(rng.integers(diff.spheres[0], diff.spheres[1] + 1))
    spheres: list[Sphere] = []
    if not diff.plane and n_spheres == 1:
        spheres.append(Sphere((0.0, 0.0, 0.0), float(rng.uniform(0.6, 0.9)), _rand_material(rng, diff)))
    else:
        while len(spheres) < n_spheres:
            r = float(rng.uniform(0.25, 0.5))
            ang, rad = rng.uniform(0, 2 * np.pi), rng.uniform(0.0, 1.1)
            c = np.array([rad * np.cos(ang), r + rng.uniform(0.05, 0.3), rad * np.sin(ang)])
            if all(np.linalg.norm(c - np.asarray(s.center)) > r + s.radius + 0.1 for s in spheres):
                spheres.append(Sphere(tuple(float(v) for v in c), r, _rand_material(rng, diff)))
    plane = Plane(0.0, _rand_material(rng, diff, textured=diff.textured)) if diff.plane else None

    n_lights = int(rng.integers(diff.lights[0], diff.lights[1] + 1))
    lights = []
    for _ in range(n_lights):
        ang = rng.uniform(0, 2 * np.pi)
        pos = (float(2.0 * np.cos(ang)), float(rng.uniform(*diff.light_height)), float(2.0 * np.sin(ang)))
        lights.append(PointLight(pos, tuple(float(c) for c in rng.uniform(0.8, 1.2, size=3))))
    ambient = tuple(float(a) for a in rng.uniform(*diff.ambient, size=3))
    # normalize so the analytic shading bound peaks at exactly 1
    scale = 1.0 / shading_bound(spheres, plane, lights, ambient).max()
    lights = [PointLight(l.position, tuple(scale * c for c in l.intensity)) for l in lights]
    ambient = tuple(scale * a for a in ambient)

    target = np.array([0.0, 0.0 if not diff.plane else 0.35, 0.0])
    start = rng.uniform(0, 2 * np.pi)
    dist = diff.camera_distance or (3.4 if diff.plane else 2.0)
    elev = diff.camera_elevation or (2.2 if diff.plane else 0.8)
    poses = []
    for k in range(diff.num_views):
        ang = start + np.radians(diff.orbit_step_deg) * k
        eye = target + np.array([dist * np.cos(ang), elev, dist * np.sin(ang)])
        poses.append(Pose.look_at(eye, target))
    h, w = diff.image_size
    return SceneSpec(tuple(spheres), plane, tuple(lights), ambient, tuple(poses),
                     Intrinsics.from_fov(diff.fov_deg, h, w), seed, diff.name)


# ---- ray casting -------------------------------------------------------------

def _sphere_depth(o, d, center, radius):
    """Ray parameter of the nearest front hit along unnormalized ``d`` (inf on miss)."""
    oc = o - np.asarray(center)
    a = np.sum(d * d, axis=-1)
    b = d @ oc
    c = oc @ oc - radius * radius
    disc = b * b - a * c
    root = np.sqrt(np.maximum(disc, 0.0))
    near = (-b - root) / a
    far = (-b + root) / a
    z = np.where(near > 0, near, far)
    return np.where((disc >= 0) & (z > 0), z, np.inf)


def _plane_depth(o, d, height):
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (height - o[1]) / d[..., 1]
    return np.where(np.isfinite(z) & (z > 0), z, np.inf)


def cast_rays(scene: SceneSpec, pose: Pose, intr: Intrinsics, x, y):
    """Trace camera rays through continuous pixel coordinates.

    Returns z-depth (inf on miss), primitive id (-1 on miss) and the world
    ray directions scaled so that ``origin + z * dir`` is the hit point.
    """
    d = intr.pixel_rays(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)) @ pose.R.T
    o = pose.t
    z = np.full(d.shape[:-1], np.inf)
    pid = np.full(d.shape[:-1], MISS, dtype=np.int64)
    for k, s in enumerate(scene.spheres):
        zk = _sphere_depth(o, d, s.center, s.radius)
        closer = zk < z
        z, pid = np.where(closer, zk, z), np.where(closer, k, pid)
    if scene.plane is not None:
        zk = _plane_depth(o, d, scene.plane.height)
        closer = zk < z
        z, pid = np.where(closer, zk, z), np.where(closer, len(scene.spheres), pid)
    return z, pid, d


def _occluded(scene: SceneSpec, p, light_pos, pid):
    """True where the segment from ``p`` to the light crosses another primitive."""
    blocked = np.zeros(p.shape[:-1], dtype=bool)
    seg = np.asarray(light_pos) - p
    for k, s in enumerate(scene.spheres):
        oc = p - np.asarray(s.center)
        a = np.sum(seg * seg, -1)
        b = np.sum(seg * oc, -1)
        c = np.sum(oc * oc, -1) - s.radius ** 2
        disc = b * b - a * c
        root = np.sqrt(np.maximum(disc, 0.0))
        s0, s1 = (-b - root) / a, (-b + root) / a
        blocked |= (pid != k) & (disc > 0) & (s1 > 0) & (s0 < 1)
    if scene.plane is not None:
        k = len(scene.spheres)
        h = scene.plane.height
        blocked |= (pid != k) & ((p[..., 1] - h) * (light_pos[1] - h) < 0)
    return blocked


def surface_normals(scene: SceneSpec, p, pid) -> np.ndarray:
    n = np.zeros(p.shape)
    for k, s in enumerate(scene.spheres):
        sel = pid == k
        n[sel] = (p[sel] - np.asarray(s.center)) / s.radius
    if scene.plane is not None:
        n[pid == len(scene.spheres)] = (0.0, 1.0, 0.0)
    return n


def material_maps(scene: SceneSpec, p, pid):
    """Per-point albedo ``[...,3]``, metallic, roughness and specular flag."""
    albedo = np.zeros(p.shape)
    metallic = np.zeros(p.shape[:-1])
    rough = np.zeros(p.shape[:-1])
    spec = np.zeros(p.shape[:-1], dtype=bool)
    for k, m in enumerate(scene.materials()):
        sel = pid == k
        albedo[sel] = m.albedo_at(p[sel])
        metallic[sel], rough[sel], spec[sel] = m.metallic, m.roughness, m.specular
    return albedo, metallic, rough, spec


def shade_surface(scene: SceneSpec, p, n, v, pid, albedo, metallic, rough, spec_on):
    """Diffuse shading ``[...,3]`` and specular radiance ``[...,3]`` with shadows."""
    shading = np.broadcast_to(np.asarray(scene.ambient) / np.pi, p.shape).copy()
    specular = np.zeros(p.shape)
    f0 = brdf.base_reflectance(albedo, metallic)
    for light in scene.lights:
        lp = np.asarray(light.position)
        ld = lp - p
        d2 = np.sum(ld * ld, -1)
        l = ld / np.sqrt(d2)[..., None]
        vis = ~_occluded(scene, p, lp, pid)
        cos = np.maximum(np.sum(n * l, -1), 0.0)
        irr = (vis / d2)[..., None] * np.asarray(light.intensity)
        shading += irr * (cos / np.pi)[..., None]
        specular += np.where(spec_on[..., None], irr * brdf.specular_cos(n, v, l, f0, rough), 0.0)
    return shading, specular


@dataclass
class ViewBundle:
    rgb: np.ndarray
    albedo: np.ndarray
    metallic: np.ndarray
    roughness: np.ndarray
    normal: np.ndarray
    shading: np.ndarray
    depth: np.ndarray
    specular: np.ndarray
    prim_id: np.ndarray
    intrinsics: Intrinsics
    pose: Pose
    flow_to_next: np.ndarray | None = None
    flow_valid: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    @property
    def hit(self) -> np.ndarray:
        return np.isfinite(self.depth)

    def targets(self) -> IntrinsicSet:
        return IntrinsicSet(self.albedo, self.metallic, self.roughness, self.normal, self.shading)


def render_view(scene: SceneSpec, pose_index: int, height: int | None = None, width: int | None = None) -> ViewBundle:
    if not 0 <= pose_index < scene.num_views:
        raise IndexError(f"pose index {pose_index} outside [0, {scene.num_views})")
    intr = scene.intrinsics
    intr = intr.resized(height or intr.height, width or intr.width)
    pose = scene.poses[pose_index]
    x, y = intr.pixel_centers()
    z, pid, d = cast_rays(scene, pose, intr, x, y)
    hit = pid != MISS
    H, W = z.shape

    albedo = np.zeros((H, W, 3))
    metallic = np.zeros((H, W))
    rough = np.zeros((H, W))
    shading = np.zeros((H, W, 3))
    specular = np.zeros((H, W, 3))
    normal_cam = np.zeros((H, W, 3))
    normal_cam[..., 2] = -1.0

    p = pose.t + z[hit][:, None] * d[hit]
    n = surface_normals(scene, p, pid[hit])
    v = pose.t - p
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    a, m, r, s_on = material_maps(scene, p, pid[hit])
    sh, sp = shade_surface(scene, p, n, v, pid[hit], a, m, r, s_on)
    albedo[hit], metallic[hit], rough[hit] = a, m, r
    shading[hit], specular[hit] = sh, sp
    normal_cam[hit] = n @ pose.R

    rgb = np.full((H, W, 3), BACKGROUND)
    rgb[hit] = np.clip(a * sh + sp, 0.0, 1.0)
    chw = lambda arr: np.ascontiguousarray(np.moveaxis(arr, -1, 0))
    return ViewBundle(
        rgb=chw(rgb), albedo=chw(albedo), metallic=metallic[None], roughness=rough[None], normal=chw(normal_cam),
        shading=chw(shading), depth=np.where(hit, z, np.inf), specular=chw(specular), prim_id=pid,
        intrinsics=intr, pose=pose,
    )


def analytic_flow(scene: SceneSpec, view_a: ViewBundle, pose_b: Pose, tol: float = OCCLUSION_TOL):
    """Flow from frame a's pixels into frame b, in pixels, plus validity.

    A pixel is valid when its surface point lands inside frame b with all
    bilinear taps in bounds, a ray cast through the landing position
    hits the same primitive at a depth within ``tol`` relative, and every tap
    with nonzero weight sees that primitive too.
    """
    intr = view_a.intrinsics
    H, W = view_a.depth.shape
    x, y = intr.pixel_centers()
    hit = view_a.hit
    z = np.where(hit, view_a.depth, 1.0)
    pc = intr.pixel_rays(x, y) * z[..., None]
    pw = view_a.pose.to_world(pc)
    pb = pose_b.to_camera(pw)
    front = pb[..., 2] > 0
    zb = np.where(front, pb[..., 2], 1.0)
    xb, yb = intr.project(np.concatenate([pb[..., :2], zb[..., None]], -1))
    flow = np.stack([xb - x, yb - y]) * hit
    flow = np.where(front & hit, flow, 0.0)

    ix, iy = xb - 0.5, yb - 0.5
    inb = hit & front & (ix >= -_SNAP) & (ix <= W - 1 + _SNAP) & (iy >= -_SNAP) & (iy <= H - 1 + _SNAP)
    z_ray, pid_ray, _ = cast_rays(scene, pose_b, intr, xb, yb)
    agree = np.abs(z_ray - zb) <= tol * np.where(np.isfinite(z_ray), z_ray, 1.0)
    valid = inb & (pid_ray == view_a.prim_id) & agree
    _, pid_b, _ = cast_rays(scene, pose_b, intr, *intr.pixel_centers())
    # positions within _SNAP of a pixel center use that pixel alone; neighbours
    # carrying (numerically) zero bilinear weight are not checked
    x0 = np.clip(np.floor(ix + _SNAP), 0, W - 1).astype(int)
    y0 = np.clip(np.floor(iy + _SNAP), 0, H - 1).astype(int)
    x1 = np.where(ix - x0 > _SNAP, np.minimum(x0 + 1, W - 1), x0)
    y1 = np.where(iy - y0 > _SNAP, np.minimum(y0 + 1, H - 1), y0)
    for yy, xx in ((y0, x0), (y0, x1), (y1, x0), (y1, x1)):
        valid &= pid_b[yy, xx] == view_a.prim_id
    flow = np.where(valid & (np.abs(flow) > _SNAP), flow, 0.0)
    return flow, valid


def render_sequence(scene: SceneSpec, height: int | None = None, width: int | None = None,
                    with_flow: bool = True) -> list[ViewBundle]:
    """Render every pose; each view but the last carries flow to its successor."""
    views = [render_view(scene, i, height, width) for i in range(scene.num_views)]
    if with_flow:
        for a, b in zip(views[:-1], views[1:]):
            a.flow_to_next, a.flow_valid = analytic_flow(scene, a, b.pose)
    return views


def stack_targets(views: list[ViewBundle]) -> tuple[IntrinsicSet, np.ndarray]:
    """Batched ground-truth maps ``[N,C,H,W]`` and hit mask ``[N,H,W]``."""
    maps = IntrinsicSet(*(np.stack([getattr(v, k) for v in views]) for k in
                          ("albedo", "metallic", "roughness", "normal", "shading")))
    return maps, np.stack([v.hit for v in views])
