"""On-disk scene archives.

Layout of one scene directory::

    scene.json        full SceneSpec, canonical JSON
    cameras.txt       one row per view: intrinsics and camera-to-world pose
    view_NNN/         float maps as little-endian PFM plus an 8-bit rgb.png

Three-channel maps are stored as ``PF`` and single-channel maps as ``Pf``.
Flow is stored as a three-channel ``PF`` file holding (du, dv, valid) since
PFM has no two-channel variant.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import Intrinsics, Pose
from .scenegen import SceneSpec, ViewBundle, gen_scene, render_sequence

MAP_FILES = ("rgb", "albedo", "metallic", "roughness", "normal", "shading", "depth", "specular", "prim_id")
CAMERA_HEADER = "# view fx fy cx cy width height r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz"


class ArchiveError(ValueError):
    pass


def write_pfm(path, data: np.ndarray) -> None:
    """Write ``[H,W]``, ``[1,H,W]`` or ``[3,H,W]`` float data, rows bottom to top."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim == 2:
        tag, hwc = b"Pf", arr[..., None]
    elif arr.ndim == 3 and arr.shape[0] == 3:
        tag, hwc = b"PF", np.moveaxis(arr, 0, -1)
    else:
        raise ArchiveError(f"PFM holds 1 or 3 channels, got shape {arr.shape}")
    h, w = hwc.shape[:2]
    body = np.ascontiguousarray(hwc[::-1], dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n" + body)


def read_pfm(path) -> np.ndarray:
    """Return ``[H,W]`` for ``Pf`` files and ``[3,H,W]`` for ``PF`` files."""
    with open(path, "rb") as fh:
        tag = fh.readline().strip()
        dims = fh.readline().split()
        scale = float(fh.readline())
        raw = fh.read()
    if tag not in (b"PF", b"Pf"):
        raise ArchiveError(f"{path}: not a PFM file")
    w, h = int(dims[0]), int(dims[1])
    c = 3 if tag == b"PF" else 1
    arr = np.frombuffer(raw, dtype="<f4" if scale < 0 else ">f4").astype(np.float64)
    if arr.size != w * h * c:
        raise ArchiveError(f"{path}: expected {w * h * c} values, found {arr.size}")
    arr = arr.reshape(h, w, c)[::-1]
    return np.ascontiguousarray(arr[..., 0] if c == 1 else np.moveaxis(arr, -1, 0))


def write_png(path, rgb: np.ndarray) -> None:
    img = np.clip(np.round(np.moveaxis(np.asarray(rgb), 0, -1) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path, format="PNG")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def _camera_row(i: int, intr: Intrinsics, pose: Pose) -> str:
    vals = [intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height,
            *(v for row in pose.rotation for v in row), *pose.translation]
    return " ".join([str(i)] + [repr(v) for v in vals])


def write_cameras(path, views: list[ViewBundle]) -> None:
    lines = [CAMERA_HEADER] + [_camera_row(i, v.intrinsics, v.pose) for i, v in enumerate(views)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_cameras(path) -> list[tuple[Intrinsics, Pose]]:
    cams = []
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        f = line.split()
        if len(f) != 19:
            raise ArchiveError(f"{path}: camera row needs 19 fields, got {len(f)}")
        intr = Intrinsics(float(f[1]), float(f[2]), float(f[3]), float(f[4]), int(f[5]), int(f[6]))
        rot = np.array([float(v) for v in f[7:16]]).reshape(3, 3)
        cams.append((intr, Pose.from_arrays(rot, [float(v) for v in f[16:19]])))
    return cams


def write_scene_dir(path, scene: SceneSpec, views: list[ViewBundle]) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    (root / "scene.json").write_text(canonical_json(scene.to_dict()))
    write_cameras(root / "cameras.txt", views)
    for i, v in enumerate(views):
        vd = root / f"view_{i:03d}"
        vd.mkdir(exist_ok=True)
        write_png(vd / "rgb.png", v.rgb)
        for name in MAP_FILES:
            write_pfm(vd / f"{name}.pfm", getattr(v, name))
        if v.flow_to_next is not None:
            write_pfm(vd / "flow.pfm", np.concatenate([v.flow_to_next, v.flow_valid[None].astype(np.float64)]))
    return root


def load_scene_dir(path) -> tuple[SceneSpec, list[ViewBundle]]:
    """Load a scene directory. Maps come back at the 32-bit precision stored on disk."""
    root = Path(path)
    if not (root / "scene.json").exists():
        raise ArchiveError(f"{root}: missing scene.json")
    scene = SceneSpec.from_dict(json.loads((root / "scene.json").read_text()))
    views = []
    for i, (intr, pose) in enumerate(read_cameras(root / "cameras.txt")):
        vd = root / f"view_{i:03d}"
        maps = {name: read_pfm(vd / f"{name}.pfm") for name in MAP_FILES}
        for name in ("metallic", "roughness"):
            maps[name] = maps[name][None]
        maps["prim_id"] = maps["prim_id"].astype(np.int64)
        flow = valid = None
        if (vd / "flow.pfm").exists():
            f = read_pfm(vd / "flow.pfm")
            flow, valid = f[:2], f[2] > 0.5
        views.append(ViewBundle(**maps, intrinsics=intr, pose=pose, flow_to_next=flow, flow_valid=valid))
    return scene, views


def write_archive(root, seeds, difficulty="easy", height: int | None = None, width: int | None = None) -> Path:
    """Generate, render and store one scene per seed under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    names = []
    for seed in seeds:
        scene = gen_scene(int(seed), difficulty)
        name = f"scene_{int(seed):05d}"
        write_scene_dir(root / name, scene, render_sequence(scene, height, width))
        names.append(name)
    (root / "archive.json").write_text(canonical_json({"difficulty": str(difficulty), "scenes": names}))
    return root


def list_scenes(root) -> list[Path]:
    root = Path(root)
    index = root / "archive.json"
    if not index.exists():
        raise ArchiveError(f"{root}: not a scene archive (missing archive.json)")
    names = json.loads(index.read_text())["scenes"]
    if not names:
        raise ArchiveError(f"{root}: archive contains no scenes")
    return [root / n for n in names]
