import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvir import archive as A
from mvir import scenegen as S
from mvir import tensor as T
from mvir.camera import Intrinsics, Pose


def _two_sphere_scene(h=20, w=24):
    spheres = (
        S.Sphere((0.0, 0.5, 0.0), 0.4, S.Material((0.7, 0.3, 0.2), 0.3, 0.4)),
        S.Sphere((0.9, 0.45, -0.4), 0.3, S.Material((0.2, 0.6, 0.8), 0.8, 0.7)),
    )
    plane = S.Plane(0.0, S.Material((0.5, 0.5, 0.4), 0.0, 0.9, texture=S.Texture((0.2, 0.3, 0.7), 1.3)))
    lights = (S.PointLight((0.2, 3.0, 0.1), (2.0, 1.8, 1.6)), S.PointLight((-2.0, 2.0, 1.5), (1.0, 1.2, 1.4)))
    poses = (Pose.look_at((0.3, 2.5, 3.5), (0.0, 0.3, 0.0)), Pose.look_at((1.2, 2.4, 3.3), (0.0, 0.3, 0.0)))
    return S.SceneSpec(spheres, plane, lights, (0.2, 0.25, 0.3), poses, Intrinsics.from_fov(50.0, h, w))


# ---- straight-loop reference renderer -------------------------------------

def _ref_intersect(scene, o, u):
    """Nearest hit along unit direction ``u``: (distance, kind, index)."""
    best = (math.inf, None, -1)
    for k, s in enumerate(scene.spheres):
        oc = [o[i] - s.center[i] for i in range(3)]
        b = sum(u[i] * oc[i] for i in range(3))
        c = sum(v * v for v in oc) - s.radius ** 2
        disc = b * b - c
        if disc < 0:
            continue
        for t in (-b - math.sqrt(disc), -b + math.sqrt(disc)):
            if t > 1e-9:
                if t < best[0]:
                    best = (t, "sphere", k)
                break
    if scene.plane is not None and u[1] != 0:
        t = (scene.plane.height - o[1]) / u[1]
        if 1e-9 < t < best[0]:
            best = (t, "plane", len(scene.spheres))
    return best


def _ref_ggx(n, v, l, f0, rough):
    dot = lambda a, b: sum(a[i] * b[i] for i in range(3))
    nl = dot(n, l)
    if nl <= 0:
        return [0.0, 0.0, 0.0]
    hv = [v[i] + l[i] for i in range(3)]
    hn = math.sqrt(dot(hv, hv))
    hv = [c / hn for c in hv]
    nv = dot(n, v)
    a = rough * rough
    ndf = a * a / (math.pi * (dot(n, hv) ** 2 * (a * a - 1) + 1) ** 2)
    k = a / 2
    g = (nl / (nl * (1 - k) + k)) * (nv / (nv * (1 - k) + k))
    vh = max(dot(v, hv), 0.0)
    return [ndf * g * (f0[c] + (1 - f0[c]) * (1 - vh) ** 5) / (4 * nl * nv) * nl for c in range(3)]


def _ref_render(scene, pose_index, h, w):
    pose = scene.poses[pose_index]
    intr = scene.intrinsics.resized(h, w)
    R, o = pose.rotation, pose.translation
    out = {k: np.zeros((3, h, w)) for k in ("rgb", "albedo", "normal", "shading", "specular")}
    depth = np.full((h, w), math.inf)
    for i in range(h):
        for j in range(w):
            dc = [(j + 0.5 - intr.cx) / intr.fx, (i + 0.5 - intr.cy) / intr.fy, 1.0]
            dw = [sum(R[r][c] * dc[c] for c in range(3)) for r in range(3)]
            norm = math.sqrt(sum(c * c for c in dw))
            u = [c / norm for c in dw]
            t, kind, idx = _ref_intersect(scene, o, u)
            if kind is None:
                out["rgb"][:, i, j] = 0.5
                out["normal"][:, i, j] = (0, 0, -1)
                continue
            p = [o[c] + t * u[c] for c in range(3)]
            depth[i, j] = sum((p[r] - o[r]) * R[r][2] for r in range(3))
            if kind == "sphere":
                s = scene.spheres[idx]
                n = [(p[c] - s.center[c]) / s.radius for c in range(3)]
                mat = s.material
            else:
                n = [0.0, 1.0, 0.0]
                mat = scene.plane.material
            alb = list(mat.albedo)
            if mat.texture is not None:
                kk = 2 * math.pi / mat.texture.period
                wgt = (0.5 + 0.5 * math.sin(kk * p[0]) * math.sin(kk * p[2])) * math.exp(
                    -(p[0] ** 2 + p[2] ** 2) / (2 * mat.texture.extent ** 2))
                alb = [alb[c] + (mat.texture.color[c] - alb[c]) * wgt for c in range(3)]
            v = [-c for c in u]
            f0 = [0.04 * (1 - mat.metallic) + alb[c] * mat.metallic for c in range(3)]
            shade = [a / math.pi for a in scene.ambient]
            spec = [0.0, 0.0, 0.0]
            for light in scene.lights:
                lv = [light.position[c] - p[c] for c in range(3)]
                dist = math.sqrt(sum(c * c for c in lv))
                l = [c / dist for c in lv]
                t_occ, _, _ = _ref_intersect(scene, p, l)
                if t_occ < dist:
                    continue
                cos = max(0.0, sum(n[c] * l[c] for c in range(3)))
                sp = _ref_ggx(n, v, l, f0, mat.roughness) if mat.specular else [0.0] * 3
                for c in range(3):
                    shade[c] += light.intensity[c] * cos / (math.pi * dist * dist)
                    spec[c] += light.intensity[c] / (dist * dist) * sp[c]
            ncam = [sum(R[r][c] * n[r] for r in range(3)) for c in range(3)]
            for c in range(3):
                out["albedo"][c, i, j] = alb[c]
                out["shading"][c, i, j] = shade[c]
                out["specular"][c, i, j] = spec[c]
                out["normal"][c, i, j] = ncam[c]
                out["rgb"][c, i, j] = min(1.0, max(0.0, alb[c] * shade[c] + spec[c]))
    out["depth"] = depth
    return out


class TestRenderer:
    @pytest.mark.parametrize("pose_index", [0, 1])
    def test_matches_reference_renderer(self, pose_index):
        scene = _two_sphere_scene()
        got = S.render_view(scene, pose_index)
        ref = _ref_render(scene, pose_index, 20, 24)
        for name in ("rgb", "albedo", "normal", "shading", "specular"):
            assert np.abs(getattr(got, name) - ref[name]).max() < 1e-10, name
        hit = np.isfinite(ref["depth"])
        np.testing.assert_array_equal(got.hit, hit)
        assert np.abs(got.depth[hit] - ref["depth"][hit]).max() < 1e-10

    def test_scene_has_shadow_and_specular(self):
        v = S.render_view(_two_sphere_scene(), 0)
        assert v.specular.max() > 1e-3
        plane = v.prim_id == 2
        # the sphere below the first light must darken part of the plane
        lit = S.render_view(S.SceneSpec(((_two_sphere_scene().spheres[1]),), _two_sphere_scene().plane,
                                        _two_sphere_scene().lights, (0.2, 0.25, 0.3), _two_sphere_scene().poses,
                                        _two_sphere_scene().intrinsics), 0)
        assert (lit.shading[:, plane] - v.shading[:, plane]).max() > 1e-3

    def test_center_pixel_depth(self):
        sphere = S.Sphere((0.0, 0.0, 5.0), 1.25, S.Material((0.5, 0.5, 0.5)))
        scene = S.SceneSpec((sphere,), None, (S.PointLight((0, -3, 0), (1, 1, 1)),), (0, 0, 0),
                            (Pose.identity(),), Intrinsics.from_fov(40.0, 9, 9))
        v = S.render_view(scene, 0)
        assert abs(v.depth[4, 4] - 3.75) < 1e-12
        np.testing.assert_allclose(v.normal[:, 4, 4], [0, 0, -1], atol=1e-12)

    def test_lambertian_plane_identity(self):
        plane = S.Plane(0.0, S.Material((0.6, 0.4, 0.3), specular=False))
        scene = S.SceneSpec((), plane, (S.PointLight((0, 10, 0), (30, 30, 30)),), (0.1, 0.1, 0.1),
                            (Pose.look_at((0, 4, 0.001), (0, 0, 0)),), Intrinsics.from_fov(40, 9, 9))
        v = S.render_view(scene, 0)
        assert v.hit.all()
        np.testing.assert_array_equal(v.rgb, v.albedo * v.shading)

    def test_miss_pixels(self):
        v = S.render_view(S.gen_scene(0, "minimal"), 0)
        miss = ~v.hit
        assert miss.any()
        assert (v.rgb[:, miss] == 0.5).all() and (v.albedo[:, miss] == 0).all() and (v.shading[:, miss] == 0).all()
        assert np.isinf(v.depth[miss]).all()

    def test_resolution_override(self):
        scene = S.gen_scene(0, "easy")
        v = S.render_view(scene, 0, 32, 48)
        assert v.rgb.shape == (3, 32, 48) and v.intrinsics.width == 48

    def test_bad_pose_index(self):
        with pytest.raises(IndexError):
            S.render_view(S.gen_scene(0, "minimal"), 99)


@settings(max_examples=12, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["minimal", "easy", "medium", "lambertian"]))
def test_view_invariants(seed, difficulty):
    scene = S.gen_scene(seed, difficulty)
    v = S.render_view(scene, int(seed % scene.num_views), 24, 24)
    hit = v.hit
    # diffuse identity, on pixels the clamp did not touch
    pre = v.albedo * v.shading + v.specular
    free = hit & (pre <= 1.0).all(axis=0)
    diffuse = v.albedo * v.shading
    matte = free & (v.specular == 0).all(axis=0)
    np.testing.assert_array_equal(v.rgb[:, matte], diffuse[:, matte])
    # (a + b) - b is exact only up to one rounding of the sum
    assert np.abs((v.rgb - v.specular)[:, free] - diffuse[:, free]).max(initial=0) < 1e-15
    assert v.shading.min() >= 0 and v.shading.max() <= 1.0
    assert np.abs(np.linalg.norm(v.normal, axis=0) - 1).max() < 1e-12
    assert (v.depth[hit] > 0).all()
    # front facing: normals point back against the viewing ray
    x, y = v.intrinsics.pixel_centers()
    rays = v.intrinsics.pixel_rays(x, y)
    assert (np.einsum("hwc,chw->hw", rays, v.normal)[hit] < 0).all()


def test_doubling_lights_doubles_shading():
    scene = S.gen_scene(4, "medium")
    a = S.render_view(scene, 0, 24, 24)
    b = S.render_view(scene.scaled_lights(2.0), 0, 24, 24)
    np.testing.assert_allclose(b.shading, 2 * a.shading, rtol=1e-14, atol=0)


class TestGenScene:
    def test_deterministic(self):
        assert S.gen_scene(11, "medium") == S.gen_scene(11, "medium")
        assert A.canonical_json(S.gen_scene(11).to_dict()) == A.canonical_json(S.gen_scene(11).to_dict())

    def test_counts_within_bounds(self):
        counts = {len(S.gen_scene(s, "medium").spheres) for s in range(30)}
        assert counts <= {2, 3, 4} and len(counts) > 1

    def test_minimal_contract(self):
        for seed in range(5):
            sc = S.gen_scene(seed, "minimal")
            assert len(sc.spheres) == 1 and sc.plane is None and len(sc.lights) == 1
            m = sc.spheres[0].material
            assert not m.specular and m.metallic == 0
            assert len(set(sc.poses)) == 1

    def test_shading_bound_is_tight_enough(self):
        for seed in range(5):
            sc = S.gen_scene(seed, "easy")
            bound = S.shading_bound(sc.spheres, sc.plane, sc.lights, sc.ambient)
            assert abs(bound.max() - 1.0) < 1e-12

    def test_dict_round_trip(self):
        sc = S.gen_scene(3, "medium")
        assert S.SceneSpec.from_dict(sc.to_dict()) == sc

    def test_consecutive_views_overlap(self):
        for seed in range(3):
            views = S.render_sequence(S.gen_scene(seed, "medium"), 32, 32)
            for v in views[:-1]:
                assert v.flow_valid.mean() >= 0.5

    def test_invalid_material(self):
        with pytest.raises(ValueError):
            S.Material((0.5, 0.5, 0.5), roughness=0.01)


# ---- analytic flow -----------------------------------------------------------

def _ref_flow(scene, va, pose_b):
    """Per-pixel reprojection with explicit loops; no validity logic."""
    intr = va.intrinsics
    Ra, ta = va.pose.rotation, va.pose.translation
    Rb, tb = pose_b.rotation, pose_b.translation
    h, w = va.depth.shape
    flow = np.zeros((2, h, w))
    for i in range(h):
        for j in range(w):
            z = va.depth[i, j]
            if not math.isfinite(z):
                continue
            pc = [(j + 0.5 - intr.cx) / intr.fx * z, (i + 0.5 - intr.cy) / intr.fy * z, z]
            pw = [sum(Ra[r][c] * pc[c] for c in range(3)) + ta[r] for r in range(3)]
            qb = [sum(Rb[r][c] * (pw[r] - tb[r]) for r in range(3)) for c in range(3)]
            flow[0, i, j] = intr.fx * qb[0] / qb[2] + intr.cx - (j + 0.5)
            flow[1, i, j] = intr.fy * qb[1] / qb[2] + intr.cy - (i + 0.5)
    return flow


class TestAnalyticFlow:
    def test_static_camera(self):
        scene = S.gen_scene(2, "easy")
        v = S.render_view(scene, 0, 32, 32)
        flow, valid = S.analytic_flow(scene, v, v.pose)
        assert np.abs(flow).max() < 1e-12
        np.testing.assert_array_equal(valid, v.hit)

    def test_fronto_parallel_translation(self):
        plane = S.Plane(0.0, S.Material((0.5, 0.5, 0.5)))
        pa = Pose.look_at((0.0, 4.0, 0.0), (0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0))
        shift = 0.3
        pb = Pose.from_arrays(pa.R, pa.t + shift * pa.R[:, 0])
        intr = Intrinsics.from_fov(50, 32, 32)
        scene = S.SceneSpec((), plane, (S.PointLight((0, 5, 0), (1, 1, 1)),), (0, 0, 0), (pa, pb), intr)
        v = S.render_view(scene, 0)
        flow, valid = S.analytic_flow(scene, v, pb)
        np.testing.assert_allclose(flow[0][valid], -intr.fx * shift / 4.0, atol=1e-10)
        assert np.abs(flow[1][valid]).max() < 1e-10
        assert valid.mean() > 0.8

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_reprojection_oracle(self, seed):
        scene = S.gen_scene(seed, "medium")
        va = S.render_view(scene, 0, 24, 24)
        flow, valid = S.analytic_flow(scene, va, scene.poses[1])
        ref = _ref_flow(scene, va, scene.poses[1])
        assert valid.sum() > 100
        assert np.abs(flow[:, valid] - ref[:, valid]).max() < 1e-8

    def test_occluded_pixels_invalid(self):
        front = S.Sphere((0.0, 0.0, 3.0), 0.5, S.Material((0.9, 0.1, 0.1)))
        back = S.Sphere((0.0, 0.0, 6.0), 1.5, S.Material((0.1, 0.9, 0.1)))
        pa = Pose.identity()
        pb = Pose.from_arrays(np.eye(3), [1.2, 0.0, 0.0])
        scene = S.SceneSpec((front, back), None, (S.PointLight((0, -4, 0), (5, 5, 5)),), (0, 0, 0), (pa, pb),
                            Intrinsics.from_fov(60, 33, 33))
        va = S.render_view(scene, 0)
        vb = S.render_view(scene, 1)
        flow, valid = S.analytic_flow(scene, va, pb)
        # exhaustive check: a valid pixel must land on the same primitive at matching depth in b
        for i, j in zip(*np.nonzero(valid)):
            x, y = j + 0.5 + flow[0, i, j], i + 0.5 + flow[1, i, j]
            z, pid, _ = S.cast_rays(scene, pb, va.intrinsics, np.array(x), np.array(y))
            assert pid == va.prim_id[i, j]
        # some back-sphere pixels visible in a are hidden behind the front sphere in b
        assert ((va.prim_id == 1) & ~valid & va.hit).sum() > 0
        assert vb.hit.any()

    @pytest.mark.parametrize("difficulty", ["easy", "medium"])
    def test_ground_truth_warp(self, difficulty):
        for seed in range(3):
            views = S.render_sequence(S.gen_scene(seed, difficulty))
            for a, b in zip(views[:-1], views[1:]):
                h, w = a.depth.shape
                ix = np.arange(w)[None, :] + a.flow_to_next[0]
                iy = np.arange(h)[:, None] + a.flow_to_next[1]
                warped = T.sample_bilinear(T.Tensor(b.albedo), ix, iy).data
                err = (warped - a.albedo)[:, a.flow_valid]
                assert np.sqrt(np.mean(err ** 2)) < 1e-3


class TestArchive:
    def test_pfm_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        for shape in [(5, 7), (3, 5, 7), (1, 4, 4)]:
            arr = rng.normal(size=shape).astype(np.float32).astype(np.float64)
            A.write_pfm(tmp_path / "m.pfm", arr)
            back = A.read_pfm(tmp_path / "m.pfm")
            np.testing.assert_array_equal(back, arr.reshape(back.shape))

    def test_pfm_layout(self, tmp_path):
        arr = np.arange(6, dtype=np.float64).reshape(2, 3)
        A.write_pfm(tmp_path / "m.pfm", arr)
        raw = (tmp_path / "m.pfm").read_bytes()
        assert raw.startswith(b"Pf\n3 2\n-1.0\n")
        # bottom row first, little-endian
        np.testing.assert_array_equal(np.frombuffer(raw[-24:], "<f4"), [3, 4, 5, 0, 1, 2])

    def test_pfm_rejects_two_channels(self, tmp_path):
        with pytest.raises(A.ArchiveError):
            A.write_pfm(tmp_path / "m.pfm", np.zeros((2, 3, 3)))

    def test_scene_round_trip(self, tmp_path):
        scene = S.gen_scene(5, "easy")
        views = S.render_sequence(scene, 16, 16)
        A.write_scene_dir(tmp_path / "s", scene, views)
        scene2, views2 = A.load_scene_dir(tmp_path / "s")
        assert scene2 == scene
        assert len(views2) == len(views)
        for a, b in zip(views, views2):
            assert a.pose == b.pose and a.intrinsics == b.intrinsics
            np.testing.assert_allclose(b.albedo, a.albedo, atol=1e-7)
            np.testing.assert_array_equal(b.prim_id, a.prim_id)
            np.testing.assert_array_equal(np.isinf(b.depth), np.isinf(a.depth))
        np.testing.assert_array_equal(views2[0].flow_valid, views[0].flow_valid)
        assert views2[-1].flow_to_next is None

    def test_archive_is_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            A.write_archive(tmp_path / name, [7], "medium", 16, 16)
        files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
        assert files_a == files_b
        for f in files_a:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_missing_index(self, tmp_path):
        with pytest.raises(A.ArchiveError):
            A.list_scenes(tmp_path)
