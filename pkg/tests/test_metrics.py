import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvir import geometry as G
from mvir import metrics as M
from mvir import scenegen as S
from mvir.errors import ConfigError, ContractError
from mvir.model import IntrinsicSet


def _scene_views(seed, difficulty="easy", n=None):
    scene = S.gen_scene(seed, difficulty)
    bundles = S.render_sequence(scene)
    if n:
        bundles = bundles[:n]
    return bundles, [G.CameraView.from_bundle(b) for b in bundles]


def _random_unit(rng, shape):
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v, axis=0, keepdims=True)


class TestConsistency:
    def test_constant_maps(self):
        bundles, views = _scene_views(0, n=4)
        const = IntrinsicSet(np.full((3, 64, 64), 0.3), np.full((1, 64, 64), 0.2), np.full((1, 64, 64), 0.7),
                             None, None)
        rep = M.mv_consistency_rmse(views, [const] * 4)
        assert rep.pair_count == 12
        assert all(v == 0.0 for v in rep.rmse.values())

    @pytest.mark.parametrize("seed", range(3))
    def test_ground_truth_is_consistent(self, seed):
        bundles, views = _scene_views(seed, n=6)
        rep = M.mv_consistency_rmse(views, [b.targets() for b in bundles])
        assert rep.pair_count > 0 and 0 < rep.mean_overlap <= 1
        assert all(v < 1e-3 for v in rep.rmse.values())

    def test_batched_predictions(self):
        bundles, views = _scene_views(1, n=3)
        gt, _ = S.stack_targets(bundles)
        a = M.mv_consistency_rmse(views, gt)
        b = M.mv_consistency_rmse(views, [x.targets() for x in bundles])
        assert a.rmse == b.rmse

    @pytest.mark.parametrize("seed,n", [(0, 2), (1, 3), (2, 5)])
    def test_perturbation_oracle(self, seed, n):
        bundles, views = _scene_views(seed, n=n)
        sets = [b.targets() for b in bundles]
        base = M.mv_consistency_rmse(views, sets)
        k, delta = 1, 0.1
        bumped = IntrinsicSet(sets[k].albedo + delta * bundles[k].hit, sets[k].metallic, sets[k].roughness,
                              sets[k].normal, sets[k].shading)
        rep = M.mv_consistency_rmse(views, sets[:k] + [bumped] + sets[k + 1:])
        # every overlap pixel of a pair touching view k differs by exactly delta
        touched = sum(c for s, d, c in base.pairs if k in (s, d))
        total = sum(c for _, _, c in base.pairs)
        predicted = delta * math.sqrt(touched / total)
        assert abs(rep.rmse["albedo"] - predicted) < 1e-6
        assert 0.05 <= rep.rmse["albedo"] <= 0.1
        assert rep.rmse["metallic"] < 1e-3 and rep.rmse["roughness"] < 1e-3

    def test_pair_symmetry(self):
        bundles, views = _scene_views(4, n=6)
        sets = [b.targets() for b in bundles]
        ab = M.mv_consistency_rmse([views[0], views[3]], [sets[0], sets[3]])
        ba = M.mv_consistency_rmse([views[3], views[0]], [sets[3], sets[0]])
        for k in ab.rmse:
            assert abs(ab.rmse[k] - ba.rmse[k]) <= 1e-3

    def test_needs_two_views(self):
        bundles, views = _scene_views(0, n=1)
        with pytest.raises(ConfigError):
            M.mv_consistency_rmse(views, [bundles[0].targets()])

    def test_deterministic(self):
        bundles, views = _scene_views(5, n=4)
        sets = [b.targets() for b in bundles]
        assert M.mv_consistency_rmse(views, sets).record() == M.mv_consistency_rmse(views, sets).record()


class TestTemporal:
    def _flows(self, bundles):
        return [b.flow_to_next for b in bundles[:-1]], [b.flow_valid for b in bundles[:-1]]

    def test_static_identical(self):
        scene = S.gen_scene(0, "minimal")
        bundles = S.render_sequence(scene)
        gt, _ = S.stack_targets(bundles)
        out = M.temporal_warp_rmse(gt, *self._flows(bundles))
        assert all(v == 0.0 for v in out.values())

    @pytest.mark.parametrize("difficulty", ["easy", "medium"])
    def test_ground_truth_flow(self, difficulty):
        bundles = S.render_sequence(S.gen_scene(3, difficulty))
        gt, _ = S.stack_targets(bundles)
        out = M.temporal_warp_rmse(gt, *self._flows(bundles))
        assert set(out) == {"albedo", "metallic", "roughness", "shading"}
        assert out["albedo"] < 1e-3 and out["metallic"] < 1e-3 and out["roughness"] < 1e-3

    def test_alternating_offset(self):
        bundles = S.render_sequence(S.gen_scene(2, "easy"))
        gt, _ = S.stack_targets(bundles)
        delta = 0.05
        rough = gt.roughness.copy()
        rough[1::2] += delta
        preds = IntrinsicSet(gt.albedo, gt.metallic, rough, gt.normal, gt.shading)
        # constant-per-primitive roughness: the only residual is the injected offset
        out = M.temporal_warp_rmse(preds, *self._flows(bundles))
        assert abs(out["roughness"] - delta) < 1e-12

    def test_needs_two_frames(self):
        gt, _ = S.stack_targets(S.render_sequence(S.gen_scene(0, "easy"))[:1])
        with pytest.raises(ConfigError):
            M.temporal_warp_rmse(gt, [], [])


class TestNormals:
    def test_identical(self):
        n = _random_unit(np.random.default_rng(0), (3, 16, 16))
        rep = M.normal_metrics(n, n)
        assert rep.mae_deg == 0.0 and rep.pct_below_11_25 == 100.0 and rep.pct_below_30 == 100.0

    def test_uniform_rotation(self):
        rng = np.random.default_rng(1)
        n = _random_unit(rng, (3, 16, 16))
        u = rng.normal(size=(3, 16, 16))
        u -= np.sum(u * n, axis=0) * n
        u /= np.linalg.norm(u, axis=0)
        ang = np.radians(20.0)
        rot = np.cos(ang) * n + np.sin(ang) * u
        rep = M.normal_metrics(rot, n)
        assert abs(rep.mae_deg - 20.0) < 1e-6
        assert rep.pct_below_11_25 == 0.0 and rep.pct_below_30 == 100.0

    def test_per_pixel_oracle(self):
        rng = np.random.default_rng(2)
        a, b = _random_unit(rng, (3, 12, 10)), _random_unit(rng, (3, 12, 10))
        mask = rng.uniform(size=(12, 10)) > 0.3
        angles = []
        for i in range(12):
            for j in range(10):
                if mask[i, j]:
                    d = sum(a[c, i, j] * b[c, i, j] for c in range(3))
                    angles.append(math.degrees(math.acos(max(-1.0, min(1.0, d)))))
        rep = M.normal_metrics(a, b, mask)
        assert abs(rep.mae_deg - sum(angles) / len(angles)) < 1e-9
        assert abs(rep.pct_below_30 - 100 * sum(x < 30 for x in angles) / len(angles)) < 1e-12

    def test_non_unit(self):
        n = _random_unit(np.random.default_rng(3), (3, 4, 4))
        with pytest.raises(ContractError):
            M.normal_metrics(n * 1.01, n)

    def test_batched(self):
        n = _random_unit(np.random.default_rng(4), (3, 10, 5))
        batched = n.reshape(3, 2, 5, 5).transpose(1, 0, 2, 3)
        assert M.normal_metrics(batched, batched).count == 50


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 30.0))
def test_normal_report_monotone(seed, extra_deg):
    rng = np.random.default_rng(seed)
    n = _random_unit(rng, (3, 6, 6))
    u = rng.normal(size=(3, 6, 6))
    u -= np.sum(u * n, axis=0) * n
    u /= np.linalg.norm(u, axis=0)
    base_ang = np.radians(rng.uniform(0, 60, size=(6, 6)))
    more = base_ang + np.radians(extra_deg)
    a = M.normal_metrics(np.cos(base_ang) * n + np.sin(base_ang) * u, n)
    b = M.normal_metrics(np.cos(more) * n + np.sin(more) * u, n)
    assert 0 <= a.pct_below_11_25 <= a.pct_below_30 <= 100
    assert b.pct_below_11_25 <= a.pct_below_11_25 and b.pct_below_30 <= a.pct_below_30


def _loop_ssim(x, y, size=11, sigma=1.5):
    ax = [i - (size - 1) / 2 for i in range(size)]
    g = [math.exp(-v * v / (2 * sigma * sigma)) for v in ax]
    tot = sum(a * b for a in g for b in g)
    w = [[a * b / tot for b in g] for a in g]
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for c in range(x.shape[0]):
        for i in range(x.shape[1] - size + 1):
            for j in range(x.shape[2] - size + 1):
                px = x[c, i:i + size, j:j + size]
                py = y[c, i:i + size, j:j + size]
                mx = sum(w[a][b] * px[a, b] for a in range(size) for b in range(size))
                my = sum(w[a][b] * py[a, b] for a in range(size) for b in range(size))
                vx = sum(w[a][b] * (px[a, b] - mx) ** 2 for a in range(size) for b in range(size))
                vy = sum(w[a][b] * (py[a, b] - my) ** 2 for a in range(size) for b in range(size))
                cxy = sum(w[a][b] * (px[a, b] - mx) * (py[a, b] - my) for a in range(size) for b in range(size))
                vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return sum(vals) / len(vals)


class TestImageMetrics:
    def test_identical(self):
        x = np.random.default_rng(0).uniform(size=(3, 16, 16))
        p, s = M.psnr_ssim(x, x)
        assert p == 99.0 and abs(s - 1.0) < 1e-12

    def test_psnr_closed_form(self):
        x = np.zeros((3, 8, 8))
        assert abs(M.psnr(x + 0.1, x) - 20.0) < 1e-10

    def test_ssim_matches_window_loop(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(size=(2, 14, 13))
        y = np.clip(x + rng.normal(scale=0.1, size=x.shape), 0, 1)
        assert abs(M.ssim(x, y) - _loop_ssim(x, y)) < 1e-6

    def test_ssim_too_small(self):
        with pytest.raises(ValueError):
            M.ssim(np.zeros((1, 5, 5)), np.zeros((1, 5, 5)))


def test_report_writers(tmp_path):
    records = [{"metric": "a", "x": 1.5}, {"metric": "b", "y": 2}]
    txt, jsl = M.write_report(tmp_path, "r", records)
    lines = txt.read_text().splitlines()
    assert lines[0].split() == ["metric", "x", "y"]
    assert [json.loads(l) for l in jsl.read_text().splitlines()] == records
