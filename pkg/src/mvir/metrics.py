"""Evaluation metrics: cross-view consistency, temporal warp error, normal
angles, PSNR and SSIM, plus table/JSONL report writers."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ContractError
from .geometry import CameraView, reproject_map, warp_backward

CONSISTENCY_CHANNELS = ("albedo", "metallic", "roughness")
TEMPORAL_CHANNELS = ("albedo", "metallic", "roughness", "shading")
PSNR_CAP = 99.0
UNIT_TOL = 1e-4


@dataclass
class ConsistencyReport:
    rmse: dict
    pair_count: int
    mean_overlap: float
    pairs: list = field(default_factory=list)  # (src, dst, overlap pixel count)

    def record(self) -> dict:
        return {"metric": "mv_consistency", **{f"rmse_{k}": v for k, v in self.rmse.items()},
                "pair_count": self.pair_count, "mean_overlap": self.mean_overlap}


@dataclass
class NormalReport:
    mae_deg: float
    pct_below_11_25: float
    pct_below_30: float
    count: int

    def record(self) -> dict:
        return {"metric": "normals", **asdict(self)}


def _per_view(preds, i):
    return preds[i] if isinstance(preds, (list, tuple)) else preds.select(i)


def mv_consistency_rmse(views: list[CameraView], preds, max_views: int = 10, min_overlap: float = 0.05,
                        tol: float = 0.01, channels=CONSISTENCY_CHANNELS) -> ConsistencyReport:
    """Reproject each view's predictions into every other view and pool squared
    differences against the direct prediction over all overlap pixels."""
    views = list(views)[:max_views]
    if len(views) < 2:
        raise ConfigError(f"mv_consistency_rmse needs at least 2 views, got {len(views)}")
    sq = {k: 0.0 for k in channels}
    n_entries = {k: 0 for k in channels}
    pairs, fractions = [], []
    for s, src in enumerate(views):
        ps = _per_view(preds, s)
        for d, dst in enumerate(views):
            if s == d:
                continue
            pd = _per_view(preds, d)
            stacked = np.concatenate([np.asarray(ps[k]) for k in channels])
            out, overlap = reproject_map(src, stacked, dst, tol)
            frac = overlap.mean()
            if frac < min_overlap:
                continue
            pairs.append((s, d, int(overlap.sum())))
            fractions.append(frac)
            c0 = 0
            for k in channels:
                c = np.asarray(ps[k]).shape[0]
                diff = out[c0:c0 + c][:, overlap] - np.asarray(pd[k])[:, overlap]
                sq[k] += float(np.sum(diff * diff))
                n_entries[k] += diff.size
                c0 += c
    rmse = {k: float(np.sqrt(sq[k] / n_entries[k])) if n_entries[k] else float("nan") for k in channels}
    return ConsistencyReport(rmse, len(pairs), float(np.mean(fractions)) if fractions else 0.0, pairs)


def temporal_warp_rmse(preds, flows, valid, channels=TEMPORAL_CHANNELS) -> dict:
    """Per-channel RMSE between frame t and frame t+1 warped into t, averaged over pairs.

    ``preds`` is a batched intrinsic set over T frames; ``flows[t]`` maps
    frame t pixels into frame t+1 and ``valid[t]`` marks usable pixels.
    """
    n = np.asarray(preds.albedo).shape[0]
    if n < 2:
        raise ConfigError("temporal_warp_rmse needs at least 2 frames")
    if len(flows) != n - 1 or len(valid) != n - 1:
        raise ConfigError(f"expected {n - 1} flow fields, got {len(flows)}")
    out = {}
    for k in channels:
        m = np.asarray(preds[k])
        per_pair = []
        for t in range(n - 1):
            warped, mask = warp_backward(m[t + 1], flows[t], valid[t])
            if not mask.any():
                continue
            diff = warped.data[:, mask] - m[t][:, mask]
            per_pair.append(np.sqrt(np.mean(diff * diff)))
        out[k] = float(np.mean(per_pair)) if per_pair else float("nan")
    return out


def normal_metrics(pred, gt, mask=None) -> NormalReport:
    """Angular error statistics between unit normal maps ``[3,H,W]`` (or batched)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"normal maps differ in shape: {pred.shape} vs {gt.shape}")
    cax = pred.ndim - 3
    m = np.ones(pred.shape[:cax] + pred.shape[cax + 1:], dtype=bool) if mask is None else np.asarray(mask, bool)
    a = np.moveaxis(pred, cax, -1)[m]
    b = np.moveaxis(gt, cax, -1)[m]
    for name, arr in (("prediction", a), ("ground truth", b)):
        dev = np.abs(np.linalg.norm(arr, axis=-1) - 1.0)
        if dev.size and dev.max() > UNIT_TOL:
            raise ContractError(f"normal_metrics: {name} normals are not unit length (max dev {dev.max():.3g})")
    if len(a) == 0:
        raise ValueError("normal_metrics: mask selects no pixels")
    # atan2 form of arccos(<a,b>): same angle, accurate near 0 and 180 degrees
    cos = np.clip(np.sum(a * b, -1), -1.0, 1.0)
    sin = np.linalg.norm(np.cross(a, b), axis=-1)
    ang = np.degrees(np.arctan2(sin, cos))
    return NormalReport(float(ang.mean()), float(100.0 * np.mean(ang < 11.25)), float(100.0 * np.mean(ang < 30.0)),
                        int(len(ang)))


def psnr(pred, ref) -> float:
    mse = float(np.mean((np.asarray(pred, dtype=np.float64) - np.asarray(ref, dtype=np.float64)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def _filter(img, g):
    """Valid-mode separable filtering of ``[..., H, W]``."""
    rows = sliding_window_view(img, len(g), axis=-1) @ g
    return sliding_window_view(rows, len(g), axis=-2) @ g


def ssim(pred, ref, size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over every fully covered window position and channel."""
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(ref, dtype=np.float64)
    if x.shape[-1] < size or x.shape[-2] < size:
        raise ValueError(f"image {x.shape[-2:]} smaller than the {size}x{size} SSIM window")
    g = gaussian_window(size, sigma)
    c1, c2 = k1 ** 2, k2 ** 2
    mx, my = _filter(x, g), _filter(y, g)
    sxx = _filter(x * x, g) - mx * mx
    syy = _filter(y * y, g) - my * my
    sxy = _filter(x * y, g) - mx * my
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(s.mean())


def psnr_ssim(pred, ref) -> tuple[float, float]:
    return psnr(pred, ref), ssim(pred, ref)


def format_table(records: list[dict]) -> str:
    """Fixed-width text table over the union of record keys."""
    keys = []
    for r in records:
        keys += [k for k in r if k not in keys]
    fmt = lambda v: f"{v:.6g}" if isinstance(v, float) else str(v)
    rows = [[fmt(r.get(k, "")) for k in keys] for r in records]
    widths = [max(len(k), *(len(row[i]) for row in rows)) for i, k in enumerate(keys)]
    line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    return "\n".join([line(keys), line(["-" * w for w in widths])] + [line(r) for r in rows]) + "\n"


def write_report(out_dir, name: str, records: list[dict]) -> tuple[Path, Path]:
    """Write ``name.txt`` (table) and ``name.jsonl`` (one JSON object per record)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    txt, jsl = out / f"{name}.txt", out / f"{name}.jsonl"
    txt.write_text(format_table(records))
    jsl.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    return txt, jsl
