"""Supervision terms for pretraining and consistency finetuning.

Predictions are tape tensors ``[N, C, H, W]``; targets are plain arrays of
the same shape; masks are boolean ``[N, H, W]`` arrays. Every reduction
divides by the number of valid entries, never by the full pixel count.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor

EPS = 1e-8
ALBEDO_LO = 0.01
ALBEDO_HI = 0.99
MSG_SCALES = 4
# channels carried by the temporal-consistency objective; camera-space
# normals change with viewpoint and are excluded
FINETUNE_CHANNELS = ("albedo", "metallic", "roughness", "shading")


class EmptyMaskWarning(UserWarning):
    """A loss was asked to reduce over zero valid entries."""


@dataclass(frozen=True)
class LossWeights:
    albedo: float = 1.0
    metallic: float = 1.0
    roughness: float = 1.0
    normal: float = 1.0
    shading: float = 1.0
    anchor: float = 0.1

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be nonnegative, got {v}")


def _mask4(mask, like_shape) -> np.ndarray:
    """Broadcastable ``[N,1,H,W]`` float mask."""
    n, _, h, w = like_shape
    if mask is None:
        return np.ones((n, 1, h, w))
    m = np.asarray(mask, dtype=bool)
    if m.ndim == 2:
        m = m[None]
    if m.ndim == 3:
        m = m[:, None]
    return np.broadcast_to(m, (n, 1, h, w)).astype(np.float64)


def _zero(like: Tensor) -> Tensor:
    return T.tsum(like * 0.0)


def validity_mask(gt_albedo: np.ndarray, base=None, lo: float = ALBEDO_LO, hi: float = ALBEDO_HI) -> np.ndarray:
    """Pixels whose ground-truth albedo is informative in every channel."""
    a = np.asarray(gt_albedo)
    m = np.all((a >= lo) & (a <= hi), axis=1)
    if base is not None:
        m &= np.asarray(base, dtype=bool).reshape(m.shape)
    return m


def mse_loss(pred: Tensor, target, mask=None) -> Tensor:
    m = _mask4(mask, pred.shape).astype(pred.dtype)
    count = m.sum() * pred.shape[1]
    diff = pred - np.asarray(target, dtype=pred.dtype)
    if count == 0:
        warnings.warn("mse_loss: no valid pixels; returning 0", EmptyMaskWarning, stacklevel=2)
        return _zero(diff)
    return T.tsum(diff * diff * m) * (1.0 / count)


def _downsample_mask(m: np.ndarray, h: int, w: int) -> np.ndarray:
    """AND over each output pixel's bilinear footprint."""
    ry = T.resize_matrix(m.shape[-2], h) > 0
    rx = T.resize_matrix(m.shape[-1], w) > 0
    bad = ry.astype(np.float64) @ (~m).astype(np.float64) @ rx.T.astype(np.float64)
    return bad == 0


def msg_loss(pred: Tensor, target, mask=None, scales: int = MSG_SCALES) -> Tensor:
    """Masked squared difference of forward-difference gradients over a factor-2 pyramid."""
    if scales < 1:
        raise ValueError("msg_loss needs at least one scale")
    target = T.Tensor(np.asarray(target, dtype=pred.dtype), dtype=pred.dtype)
    m = _mask4(mask, pred.shape) > 0
    p, g = pred, target
    per_scale = []
    for level in range(scales):
        h, w = p.shape[-2:]
        if level > 0:
            h, w = h // 2, w // 2
            if h < 2 or w < 2:
                warnings.warn(f"msg_loss: scale {level} smaller than 2x2; skipped", EmptyMaskWarning, stacklevel=2)
                break
            m = _downsample_mask(m, h, w)
            p = T.bilinear_resize(p, h, w)
            g = T.bilinear_resize(g, h, w)
        d = p - g
        mx = (m[..., :, 1:] & m[..., :, :-1]).astype(pred.dtype)
        my = (m[..., 1:, :] & m[..., :-1, :]).astype(pred.dtype)
        count = (mx.sum() + my.sum()) * pred.shape[1]
        if count == 0:
            continue
        gx = d[..., :, 1:] - d[..., :, :-1]
        gy = d[..., 1:, :] - d[..., :-1, :]
        per_scale.append((T.tsum(gx * gx * mx) + T.tsum(gy * gy * my)) * (1.0 / count))
    if not per_scale:
        warnings.warn("msg_loss: no valid gradient entries; returning 0", EmptyMaskWarning, stacklevel=2)
        return _zero(pred)
    total = per_scale[0]
    for term in per_scale[1:]:
        total = total + term
    return total * (1.0 / len(per_scale))


def albedo_scale(pred: Tensor, target, mask=None) -> Tensor:
    """Per-view, per-channel least-squares scale ``[N, C, 1, 1]`` aligning ``pred`` to ``target``."""
    m = _mask4(mask, pred.shape).astype(pred.dtype)
    tgt = np.asarray(target, dtype=pred.dtype)
    num = T.tsum(pred * (tgt * m), axis=(2, 3), keepdims=True)
    den = T.tsum(pred * pred * m, axis=(2, 3), keepdims=True)
    degenerate = den.data < EPS
    s = T.maximum(num, 0.0) / T.maximum(den, EPS)
    return T.where(degenerate, np.ones_like(den.data), s)


def scale_invariant_albedo_loss(pred: Tensor, target, mask=None) -> Tensor:
    s = albedo_scale(pred, target, mask)
    return mse_loss(pred * s, target, mask)


def normal_loss(pred: Tensor, target, mask=None) -> Tensor:
    """Mean of ``1 - <n_pred, n_gt>`` over valid pixels."""
    m = _mask4(mask, pred.shape)[:, 0] > 0
    tgt = np.asarray(target, dtype=pred.dtype)
    if T.STRICT:
        for name, arr in (("prediction", pred.data), ("target", tgt)):
            norms = np.linalg.norm(arr, axis=1)[m]
            if norms.size and np.abs(norms - 1.0).max() > 1e-3:
                raise ContractError(f"normal_loss: {name} is not unit length (max dev {np.abs(norms - 1).max():.3g})")
    count = m.sum()
    cos = T.tsum(pred * tgt, axis=1)
    if count == 0:
        warnings.warn("normal_loss: no valid pixels; returning 0", EmptyMaskWarning, stacklevel=2)
        return _zero(cos)
    return T.tsum((1.0 - cos) * m.astype(pred.dtype)) * (1.0 / count)


def composite_terms(pred, gt, mask=None, weights: LossWeights = LossWeights(), warmup: bool = False,
                    scales: int = MSG_SCALES) -> dict[str, Tensor]:
    """Weighted per-property terms of the pretraining objective."""
    if pred.num_views != np.asarray(gt.albedo).shape[0]:
        raise ValueError(f"view count mismatch: {pred.num_views} predicted vs {np.asarray(gt.albedo).shape[0]} targets")
    albedo_data = mse_loss if warmup else scale_invariant_albedo_loss
    terms = {
        "albedo": albedo_data(pred.albedo, gt.albedo, mask) + msg_loss(pred.albedo, gt.albedo, mask, scales),
        "metallic": mse_loss(pred.metallic, gt.metallic, mask) + msg_loss(pred.metallic, gt.metallic, mask, scales),
        "roughness": mse_loss(pred.roughness, gt.roughness, mask) + msg_loss(pred.roughness, gt.roughness, mask, scales),
        "normal": normal_loss(pred.normal, gt.normal, mask),
        "shading": mse_loss(pred.shading, gt.shading, mask) + msg_loss(pred.shading, gt.shading, mask, scales),
    }
    return {k: v * getattr(weights, k) for k, v in terms.items()}


def composite_loss(pred, gt, mask=None, weights: LossWeights = LossWeights(), warmup: bool = False,
                   scales: int = MSG_SCALES) -> Tensor:
    terms = list(composite_terms(pred, gt, mask, weights, warmup, scales).values())
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def finetune_loss(pred_0: Tensor, pretrained_0, pred_t: Tensor, warped: Tensor, valid, anchor: float = 0.1) -> Tensor:
    """Anchor-plus-consistency objective for one map.

    ``pred_0``/``pretrained_0`` are frame-0 predictions of the finetuned and
    frozen models; ``warped`` is frame t+1's prediction sampled into frame t.
    The anchor term averages over all entries, the consistency term over
    ``valid`` pixels only.
    """
    ref = np.asarray(pretrained_0.data if isinstance(pretrained_0, Tensor) else pretrained_0, dtype=pred_0.dtype)
    d0 = pred_0 - ref
    anchor_term = T.mean(d0 * d0)
    v = np.asarray(valid, dtype=bool)
    if v.ndim == pred_t.ndim - 1:
        v = v[..., None, :, :]
    m = np.broadcast_to(v, pred_t.shape).astype(pred_t.dtype)
    count = m.sum()
    dt = pred_t - warped
    if count == 0:
        warnings.warn("finetune_loss: empty flow-validity mask; consistency term is 0", EmptyMaskWarning, stacklevel=2)
        consistency = _zero(dt)
    else:
        consistency = T.tsum(dt * dt * m) * (1.0 / count)
    return anchor_term * anchor + consistency
