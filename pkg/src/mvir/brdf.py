"""Cook-Torrance microfacet specular with a GGX distribution, Smith-Schlick
geometry and Schlick Fresnel. Shared by the scene renderer and the
point-cloud relighter so the two agree exactly.
"""

from __future__ import annotations

import numpy as np

DIELECTRIC_F0 = 0.04
MIN_ROUGHNESS = 0.05
_NV_FLOOR = 1e-8


def base_reflectance(albedo, metallic) -> np.ndarray:
    metallic = np.asarray(metallic, dtype=np.float64)
    if metallic.ndim and metallic.shape[-1] != 1:
        metallic = metallic[..., None]
    return DIELECTRIC_F0 * (1.0 - metallic) + np.asarray(albedo, dtype=np.float64) * metallic


def _dot(a, b):
    return np.sum(a * b, axis=-1)


def specular_cos(n, v, l, f0, roughness) -> np.ndarray:
    """Specular BRDF times the light cosine, ``[..., 3]``.

    ``n``, ``v``, ``l`` are unit vectors ``[..., 3]``; ``f0`` is ``[..., 3]``.
    Radiance from a point light is this value times ``I / d^2``.
    """
    n, v, l = (np.asarray(a, dtype=np.float64) for a in (n, v, l))
    alpha = np.maximum(np.asarray(roughness, dtype=np.float64), MIN_ROUGHNESS) ** 2
    h = v + l
    h = h / np.maximum(np.linalg.norm(h, axis=-1, keepdims=True), 1e-12)
    nl = _dot(n, l)
    nv = np.maximum(_dot(n, v), _NV_FLOOR)
    nh = np.maximum(_dot(n, h), 0.0)
    vh = np.maximum(_dot(v, h), 0.0)
    a2 = alpha * alpha
    dist = a2 / (np.pi * (nh * nh * (a2 - 1.0) + 1.0) ** 2)
    k = alpha / 2.0
    nlc = np.maximum(nl, 0.0)
    geom = nlc / (nlc * (1.0 - k) + k) * nv / (nv * (1.0 - k) + k)
    fres = f0 + (1.0 - f0) * ((1.0 - vh) ** 5)[..., None]
    val = (dist * geom / (4.0 * nv))[..., None] * fres
    return np.where((nl > 0)[..., None], val, 0.0)
