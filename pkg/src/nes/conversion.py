"""Signed distance to the offset surface and the Laplace-style density map.

A query point ``x`` projects to ``x*`` on the template with normal ``n``. The
offset surface sits at height ``l`` above ``x*``, so the perpendicular gap is
``s' = <x - x*, n> - l``. When the offset field tilts, the true distance to
the offset surface is shorter than the perpendicular one; with ``tan a`` the
surface-space slope of ``l``, the refined distance is ``s = s' cos a``.

Both functions accept plain arrays or traced :class:`~nes.autodiff.Var`
inputs and return the matching kind.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

EXP_CLAMP = 60.0


@dataclass
class ConversionSample:
    x: np.ndarray
    surface: object
    offset: object
    grad_offset: object
    s_prime: object
    s: object
    alpha: np.ndarray


def world_gradient(grad_uv, face_metric_sqrt):
    """Map texel-space gradients (N, 2) to a 2D surface-space vector per row.

    ``face_metric_sqrt`` is (N, 2, 2) with ``L L^T`` equal to the inverse
    metric of the texel parameterisation, so ``|g L|`` is the slope of the
    field per unit arc length on the surface.
    """
    L = np.asarray(face_metric_sqrt)
    g0 = ad.take(grad_uv, (slice(None), 0))
    g1 = ad.take(grad_uv, (slice(None), 1))
    w0 = ad.add(ad.mul(g0, L[:, 0, 0]), ad.mul(g1, L[:, 1, 0]))
    w1 = ad.add(ad.mul(g0, L[:, 0, 1]), ad.mul(g1, L[:, 1, 1]))
    return ad.stack([w0, w1], axis=1)


def signed_distance(x, surface, l, grad_offset, refined: bool = True) -> ConversionSample:
    """Signed distance from ``x`` to the offset surface (positive outside).

    ``surface`` is anything with ``position`` and unit ``normal`` (a
    SurfacePoint or a batched Projection); ``grad_offset`` is the surface-space
    gradient of ``l`` (N, 2) or (2,), whose norm is ``tan a``.
    """
    x = np.asarray(x, dtype=np.float64)
    pos = np.asarray(surface.position)
    nrm = np.asarray(surface.normal)
    height = np.sum((x - pos) * nrm, axis=-1)
    dtype = ad.value(l).dtype
    s_prime = ad.sub(height.astype(dtype, copy=False), l)
    tan2 = ad.total(ad.mul(grad_offset, grad_offset), axis=-1)
    alpha = np.arctan(np.sqrt(ad.value(tan2)))
    if refined:
        s = ad.div(s_prime, ad.sqrt(ad.add(tan2, 1.0)))
    else:
        s = s_prime
    return ConversionSample(x, surface, l, grad_offset, s_prime, s, alpha)


def sdf_to_density(s, beta):
    """Density from signed distance, sharpness ``beta``.

    Inside (s < 0): ``(1 - exp(s/beta)/2) / beta``; outside:
    ``exp(-s/beta) / (2 beta)``. The exponent saturates at 60 so the density
    stays strictly positive.
    """
    sv = ad.value(s)
    bv = ad.value(beta)
    if not np.all(bv > 0):
        raise ValueError(f"beta must be positive, got {bv}")
    r = np.abs(sv) / bv
    live = r < EXP_CLAMP
    e = np.exp(-np.minimum(r, EXP_CLAMP))
    inside = sv < 0
    half_e = 0.5 * e
    sigma = np.where(inside, 1.0 - half_e, half_e) / bv

    def vjp(g):
        ds = dbeta = None
        if isinstance(s, ad.Var):
            ds = g * np.where(live, -half_e / (bv * bv), 0.0)
        if isinstance(beta, ad.Var):
            # d/dbeta of (const part)/beta plus the exponent's beta dependence
            d = -sigma / bv + np.where(live, half_e * np.abs(sv) / bv**3, 0.0) * np.where(inside, -1.0, 1.0)
            dbeta = ad._unbroadcast(g * d, np.shape(bv))
        return ds, dbeta

    return ad.custom((s, beta), sigma, vjp)
