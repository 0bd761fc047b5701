"""Ray generation, bounded stratified sampling, and volume-rendering quadrature."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError

# Expansion of the posed-body AABB used for ray bounds.
AABB_MARGIN = 0.2


@dataclass
class RayBundle:
    """Per-pixel rays: unit directions, AABB-clipped t ranges, and a flag for
    rays that miss the body box entirely (background only)."""

    origins: np.ndarray  # (P, 3)
    directions: np.ndarray  # (P, 3) unit
    t_near: np.ndarray  # (P,)
    t_far: np.ndarray  # (P,)
    background_only: np.ndarray  # (P,) bool

    def __len__(self):
        return self.origins.shape[0]


def body_aabb(posed_segments, max_radius, margin=AABB_MARGIN):
    """AABB of the posed capsule segments inflated by the largest bone radius
    plus a fractional margin of the extent."""
    pts = posed_segments.reshape(-1, 3)
    lo = pts.min(axis=0) - max_radius
    hi = pts.max(axis=0) + max_radius
    extent = hi - lo
    return lo - margin * extent, hi + margin * extent


def ray_aabb_intersect(origins, directions, lo, hi):
    """Slab test. Returns (t_near, t_far, hit); t_near clipped to >= 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t1 = (lo - origins) * inv
        t2 = (hi - origins) * inv
    # directions with zero component: +-inf slabs behave correctly except 0*inf
    nan_mask = np.isnan(t1) | np.isnan(t2)
    t1 = np.where(nan_mask, np.where((origins >= lo) & (origins <= hi), -np.inf, np.inf), t1)
    t2 = np.where(nan_mask, np.where((origins >= lo) & (origins <= hi), np.inf, -np.inf), t2)
    t_near = np.minimum(t1, t2).max(axis=1)
    t_far = np.maximum(t1, t2).min(axis=1)
    t_near = np.maximum(t_near, 0.0)
    hit = t_far > t_near
    return t_near, t_far, hit


def generate_rays(camera, pixels, aabb_lo, aabb_hi):
    """Rays through pixel centers, t bounds from the posed-body AABB.

    pixels: (P, 2) integer (col, row). Rays that miss the AABB are flagged
    background-only and get a degenerate [0, 0] t range.
    """
    pixels = np.asarray(pixels)
    if np.any(pixels[:, 0] < 0) or np.any(pixels[:, 0] >= camera.width):
        raise ContractError("pixel column out of image bounds")
    if np.any(pixels[:, 1] < 0) or np.any(pixels[:, 1] >= camera.height):
        raise ContractError("pixel row out of image bounds")
    k = camera.intrinsics
    # integer pixel coordinates are pixel centers; invert the projection
    x = (pixels[:, 0] - k[0, 2] - k[0, 1] * (pixels[:, 1] - k[1, 2]) / k[1, 1]) / k[0, 0]
    y = (pixels[:, 1] - k[1, 2]) / k[1, 1]
    d_cam = np.stack([x, y, np.ones(len(pixels))], axis=1)
    d_world = d_cam @ camera.rotation  # R^T applied row-wise
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.center, d_world.shape).copy()
    t_near, t_far, hit = ray_aabb_intersect(origins, d_world, aabb_lo, aabb_hi)
    t_near = np.where(hit, t_near, 0.0)
    t_far = np.where(hit, t_far, 0.0)
    return RayBundle(origins, d_world, t_near, t_far, ~hit)


def stratified_sample(rays, num_samples, rng=None):
    """One depth per equal-length bin along each ray; bin centers when `rng`
    is None (evaluation), uniform within each bin otherwise."""
    if num_samples < 1:
        raise ContractError("need at least one sample per ray")
    p = len(rays)
    edges = np.linspace(0.0, 1.0, num_samples + 1)
    lo = edges[:-1]
    width = edges[1] - edges[0]
    if rng is None:
        u = np.full((p, num_samples), 0.5)
    else:
        u = rng.random((p, num_samples))
    frac = lo + u * width
    span = (rays.t_far - rays.t_near)[:, None]
    return rays.t_near[:, None] + frac * span


def sample_deltas(depths, t_far):
    """Segment lengths: consecutive differences, last one runs to t_far."""
    d = np.diff(depths, axis=1)
    last = (t_far[:, None] - depths[:, -1:])
    return np.concatenate([d, last], axis=1)


def composite(sigma, rgb, deltas, background):
    """Standard emission-absorption quadrature along each ray.

    sigma: (P, N) tensor (>= 0), rgb: (P, N, 3) tensor, deltas: (P, N)
    constant, background: (3,) constant. Returns ((P, 3) color, (P,) alpha).
    Weights plus residual transmittance form a convex combination.
    """
    sigma = ad.as_tensor(sigma)
    rgb = ad.as_tensor(rgb)
    p, n = sigma.shape
    optical = sigma * ad.constant(np.asarray(deltas))
    prefix = ad.cumsum(optical, axis=1)
    transmittance = ad.exp(-(prefix - optical))  # exclusive prefix
    alpha = 1.0 - ad.exp(-optical)
    weights = transmittance * alpha  # (P, N)
    residual = ad.exp(-prefix[:, n - 1 : n])  # survival past the last sample
    color = (weights.reshape(p, n, 1) * rgb).sum(axis=1) + residual * ad.constant(
        np.asarray(background)
    )
    return color, (1.0 - residual).reshape(p)
