"""Learnable skinning-weight volume and the forward/backward LBS warps.

The blend-weight field over the shared canonical space is a learnable
logit grid (softmax over B bone channels plus one background channel after
trilinear interpolation). Warps blend per-bone rigid transforms with those
weights; the backward warp samples each bone's candidate weight at that
bone's inverse-transformed location and normalizes across bones.
"""

from __future__ import annotations

from itertools import product

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .kinematics import GridSpec, body_bounds, skinning_prior

# Bone-mass threshold below which a point is treated as empty space.
TAU_EMPTY = 1e-3
# Denominator guard in the observation-space weight normalization.
EPS_BACKWARD = 1e-6
# Logit given to the background channel for out-of-bounds queries; large
# enough that the softmax puts ~1 on background (bone mass ~1e-8).
OOB_BACKGROUND_LOGIT = 20.0

_CORNERS = np.array(list(product((0, 1), repeat=3)))  # (8, 3), last axis fastest


def trilinear_interp(grid, points, grid_spec, oob_values=None):
    """Sample a (D, H, W, C) grid at (N, 3) world points, 8-corner blend.

    Differentiable w.r.t. both the grid values and the points. Out-of-bounds
    points return `oob_values` (default zeros) with zero gradient.
    """
    grid = ad.as_tensor(grid)
    points = ad.as_tensor(points)
    d, h, w, c = grid.shape
    res = np.array([d, h, w])
    n = points.shape[0]
    bmin, cell = grid_spec.bounds_min, grid_spec.cell

    p_det = points.values
    q = (p_det - bmin) / cell
    base = np.clip(np.floor(q).astype(np.int64), 0, res - 2)
    inside = np.all((p_det >= bmin) & (p_det <= grid_spec.bounds_max), axis=1)

    # fractional offsets stay on the tape so d(out)/d(points) flows
    frac = (points - ad.constant(bmin + base * cell)) * ad.constant(1.0 / cell)

    vox = ((base[:, 0:1] + _CORNERS[:, 0]) * h + base[:, 1:2] + _CORNERS[:, 1]) * w
    vox = vox + base[:, 2:3] + _CORNERS[:, 2]  # (N, 8)
    elem = vox[:, :, None] * c + np.arange(c)  # (N, 8, C)
    corners = ad.take(grid, elem)

    fx, fy, fz = frac[:, 0:1], frac[:, 1:2], frac[:, 2:3]
    wx = ad.concat([1.0 - fx, fx], axis=1).reshape(n, 2, 1, 1)
    wy = ad.concat([1.0 - fy, fy], axis=1).reshape(n, 1, 2, 1)
    wz = ad.concat([1.0 - fz, fz], axis=1).reshape(n, 1, 1, 2)
    weights = (wx * wy * wz).reshape(n, 8, 1)
    blended = (weights * corners).sum(axis=1)  # (N, C)

    if oob_values is None:
        oob_values = np.zeros(c)
    mask = ad.constant(inside[:, None].astype(np.float64))
    return mask * blended + (1.0 - mask) * ad.constant(np.asarray(oob_values, dtype=np.float64))


class SkinningVolume:
    """Learnable logit grid over the canonical body, B bones + background."""

    def __init__(self, logits, grid_spec, num_bones):
        logits = logits if isinstance(logits, Tensor) else Tensor(logits, requires_grad=True)
        if logits.shape[-1] != num_bones + 1:
            raise ContractError(
                f"skinning volume needs {num_bones + 1} channels, got {logits.shape[-1]}"
            )
        self.logits = logits
        self.grid_spec = grid_spec
        self.num_bones = num_bones

    @classmethod
    def from_skeleton(cls, skeleton, resolution=(64, 64, 64), margin=0.1):
        """Initialize logits to the log of the skeleton prior; bounds wrap
        the rest-pose body with the given fractional margin (>= 10%)."""
        if margin < 0.1:
            raise ContractError("skinning volume bounds need >= 10% margin")
        lo, hi = body_bounds(skeleton.bone_segments(), skeleton.bone_radii, margin=margin)
        spec = GridSpec(lo, hi, resolution)
        prior = skinning_prior(skeleton, spec)
        logits = np.log(np.clip(prior, 1e-12, None))
        return cls(Tensor(logits, requires_grad=True), spec, skeleton.num_bones)

    def oob_pattern(self):
        pat = np.zeros(self.num_bones + 1)
        pat[-1] = OOB_BACKGROUND_LOGIT
        return pat

    def weights_at(self, points):
        """(N, B+1) simplex of blend weights at canonical points."""
        raw = trilinear_interp(self.logits, points, self.grid_spec, self.oob_pattern())
        return ad.softmax(raw, axis=-1)


def _affine_rows(transforms):
    """(B, 4, 4) -> (B, 12) flat top-three rows for weight blending."""
    return transforms[:, :3, :].reshape(transforms.shape[0], 12)


def _apply_blended(mat_rows, points):
    """Apply per-point affine (N, 12) to points (N, 3)."""
    m = mat_rows.reshape(points.shape[0], 3, 4)
    px = points[:, 0:1].reshape(points.shape[0], 1, 1)
    py = points[:, 1:2].reshape(points.shape[0], 1, 1)
    pz = points[:, 2:3].reshape(points.shape[0], 1, 1)
    out = m[:, :, 0:1] * px + m[:, :, 1:2] * py + m[:, :, 2:3] * pz + m[:, :, 3:4]
    return out.reshape(points.shape[0], 3)


def forward_warp(points_canonical, weights, bone_transforms, tau_empty=TAU_EMPTY):
    """Blend bone transforms by the bone channels of `weights` and warp.

    The background channel is dropped and bone channels renormalized to sum
    to one. Points whose total bone mass falls below `tau_empty` are off
    body and pass through unwarped.
    """
    pts = ad.as_tensor(points_canonical)
    weights = ad.as_tensor(weights)
    b = bone_transforms.matrices.shape[0]
    bone_w = weights[:, :b]
    mass = bone_w.sum(axis=1, keepdims=True)
    norm_w = bone_w / (mass + 1e-12)
    rows = ad.matmul(norm_w, ad.constant(_affine_rows(bone_transforms.matrices)))
    warped = _apply_blended(rows, pts)
    on_body = ad.constant((mass.values >= tau_empty).astype(np.float64))
    return on_body * warped + (1.0 - on_body) * pts


def backward_warp(points_observation, skinning_volume, bone_transforms, eps=EPS_BACKWARD):
    """Map observation points to the canonical space.

    Candidate weight for bone b is the b-th channel of the canonical weight
    field sampled at that bone's inverse-transformed point; normalized
    across bones (with `eps` guarding the denominator) these blend the
    inverse transforms. Returns (canonical points (N, 3), bone mass (N, 1));
    the mass (sum of candidate weights) feeds empty-space culling.
    """
    pts = ad.as_tensor(points_observation)
    n = pts.shape[0]
    b = bone_transforms.matrices.shape[0]
    inv = bone_transforms.inverses()

    # all bones' inverse-transformed copies in one (B*N, 3) batch
    per_bone = [
        ad.matmul(pts, ad.constant(inv[j, :3, :3].T)) + ad.constant(inv[j, :3, 3]) for j in range(b)
    ]
    stacked = ad.concat(per_bone, axis=0)
    all_weights = skinning_volume.weights_at(stacked)  # (B*N, B+1)

    c = skinning_volume.num_bones + 1
    rows = np.arange(b)[:, None] * n + np.arange(n)  # (B, N) row of bone j, point i
    flat = rows * c + np.arange(b)[:, None]  # channel j of bone j's rows
    candidate = ad.take(all_weights, flat.T)  # (N, B)

    mass = candidate.sum(axis=1, keepdims=True)
    obs_w = candidate / (mass + eps)
    y = stacked.reshape(b, n, 3)
    canonical = (ad.transpose(obs_w, (1, 0)).reshape(b, n, 1) * y).sum(axis=0)
    return canonical, mass
