"""Deformation network (category-level -> instance-level canonical space)
and the rendering network (density + color heads)."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .nn import MLP, Module, PositionalEncoding

# Initial raw density: softplus(bias) * DENSITY_SCALE ~ 4, a mild haze the
# photometric loss can push either way quickly.
DENSITY_SCALE = 30.0
DENSITY_BIAS = -2.0


class DeformationNet(Module):
    """Residual warp into the instance-level canonical space.

    The head layer is zero-initialized and the output bounded by
    delta_max * tanh, so a fresh network is the identity map and the
    displacement can never exceed delta_max (meters). delta_max = 0 disables
    the network entirely (ablation switch).
    """

    def __init__(self, feature_dim, pose_dim, rng, width=128, depth=4, delta_max=0.1, num_frequencies=6):
        self.encoding = PositionalEncoding(num_frequencies)
        in_dim = self.encoding.out_dim(3) + feature_dim + pose_dim
        self.mlp = MLP(in_dim, width, depth, 3, rng, zero_init_head=True)
        self.delta_max = float(delta_max)

    def __call__(self, points, pixel_features, pose_flat):
        """points (N, 3), pixel_features (N, C), pose_flat (3B,) constant."""
        if self.delta_max == 0.0:
            return points
        n = points.shape[0]
        pose = ad.constant(np.broadcast_to(pose_flat, (n, pose_flat.shape[0])).copy())
        h = ad.concat([self.encoding(points), pixel_features, pose], axis=1)
        delta = ad.tanh(self.mlp(h)) * self.delta_max
        return points + delta


class RenderNet(Module):
    """Maps instance-canonical points plus gathered features to (sigma, rgb).

    Density goes through softplus (non-negative), color through sigmoid.
    View direction is an optional extra input, off by default.
    """

    def __init__(
        self,
        pixel_dim,
        volume_dim,
        rng,
        width=128,
        depth=6,
        num_frequencies=6,
        view_dependent=False,
    ):
        self.encoding = PositionalEncoding(num_frequencies)
        self.view_dependent = bool(view_dependent)
        in_dim = self.encoding.out_dim(3) + pixel_dim + volume_dim
        if self.view_dependent:
            in_dim += 3
        self.mlp = MLP(in_dim, width, depth, 4, rng, head_bias=0.0)

    def __call__(self, points, pixel_features, volume_features, view_dirs=None):
        parts = [self.encoding(points), pixel_features, volume_features]
        if self.view_dependent:
            if view_dirs is None:
                raise ValueError("view-dependent render net needs view directions")
            parts.append(ad.as_tensor(view_dirs))
        raw = self.mlp(ad.concat(parts, axis=1))
        sigma = ad.softplus(raw[:, 0:1] + DENSITY_BIAS) * DENSITY_SCALE
        rgb = ad.sigmoid(raw[:, 1:4])
        return sigma, rgb
