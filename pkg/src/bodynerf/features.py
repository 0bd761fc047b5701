"""Image encoder, pixel-aligned feature sampling, and canonical feature diffusion.

The encoder is a small strided conv stack trained from scratch, producing a
feature map at 1/4 image resolution. Per-point features are gathered by
perspective projection plus bilinear interpolation; body-vertex features are
gathered the same way at posed surface vertices and splatted into a canonical
feature volume that a 3-D conv stack then diffuses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .nn import Conv2dLayer, Conv3dLayer, Module

FEATURE_DOWNSCALE = 4


@dataclass
class Camera:
    """Pinhole camera: x_cam = rotation @ x_world + translation, pixel
    coordinates u = K00 x/z + K02, v = K11 y/z + K12 (integer coordinates
    are pixel centers)."""

    intrinsics: np.ndarray  # (3, 3)
    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)
    width: int
    height: int

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        k = self.intrinsics
        if k[0, 0] <= 0 or k[1, 1] <= 0 or np.any(np.abs(k[np.tril_indices(3, -1)]) > 1e-12):
            raise ContractError("intrinsics must be upper-triangular with positive focals")
        if np.max(np.abs(self.rotation @ self.rotation.T - np.eye(3))) > 1e-9:
            raise ContractError("camera rotation must be orthonormal")

    @property
    def center(self):
        """Camera origin in world coordinates."""
        return -self.rotation.T @ self.translation

    def project(self, points):
        """numpy projection: (N, 3) world -> ((N, 2) pixel coords, (N,) depth)."""
        cam = points @ self.rotation.T + self.translation
        z = cam[:, 2]
        safe = np.where(np.abs(z) < 1e-12, 1e-12, z)
        uvw = cam @ self.intrinsics.T
        return uvw[:, :2] / safe[:, None], z

    def to_json(self):
        return {
            "intrinsics": self.intrinsics.tolist(),
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_json(cls, doc):
        return cls(
            np.array(doc["intrinsics"]),
            np.array(doc["rotation"]),
            np.array(doc["translation"]),
            int(doc["width"]),
            int(doc["height"]),
        )


@dataclass
class SupportFrame:
    """One conditioning frame: image, mask, pose, camera, encoded features."""

    image: np.ndarray  # (H, W, 3) in [0, 1]
    mask: np.ndarray  # (H, W) in {0, 1}
    pose: object  # kinematics.Pose
    camera: Camera
    features: Tensor | None = field(default=None)


class ImageEncoder(Module):
    """Four conv blocks, the first two at stride 2 (1/4 resolution output).

    Zero-bias init, so an all-zero image encodes to all-zero features.
    """

    def __init__(self, channels, rng):
        c = channels
        self.block1 = Conv2dLayer(3, c // 2, rng, stride=2)
        self.block2 = Conv2dLayer(c // 2, c, rng, stride=2)
        self.block3 = Conv2dLayer(c, c, rng)
        self.block4 = Conv2dLayer(c, c, rng)
        self.channels = c

    def __call__(self, image):
        x = ad.as_tensor(image)
        x = ad.relu(self.block1(x))
        x = ad.relu(self.block2(x))
        x = ad.relu(self.block3(x))
        return self.block4(x)


def bilinear_interp(grid, coords):
    """Sample a (H, W, C) grid at float (row, col) coords (N, 2) tensor.

    Corner clipping keeps indices legal; out-of-range validity is the
    caller's concern (pixel_aligned masks samples).
    """
    grid = ad.as_tensor(grid)
    coords = ad.as_tensor(coords)
    h, w, c = grid.shape
    n = coords.shape[0]
    det = coords.values
    base = np.stack(
        [
            np.clip(np.floor(det[:, 0]).astype(np.int64), 0, max(h - 2, 0)),
            np.clip(np.floor(det[:, 1]).astype(np.int64), 0, max(w - 2, 0)),
        ],
        axis=1,
    )
    frac = coords - ad.constant(base.astype(np.float64))
    corners = np.array([(0, 0), (0, 1), (1, 0), (1, 1)])
    cell = (base[:, 0:1] + corners[:, 0]) * w + base[:, 1:2] + corners[:, 1]  # (N, 4)
    elem = cell[:, :, None] * c + np.arange(c)
    vals = ad.take(grid, elem)  # (N, 4, C)
    fr, fc = frac[:, 0:1], frac[:, 1:2]
    wr = ad.concat([1.0 - fr, fr], axis=1).reshape(n, 2, 1)
    wc = ad.concat([1.0 - fc, fc], axis=1).reshape(n, 1, 2)
    weights = (wr * wc).reshape(n, 4, 1)
    return (weights * vals).sum(axis=1)


def pixel_aligned(features, camera, points):
    """Project points into the frame and bilinearly sample its feature map.

    Returns ((N, C) feature tensor, (N,) bool in-frustum flags). Points
    behind the camera or outside the image get zeros and a False flag.
    Differentiable w.r.t. the feature map and the points.
    """
    features = ad.as_tensor(features)
    pts = ad.as_tensor(points)
    k = camera.intrinsics

    cam = ad.matmul(pts, ad.constant(camera.rotation.T)) + ad.constant(camera.translation)
    z = cam[:, 2:3]
    z_det = z.values.ravel()
    behind = z_det <= 1e-9
    # keep the division defined on masked lanes
    z_safe = z + ad.constant(np.where(behind, 1.0, 0.0)[:, None])
    u = (cam[:, 0:1] * k[0, 0] + cam[:, 1:2] * k[0, 1] + z * k[0, 2]) / z_safe
    v = (cam[:, 1:2] * k[1, 1] + z * k[1, 2]) / z_safe

    u_det, v_det = u.values.ravel(), v.values.ravel()
    in_frame = (
        (~behind)
        & (u_det >= 0.0)
        & (u_det <= camera.width - 1.0)
        & (v_det >= 0.0)
        & (v_det <= camera.height - 1.0)
    )

    # image pixel centers -> feature-map coordinates at 1/4 resolution
    col = (u + 0.5) * (1.0 / FEATURE_DOWNSCALE) - 0.5
    row = (v + 0.5) * (1.0 / FEATURE_DOWNSCALE) - 0.5
    sampled = bilinear_interp(features, ad.concat([row, col], axis=1))
    gate = ad.constant(in_frame.astype(np.float64)[:, None])
    return gate * sampled, in_frame


def body_vertex_features(frame, vertices_observation):
    """Per-vertex pixel-aligned features for posed surface vertices.

    Out-of-frustum vertices get zeros.
    """
    if frame.features is None:
        raise ContractError("support frame has no encoded features")
    feats, _ = pixel_aligned(frame.features, frame.camera, vertices_observation)
    return feats


def pooled_features(per_frame_features, per_frame_flags):
    """Mean over frames with in-frustum masking and renormalization."""
    if not per_frame_features:
        raise ContractError("feature pooling needs at least one frame")
    total = None
    count = None
    for feats, flags in zip(per_frame_features, per_frame_flags):
        gated = feats
        f = flags.astype(np.float64)[:, None]
        total = gated if total is None else total + gated
        count = f if count is None else count + f
    return total * ad.constant(1.0 / np.maximum(count, 1.0))


class FeatureDiffuser(Module):
    """1x1x1 projection then a 3x3x3 conv over the splatted vertex features."""

    def __init__(self, in_channels, out_channels, rng):
        self.project = Conv3dLayer(in_channels, out_channels, rng, kernel=1, padding=0)
        self.smooth = Conv3dLayer(out_channels, out_channels, rng, kernel=3, padding=1)
        self.out_channels = out_channels

    def __call__(self, volume):
        return self.smooth(ad.relu(self.project(volume)))


@dataclass
class CanonicalFeatureVolume:
    """Diffused body features over the canonical bounds, trilinearly queryable."""

    grid: Tensor  # (D, H, W, C_s)
    grid_spec: object  # kinematics.GridSpec


def splat_vertex_features(vertex_features, canonical_vertices, grid_spec):
    """Average-splat per-vertex features onto nearest grid nodes.

    Order-invariant up to float associativity; duplicated vertices with
    identical features leave the average unchanged.
    """
    res = np.array(grid_spec.resolution)
    q = (canonical_vertices - grid_spec.bounds_min) / grid_spec.cell
    idx3 = np.clip(np.round(q).astype(np.int64), 0, res - 1)
    flat = (idx3[:, 0] * res[1] + idx3[:, 1]) * res[2] + idx3[:, 2]
    total = ad.scatter_add(vertex_features, flat, int(res.prod()))
    counts = np.bincount(flat, minlength=int(res.prod())).astype(np.float64)
    mean = total * ad.constant(1.0 / np.maximum(counts, 1.0)[:, None])
    return mean.reshape(tuple(res) + (vertex_features.shape[1],))


def diffuse_to_canonical(per_frame_vertex_features, canonical_vertices, grid_spec, diffuser):
    """Concatenate K frames' vertex features, splat, and run the conv stack."""
    if not per_frame_vertex_features:
        raise ContractError("diffusion needs a non-empty support set")
    stacked = ad.concat(list(per_frame_vertex_features), axis=1)
    splat = splat_vertex_features(stacked, canonical_vertices, grid_spec)
    return CanonicalFeatureVolume(diffuser(splat), grid_spec)
