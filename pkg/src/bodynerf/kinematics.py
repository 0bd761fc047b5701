"""Articulated skeleton, forward kinematics, and the bone-Gaussian skinning prior.

All transforms are relative to the rest pose (the zero pose is the shared
T-pose), so forward kinematics of the zero pose gives identity for every
bone. Pure numpy: poses and bone transforms are inputs to the learnable
pipeline, never differentiated through.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

# Constant floor of the background channel before per-voxel normalization;
# keeps on-bone weights >= 0.99 at the capsule midline.
BACKGROUND_FLOOR = 0.005


@dataclass
class Skeleton:
    """Kinematic tree. parent[0] must be -1; indices form a tree rooted at 0.

    rest_offsets[b] is joint b's position in its parent frame (the root's
    entry is its world position). bone_radii feed both the skinning prior
    and the synthetic capsule body.
    """

    parent: np.ndarray  # (B,) int
    rest_offsets: np.ndarray  # (B, 3) meters
    bone_radii: np.ndarray  # (B,) meters

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=int)
        self.rest_offsets = np.asarray(self.rest_offsets, dtype=np.float64)
        self.bone_radii = np.asarray(self.bone_radii, dtype=np.float64)
        b = self.parent.shape[0]
        if b < 2:
            raise ContractError(f"skeleton needs at least 2 joints, got {b}")
        if self.parent[0] != -1 or np.any(self.parent[1:] >= np.arange(1, b)):
            raise ContractError("parent indices must form a tree rooted at joint 0")
        if self.rest_offsets.shape != (b, 3) or self.bone_radii.shape != (b,):
            raise ContractError("skeleton field shapes disagree")
        if not (np.isfinite(self.rest_offsets).all() and np.isfinite(self.bone_radii).all()):
            raise ContractError("skeleton fields must be finite")

    @property
    def num_bones(self):
        return self.parent.shape[0]

    def rest_joints(self):
        """(B, 3) rest-pose joint positions in world coordinates."""
        b = self.num_bones
        pos = np.zeros((b, 3))
        pos[0] = self.rest_offsets[0]
        for j in range(1, b):
            pos[j] = pos[self.parent[j]] + self.rest_offsets[j]
        return pos

    def bone_segments(self):
        """(B, 2, 3) rest-pose capsule segments, one per bone.

        Bone b runs from joint b to its first child; a leaf continues its
        own rest offset direction for the same length (zero offset degrades
        to a point, i.e. a sphere).
        """
        joints = self.rest_joints()
        b = self.num_bones
        segs = np.zeros((b, 2, 3))
        for j in range(b):
            segs[j, 0] = joints[j]
            children = np.nonzero(self.parent == j)[0]
            if children.size:
                segs[j, 1] = joints[children[0]]
            else:
                segs[j, 1] = joints[j] + self.rest_offsets[j]
        return segs

    def to_json(self):
        return {
            "B": int(self.num_bones),
            "parent": self.parent.tolist(),
            "rest_offsets": self.rest_offsets.tolist(),
            "bone_radii": self.bone_radii.tolist(),
        }

    @classmethod
    def from_json(cls, doc):
        return cls(
            parent=np.array(doc["parent"]),
            rest_offsets=np.array(doc["rest_offsets"]),
            bone_radii=np.array(doc["bone_radii"]),
        )


@dataclass
class Pose:
    """Per-joint axis-angle rotations plus a root translation (meters)."""

    axis_angle: np.ndarray  # (B, 3) radians * axis
    root_translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.axis_angle = np.asarray(self.axis_angle, dtype=np.float64)
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64)
        if not (np.isfinite(self.axis_angle).all() and np.isfinite(self.root_translation).all()):
            raise ContractError("pose entries must be finite")

    @classmethod
    def zero(cls, num_bones):
        return cls(np.zeros((num_bones, 3)), np.zeros(3))

    def to_json(self):
        return {
            "axis_angle": self.axis_angle.tolist(),
            "root_translation": self.root_translation.tolist(),
        }

    @classmethod
    def from_json(cls, doc):
        return cls(np.array(doc["axis_angle"]), np.array(doc["root_translation"]))


@dataclass
class BoneTransforms:
    """B homogeneous rigid transforms, canonical space -> observation space."""

    matrices: np.ndarray  # (B, 4, 4)

    def inverses(self):
        """(B, 4, 4) exact rigid inverses (transpose rotation, re-solve t)."""
        rot = self.matrices[:, :3, :3]
        t = self.matrices[:, :3, 3]
        inv = np.zeros_like(self.matrices)
        rot_t = rot.transpose(0, 2, 1)
        inv[:, :3, :3] = rot_t
        inv[:, :3, 3] = -np.einsum("bij,bj->bi", rot_t, t)
        inv[:, 3, 3] = 1.0
        return inv


def rodrigues(axis_angle):
    """Axis-angle (3,) to rotation matrix, Taylor-guarded at zero angle."""
    w = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(w)
    k = np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
    )
    if theta < 1e-8:
        # sin(t)/t ~ 1, (1-cos t)/t^2 ~ 1/2 keep continuity through zero
        return np.eye(3) + k + 0.5 * (k @ k)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * k + b * (k @ k)


def forward_kinematics(skeleton, pose):
    """Per-bone rigid transforms T_b taking rest-pose points to posed points.

    T_b composes ancestor rotations about the rest joint locations; the zero
    pose returns identities exactly.
    """
    b = skeleton.num_bones
    if pose.axis_angle.shape != (b, 3):
        raise ContractError(
            f"pose has {pose.axis_angle.shape[0]} joints, skeleton has {b}"
        )
    rest = skeleton.rest_joints()
    global_rot = np.zeros((b, 3, 3))
    posed = np.zeros((b, 3))
    global_rot[0] = rodrigues(pose.axis_angle[0])
    posed[0] = rest[0] + pose.root_translation
    for j in range(1, b):
        p = skeleton.parent[j]
        global_rot[j] = global_rot[p] @ rodrigues(pose.axis_angle[j])
        posed[j] = posed[p] + global_rot[p] @ (rest[j] - rest[p])

    mats = np.zeros((b, 4, 4))
    mats[:, :3, :3] = global_rot
    mats[:, :3, 3] = posed - np.einsum("bij,bj->bi", global_rot, rest)
    mats[:, 3, 3] = 1.0
    return BoneTransforms(mats)


def posed_joints(skeleton, pose):
    """(B, 3) joint positions under a pose."""
    transforms = forward_kinematics(skeleton, pose)
    rest = skeleton.rest_joints()
    return (
        np.einsum("bij,bj->bi", transforms.matrices[:, :3, :3], rest)
        + transforms.matrices[:, :3, 3]
    )


def posed_segments(skeleton, pose):
    """(B, 2, 3) capsule segments moved rigidly by their bone transforms."""
    segs = skeleton.bone_segments()
    mats = forward_kinematics(skeleton, pose).matrices
    out = np.einsum("bij,bej->bei", mats[:, :3, :3], segs) + mats[:, None, :3, 3]
    return out


@dataclass
class GridSpec:
    """Axis-aligned regular grid: node i sits at bmin + i * cell per axis."""

    bounds_min: np.ndarray  # (3,)
    bounds_max: np.ndarray  # (3,)
    resolution: tuple  # (D, H, W), each >= 2

    def __post_init__(self):
        self.bounds_min = np.asarray(self.bounds_min, dtype=np.float64)
        self.bounds_max = np.asarray(self.bounds_max, dtype=np.float64)
        self.resolution = tuple(int(r) for r in self.resolution)
        if any(r < 2 for r in self.resolution):
            raise ContractError(f"grid resolution must be >= 2 per axis: {self.resolution}")
        if np.any(self.bounds_max <= self.bounds_min):
            raise ContractError("grid bounds_max must exceed bounds_min")

    @property
    def cell(self):
        return (self.bounds_max - self.bounds_min) / (np.array(self.resolution) - 1)

    def nodes(self):
        """(D, H, W, 3) world coordinates of the grid nodes."""
        axes = [
            np.linspace(self.bounds_min[i], self.bounds_max[i], self.resolution[i])
            for i in range(3)
        ]
        grid = np.meshgrid(*axes, indexing="ij")
        return np.stack(grid, axis=-1)


def body_bounds(segments, radii, margin=0.1):
    """AABB of capsule segments inflated by radii plus a fractional margin."""
    lo = (segments.min(axis=1) - radii[:, None]).min(axis=0)
    hi = (segments.max(axis=1) + radii[:, None]).max(axis=0)
    extent = hi - lo
    return lo - margin * extent, hi + margin * extent


def point_segment_distance(points, seg_start, seg_end):
    """Distance from points (..., 3) to one segment; zero-length segments
    collapse to the start point."""
    ab = seg_end - seg_start
    denom = float(ab @ ab)
    rel = points - seg_start
    if denom < 1e-12:
        return np.linalg.norm(rel, axis=-1)
    t = np.clip(rel @ ab / denom, 0.0, 1.0)
    closest = seg_start + t[..., None] * ab
    return np.linalg.norm(points - closest, axis=-1)


def skinning_prior(skeleton, grid_spec):
    """(D, H, W, B+1) per-voxel bone-weight distribution from the skeleton.

    Channel b is an unnormalized Gaussian of distance to bone segment b with
    scale bone_radii[b]; the final channel is the constant background floor.
    Channels are normalized to sum to one per voxel.
    """
    pts = grid_spec.nodes()
    segs = skeleton.bone_segments()
    b = skeleton.num_bones
    weights = np.zeros(pts.shape[:3] + (b + 1,))
    for j in range(b):
        d = point_segment_distance(pts, segs[j, 0], segs[j, 1])
        r = max(float(skeleton.bone_radii[j]), 1e-6)
        weights[..., j] = np.exp(-0.5 * (d / r) ** 2)
    weights[..., b] = BACKGROUND_FLOOR
    weights /= weights.sum(axis=-1, keepdims=True)
    return weights


def save_skeleton(skeleton, path):
    with open(path, "w") as f:
        json.dump(skeleton.to_json(), f, indent=1)


def load_skeleton(path):
    with open(path) as f:
        return Skeleton.from_json(json.load(f))
