"""Procedural articulated capsule bodies with an analytic ground-truth renderer.

Actors are capsule skeletons with per-bone albedo and an axial stripe
texture, rendered by exact ray-capsule intersection under fixed Lambertian
lighting. Datasets are monocular: one frontal training camera per actor,
plus an orbit of held-out evaluation cameras with unseen poses.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ContractError
from .features import Camera
from .kinematics import Pose, Skeleton, forward_kinematics, posed_segments

LIGHT_DIR = np.array([0.25, 0.85, 0.47])
LIGHT_DIR = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)
AMBIENT = 0.35
DIFFUSE = 0.65
BACKGROUND = np.array([1.0, 1.0, 1.0])

# Template body, 8 joints: pelvis, spine, chest, head, arms, legs. Leaf
# bones extend their own rest offset, so arms/legs/head get full capsules.
_TEMPLATE_PARENT = np.array([-1, 0, 1, 2, 2, 2, 0, 0])
_TEMPLATE_OFFSETS = np.array(
    [
        [0.0, 1.00, 0.0],  # pelvis (world position)
        [0.0, 0.18, 0.0],  # spine
        [0.0, 0.18, 0.0],  # chest
        [0.0, 0.14, 0.0],  # head (leaf: continues up)
        [-0.24, 0.04, 0.0],  # left arm (leaf: continues outward)
        [0.24, 0.04, 0.0],  # right arm
        [-0.11, -0.50, 0.0],  # left leg (leaf: continues down)
        [0.11, -0.50, 0.0],  # right leg
    ]
)
_TEMPLATE_RADII = np.array([0.13, 0.12, 0.11, 0.09, 0.05, 0.05, 0.065, 0.065])


def template_skeleton(num_bones=8):
    """Category-template skeleton (mean proportions); the skinning prior and
    shared canonical bounds are built from this. Joint counts above 8
    subdivide the spine and keep the limb layout."""
    if num_bones < 8:
        raise ContractError("template supports 8 or more joints")
    extra = num_bones - 8
    parent = [-1]
    offsets = [_TEMPLATE_OFFSETS[0]]
    radii = [_TEMPLATE_RADII[0]]
    seg = _TEMPLATE_OFFSETS[1] / (extra + 1)
    for _ in range(extra + 1):  # spine chain, indices 1..extra+1
        parent.append(len(parent) - 1)
        offsets.append(seg)
        radii.append(_TEMPLATE_RADII[1])
    chest = len(parent)
    parent.append(chest - 1)
    offsets.append(_TEMPLATE_OFFSETS[2])
    radii.append(_TEMPLATE_RADII[2])
    for j in (3, 4, 5):  # head and arms hang off the chest
        parent.append(chest)
        offsets.append(_TEMPLATE_OFFSETS[j])
        radii.append(_TEMPLATE_RADII[j])
    for j in (6, 7):  # legs off the pelvis
        parent.append(0)
        offsets.append(_TEMPLATE_OFFSETS[j])
        radii.append(_TEMPLATE_RADII[j])
    return Skeleton(np.array(parent), np.array(offsets), np.array(radii))


@dataclass
class SyntheticActor:
    """A sampled identity: scaled skeleton plus per-bone appearance."""

    skeleton: Skeleton
    albedo: np.ndarray  # (B, 3)
    stripe_freq: np.ndarray  # (B,) cycles per meter along the bone axis
    stripe_phase: np.ndarray  # (B,)
    stripe_amp: float
    seed: int


def make_actor(seed, num_bones=8):
    """Deterministic actor from a seed: per-bone length/radius scales within
    modest ranges plus random albedo and stripe texture."""
    rng = np.random.default_rng(seed + 7_654_321)
    base = template_skeleton(num_bones)
    b = base.num_bones
    length_scale = rng.uniform(0.9, 1.1, size=b)
    radius_scale = rng.uniform(0.8, 1.2, size=b)
    offsets = base.rest_offsets.copy()
    offsets[1:] *= length_scale[1:, None]
    skel = Skeleton(base.parent, offsets, base.bone_radii * radius_scale)
    albedo = rng.uniform(0.15, 0.85, size=(b, 3))
    stripe_freq = rng.uniform(3.0, 9.0, size=b)
    stripe_phase = rng.uniform(0.0, 2 * np.pi, size=b)
    return SyntheticActor(skel, albedo, stripe_freq, stripe_phase, 0.35, int(seed))


def _ray_capsule(origins, dirs, seg_a, seg_b, radius):
    """Vectorized ray-capsule intersection; inf where the ray misses."""
    ba = seg_b - seg_a
    oa = origins - seg_a
    baba = float(ba @ ba)
    t = np.full(origins.shape[0], np.inf)
    if baba < 1e-12:
        return _ray_sphere(origins, dirs, seg_a, radius)
    bard = dirs @ ba
    baoa = oa @ ba
    rdoa = np.einsum("ij,ij->i", dirs, oa)
    oaoa = np.einsum("ij,ij->i", oa, oa)
    a = baba - bard * bard
    b = baba * rdoa - baoa * bard
    c = baba * oaoa - baoa * baoa - radius * radius * baba
    h = b * b - a * c
    body = h >= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        t_body = (-b - np.sqrt(np.where(body, h, 0.0))) / a
    y = baoa + t_body * bard
    valid = body & (t_body > 1e-9) & (y >= 0.0) & (y <= baba) & (a > 1e-12)
    t = np.where(valid, t_body, t)
    # end caps
    for cap in (seg_a, seg_b):
        t_cap = _ray_sphere(origins, dirs, cap, radius)
        t = np.minimum(t, t_cap)
    return t


def _ray_sphere(origins, dirs, center, radius):
    oc = origins - center
    b = np.einsum("ij,ij->i", dirs, oc)
    c = np.einsum("ij,ij->i", oc, oc) - radius * radius
    h = b * b - c
    hit = h >= 0
    t = -b - np.sqrt(np.where(hit, h, 0.0))
    return np.where(hit & (t > 1e-9), t, np.inf)


def render_gt(actor, pose, camera, image_size=None):
    """Analytic render: (image (H, W, 3), mask (H, W), depth (H, W)).

    Per-pixel closest capsule hit, Lambertian shading with the actor's
    albedo and stripe texture, white background, exact binary mask.
    """
    w = camera.width if image_size is None else image_size
    h = camera.height if image_size is None else image_size
    skel = actor.skeleton
    segs = posed_segments(skel, pose)
    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    pix = np.stack([cols.ravel(), rows.ravel()], axis=1)
    k = camera.intrinsics
    x = (pix[:, 0] - k[0, 2] - k[0, 1] * (pix[:, 1] - k[1, 2]) / k[1, 1]) / k[0, 0]
    y = (pix[:, 1] - k[1, 2]) / k[1, 1]
    d = np.stack([x, y, np.ones(len(pix))], axis=1) @ camera.rotation
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(camera.center, d.shape)

    best_t = np.full(len(pix), np.inf)
    best_bone = np.full(len(pix), -1)
    for j in range(skel.num_bones):
        t = _ray_capsule(o, d, segs[j, 0], segs[j, 1], skel.bone_radii[j])
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_bone = np.where(closer, j, best_bone)

    img = np.tile(BACKGROUND, (len(pix), 1))
    hit = np.isfinite(best_t)
    if hit.any():
        p = o[hit] + best_t[hit, None] * d[hit]
        bones = best_bone[hit]
        seg_a = segs[bones, 0]
        seg_b = segs[bones, 1]
        ba = seg_b - seg_a
        baba = np.einsum("ij,ij->i", ba, ba)
        rel = np.einsum("ij,ij->i", p - seg_a, ba)
        frac = np.where(baba > 1e-12, np.clip(rel / np.maximum(baba, 1e-12), 0, 1), 0.0)
        axis_pt = seg_a + frac[:, None] * ba
        normal = p - axis_pt
        normal /= np.linalg.norm(normal, axis=1, keepdims=True)
        lambert = AMBIENT + DIFFUSE * np.clip(normal @ LIGHT_DIR, 0.0, None)
        along = frac * np.sqrt(baba)
        stripe = 1.0 - actor.stripe_amp * (
            0.5 + 0.5 * np.sin(2 * np.pi * actor.stripe_freq[bones] * along + actor.stripe_phase[bones])
        )
        img[hit] = np.clip(actor.albedo[bones] * stripe[:, None] * lambert[:, None], 0.0, 1.0)

    image = img.reshape(h, w, 3)
    mask = hit.reshape(h, w).astype(np.float64)
    depth = np.where(hit, best_t, 0.0).reshape(h, w)
    return image, mask, depth


def capsule_surface_points(skeleton, count=1024, seed=0):
    """Deterministic area-weighted samples of the rest-pose capsule surfaces;
    these play the role of body surface vertices."""
    rng = np.random.default_rng(seed + 9_999)
    segs = skeleton.bone_segments()
    radii = skeleton.bone_radii
    lengths = np.linalg.norm(segs[:, 1] - segs[:, 0], axis=1)
    areas = 2 * np.pi * radii * lengths + 4 * np.pi * radii ** 2
    counts = np.maximum(1, np.round(areas / areas.sum() * count).astype(int))
    pts = []
    for j in range(skeleton.num_bones):
        n = counts[j]
        a, b = segs[j]
        axis = b - a
        length = lengths[j]
        if length > 1e-9:
            axis_u = axis / length
        else:
            axis_u = np.array([0.0, 1.0, 0.0])
        # orthonormal frame around the axis
        helper = np.array([1.0, 0.0, 0.0]) if abs(axis_u[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
        u = np.cross(axis_u, helper)
        u /= np.linalg.norm(u)
        v = np.cross(axis_u, u)
        cap_area = 4 * np.pi * radii[j] ** 2
        side_area = 2 * np.pi * radii[j] * length
        n_side = int(round(n * side_area / (side_area + cap_area)))
        theta = rng.uniform(0, 2 * np.pi, size=n)
        ring = np.cos(theta)[:, None] * u + np.sin(theta)[:, None] * v
        side = a + rng.uniform(0, 1, size=(n, 1)) * axis + radii[j] * ring
        z = rng.uniform(-1, 1, size=n)
        phi = rng.uniform(0, 2 * np.pi, size=n)
        s = np.sqrt(1 - z * z)
        sphere = np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1) * radii[j]
        cap_center = np.where(sphere @ axis_u > 0, 1.0, 0.0)[:, None]
        caps = a + cap_center * axis + sphere
        pick = np.arange(n) < n_side
        pts.append(np.where(pick[:, None], side, caps))
    out = np.concatenate(pts, axis=0)
    return out[:count] if len(out) >= count else np.concatenate([out, out[: count - len(out)]])


def _look_at(eye, target, up=np.array([0.0, 1.0, 0.0])):
    forward = target - eye
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    return rot, -rot @ eye


def make_camera(image_size, azimuth, distance=2.6, height=1.0, target_height=0.95):
    """Orbit camera looking at the body center; focal fills ~80% of frame."""
    focal = 1.15 * image_size
    eye = np.array(
        [distance * np.sin(azimuth), height, distance * np.cos(azimuth)]
    )
    rot, trans = _look_at(eye, np.array([0.0, target_height, 0.0]))
    k = np.array(
        [[focal, 0.0, (image_size - 1) / 2.0], [0.0, focal, (image_size - 1) / 2.0], [0.0, 0.0, 1.0]]
    )
    return Camera(k, rot, trans, image_size, image_size)


@dataclass
class MotionParams:
    """Per-joint sinusoid (axis, amplitude, cycles, phase) and root bob/yaw."""

    amplitudes: np.ndarray  # (B, 3)
    cycles: np.ndarray  # (B, 3)
    phases: np.ndarray  # (B, 3)
    bob: float


def sample_motion(skeleton, rng):
    b = skeleton.num_bones
    amplitudes = np.zeros((b, 3))
    # root yaw plus limb swings; joints beyond the template move mildly
    amplitudes[0, 1] = rng.uniform(0.3, 0.6)  # pelvis yaw
    for j in range(1, b):
        amplitudes[j] = rng.uniform(0.05, 0.15, size=3)
    if b == 8:
        amplitudes[4, 2] = rng.uniform(0.3, 0.6)  # arm swings
        amplitudes[5, 2] = rng.uniform(0.3, 0.6)
        amplitudes[6, 0] = rng.uniform(0.25, 0.5)  # leg swings
        amplitudes[7, 0] = rng.uniform(0.25, 0.5)
    cycles = rng.uniform(1.0, 2.5, size=(b, 3))
    phases = rng.uniform(0, 2 * np.pi, size=(b, 3))
    return MotionParams(amplitudes, cycles, phases, rng.uniform(0.0, 0.02))


def pose_at(motion, skeleton, t):
    """Pose at normalized time t (one dataset spans t in [0, 1))."""
    angle = motion.amplitudes * np.sin(2 * np.pi * motion.cycles * t + motion.phases)
    trans = np.array([0.0, motion.bob * np.sin(2 * np.pi * 2.0 * t), 0.0])
    return Pose(angle, trans)


@dataclass
class DatasetManifest:
    actors_train: int = 8
    actors_test: int = 2
    frames_per_actor: int = 60
    image_size: int = 64
    eval_views: int = 16
    num_bones: int = 8
    seed: int = 0

    def to_json(self):
        return dict(self.__dict__)

    @classmethod
    def from_json(cls, doc):
        return cls(**doc)


def _write_png(path, array):
    """8-bit PNG written atomically (temp + rename)."""
    arr = np.clip(np.round(array * 255.0), 0, 255).astype(np.uint8)
    img = Image.fromarray(arr)
    tmp = path + ".tmp"
    img.save(tmp, format="PNG")
    os.replace(tmp, path)


def make_dataset(manifest, out_dir):
    """Render the full multi-actor dataset to disk.

    Layout per actor: frames/<idx>.png, masks/<idx>.png, meta.json; the
    root holds manifest.json. Train frames use the frontal camera; eval
    frames pair unseen poses (times past the train range) with orbit views.
    """
    os.makedirs(out_dir, exist_ok=True)
    total = manifest.actors_train + manifest.actors_test
    actor_ids = []
    for i in range(total):
        split = "train" if i < manifest.actors_train else "test"
        actor_id = f"actor{i:02d}"
        actor_ids.append({"id": actor_id, "seed": manifest.seed * 1000 + i, "split": split})

    for entry in actor_ids:
        actor = make_actor(entry["seed"], manifest.num_bones)
        rng = np.random.default_rng(entry["seed"] + 555)
        motion = sample_motion(actor.skeleton, rng)
        adir = os.path.join(out_dir, entry["id"])
        os.makedirs(os.path.join(adir, "frames"), exist_ok=True)
        os.makedirs(os.path.join(adir, "masks"), exist_ok=True)
        train_cam = make_camera(manifest.image_size, 0.0)
        frames_meta = []
        n_train = manifest.frames_per_actor
        for f in range(n_train):
            pose = pose_at(motion, actor.skeleton, f / n_train)
            img, mask, _ = render_gt(actor, pose, train_cam)
            _write_png(os.path.join(adir, "frames", f"{f:04d}.png"), img)
            _write_png(os.path.join(adir, "masks", f"{f:04d}.png"), mask)
            frames_meta.append(
                {"index": f, "pose": pose.to_json(), "camera": train_cam.to_json(), "split": "train"}
            )
        for v in range(manifest.eval_views):
            f = n_train + v
            pose = pose_at(motion, actor.skeleton, (n_train + 3.7 * v) / n_train)
            cam = make_camera(manifest.image_size, 2 * np.pi * v / manifest.eval_views)
            img, mask, _ = render_gt(actor, pose, cam)
            _write_png(os.path.join(adir, "frames", f"{f:04d}.png"), img)
            _write_png(os.path.join(adir, "masks", f"{f:04d}.png"), mask)
            frames_meta.append(
                {"index": f, "pose": pose.to_json(), "camera": cam.to_json(), "split": "eval"}
            )
        meta = {
            "actor": entry,
            "skeleton": actor.skeleton.to_json(),
            "frames": frames_meta,
        }
        tmp = os.path.join(adir, "meta.json.tmp")
        with open(tmp, "w") as fh:
            json.dump(meta, fh, indent=1, sort_keys=True)
        os.replace(tmp, os.path.join(adir, "meta.json"))

    tmp = os.path.join(out_dir, "manifest.json.tmp")
    with open(tmp, "w") as fh:
        json.dump({"manifest": manifest.to_json(), "actors": actor_ids}, fh, indent=1, sort_keys=True)
    os.replace(tmp, os.path.join(out_dir, "manifest.json"))
    return out_dir


@dataclass
class ActorData:
    """Loaded per-actor arrays, train and eval splits."""

    actor_id: str
    seed: int
    skeleton: Skeleton
    images: np.ndarray  # (F, H, W, 3)
    masks: np.ndarray  # (F, H, W)
    poses: list
    cameras: list
    splits: list  # "train" | "eval" per frame

    def frame_indices(self, split):
        return [i for i, s in enumerate(self.splits) if s == split]

    def canonical_vertices(self, count=1024):
        return capsule_surface_points(self.skeleton, count, seed=self.seed)


class Dataset:
    """Random-access view over an on-disk dataset directory."""

    def __init__(self, root):
        with open(os.path.join(root, "manifest.json")) as fh:
            doc = json.load(fh)
        self.root = root
        self.manifest = DatasetManifest.from_json(doc["manifest"])
        self.actor_entries = doc["actors"]
        self._cache = {}

    def actor_ids(self, split=None):
        return [a["id"] for a in self.actor_entries if split is None or a["split"] == split]

    def load_actor(self, actor_id):
        if actor_id in self._cache:
            return self._cache[actor_id]
        adir = os.path.join(self.root, actor_id)
        with open(os.path.join(adir, "meta.json")) as fh:
            meta = json.load(fh)
        skel = Skeleton.from_json(meta["skeleton"])
        images, masks, poses, cameras, splits = [], [], [], [], []
        for fr in meta["frames"]:
            idx = fr["index"]
            img = np.asarray(Image.open(os.path.join(adir, "frames", f"{idx:04d}.png")))
            msk = np.asarray(Image.open(os.path.join(adir, "masks", f"{idx:04d}.png")))
            images.append(img.astype(np.float64) / 255.0)
            masks.append((msk > 127).astype(np.float64))
            poses.append(Pose.from_json(fr["pose"]))
            cameras.append(Camera.from_json(fr["camera"]))
            splits.append(fr["split"])
        data = ActorData(
            actor_id,
            int(meta["actor"]["seed"]),
            skel,
            np.stack(images),
            np.stack(masks),
            poses,
            cameras,
            splits,
        )
        self._cache[actor_id] = data
        return data
