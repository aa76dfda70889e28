"""Posed image sets: synthetic-format I/O and procedural toy scenes."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import FormatError, InputDomainError
from .geometry import Camera, generate_rays, look_at, pixel_grid, sample_along_rays
from .rendering import composite

SYNTHETIC_AABB = ((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5))
PROCEDURAL_AABB = ((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))


@dataclass
class PosedImageSet:
    """Images (n, H, W, 3) in [0, 1] with one camera, split tag and appearance index each.

    ``appearance_index`` is the position of the image within its split; training
    images index the appearance table with it.
    """

    images: np.ndarray
    cameras: list
    splits: list
    appearance_index: np.ndarray = None
    near: float = 2.0
    far: float = 6.0
    aabb: tuple = SYNTHETIC_AABB
    background: tuple = (1.0, 1.0, 1.0)
    tints: np.ndarray = None
    camera_angle_x: float = None
    names: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.images)
        if len(self.cameras) != n or len(self.splits) != n:
            raise InputDomainError("images, cameras and split tags must have equal counts")
        if self.appearance_index is None:
            counters = {}
            idx = []
            for s in self.splits:
                idx.append(counters.get(s, 0))
                counters[s] = idx[-1] + 1
            self.appearance_index = np.asarray(idx, dtype=np.int64)
        for split in set(self.splits):
            shapes = {self.images[i].shape for i in self.indices(split)}
            if len(shapes) > 1:
                raise InputDomainError(f"images in split {split!r} differ in size: {shapes}")

    def __len__(self):
        return len(self.images)

    def indices(self, split):
        return [i for i, s in enumerate(self.splits) if s == split]

    def subset(self, split):
        idx = self.indices(split)
        return PosedImageSet(
            images=np.stack([self.images[i] for i in idx]) if idx else np.zeros((0, 1, 1, 3)),
            cameras=[self.cameras[i] for i in idx],
            splits=[split] * len(idx),
            appearance_index=self.appearance_index[idx],
            near=self.near, far=self.far, aabb=self.aabb, background=self.background,
            tints=None if self.tints is None else self.tints[idx],
            camera_angle_x=self.camera_angle_x,
            names=[self.names[i] for i in idx] if self.names else [],
        )


# ---------------------------------------------------------------------------
# synthetic transforms format


def _read_rgba(path, background):
    try:
        img = Image.open(path)
        img.load()
    except (OSError, FileNotFoundError) as exc:
        raise FormatError(f"{path}: cannot read image ({exc})") from exc
    arr = np.asarray(img.convert("RGBA"), dtype=np.float32) / 255.0
    rgb, alpha = arr[..., :3], arr[..., 3:4]
    return rgb * alpha + np.asarray(background, dtype=np.float32) * (1.0 - alpha)


def _frame_pose(manifest_path, k, frame):
    try:
        pose = np.asarray(frame["transform_matrix"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{manifest_path}: frame {k}: missing or malformed transform_matrix") from exc
    if pose.shape != (4, 4) or not np.isfinite(pose).all():
        raise FormatError(f"{manifest_path}: frame {k}: transform_matrix must be a finite 4x4 matrix")
    return pose


def load_synthetic(path, splits=("train", "test"), background=(1.0, 1.0, 1.0)):
    """Load a directory holding ``transforms_<split>.json`` manifests and PNG frames.

    RGBA frames are alpha-composited onto ``background``. Optional manifest keys
    ``near``, ``far``, ``aabb`` and per-frame ``tint`` are honoured when present.
    """
    root = Path(path)
    if not root.is_dir():
        raise FormatError(f"{root}: dataset directory does not exist")
    images, cameras, tags, names, tints = [], [], [], [], []
    angle = None
    extra = {}
    for split in splits:
        manifest_path = root / f"transforms_{split}.json"
        if not manifest_path.exists():
            raise FormatError(f"{manifest_path}: manifest not found")
        try:
            manifest = json.loads(manifest_path.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{manifest_path}: invalid JSON ({exc})") from exc
        if "camera_angle_x" not in manifest or "frames" not in manifest:
            raise FormatError(f"{manifest_path}: needs 'camera_angle_x' and 'frames'")
        angle = float(manifest["camera_angle_x"])
        for key in ("near", "far", "aabb"):
            if key in manifest:
                extra[key] = manifest[key]
        for k, frame in enumerate(manifest["frames"]):
            pose = _frame_pose(manifest_path, k, frame)
            if "file_path" not in frame:
                raise FormatError(f"{manifest_path}: frame {k}: missing file_path")
            rel = frame["file_path"]
            img_path = root / rel
            if not img_path.suffix:
                img_path = img_path.with_suffix(".png")
            img = _read_rgba(img_path, background)
            h, w = img.shape[:2]
            try:
                cam = Camera.from_fov(w, h, angle, pose)
            except InputDomainError as exc:
                raise FormatError(f"{manifest_path}: frame {k}: {exc}") from exc
            images.append(img)
            cameras.append(cam)
            tags.append(split)
            names.append(rel)
            tints.append(frame.get("tint", [1.0, 1.0, 1.0]))
    aabb = tuple(map(tuple, extra["aabb"])) if "aabb" in extra else SYNTHETIC_AABB
    return PosedImageSet(
        images=np.stack(images) if images else np.zeros((0, 1, 1, 3), np.float32),
        cameras=cameras, splits=tags,
        near=float(extra.get("near", 2.0)), far=float(extra.get("far", 6.0)),
        aabb=aabb, background=tuple(background),
        tints=np.asarray(tints, dtype=np.float64), camera_angle_x=angle, names=names,
    )


def save_png(path, image):
    """Write a float image in [0, 1] (H, W) or (H, W, 3) as an 8-bit PNG."""
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def write_synthetic(dataset, path):
    """Write ``dataset`` in the synthetic transforms format (8-bit PNG frames)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for split in sorted(set(dataset.splits)):
        frames = []
        for j, i in enumerate(dataset.indices(split)):
            rel = f"{split}/r_{j}"
            save_png(root / f"{rel}.png", dataset.images[i])
            frame = {"file_path": f"./{rel}", "transform_matrix": dataset.cameras[i].pose.tolist()}
            if dataset.tints is not None:
                frame["tint"] = [float(v) for v in dataset.tints[i]]
            frames.append(frame)
        manifest = {
            "camera_angle_x": dataset.camera_angle_x,
            "near": dataset.near,
            "far": dataset.far,
            "aabb": [list(dataset.aabb[0]), list(dataset.aabb[1])],
            "frames": frames,
        }
        (root / f"transforms_{split}.json").write_text(json.dumps(manifest, indent=2))


# ---------------------------------------------------------------------------
# procedural scenes


@dataclass
class Primitive:
    kind: str
    center: tuple
    size: tuple
    color: tuple


@dataclass
class ProceduralScene:
    """Soft-edged colored spheres and boxes with an analytic density and color field."""

    primitives: list
    aabb: tuple = PROCEDURAL_AABB
    density_scale: float = 60.0
    edge: float = 0.015

    def _sdf(self, prim, q):
        c = torch.as_tensor(prim.center, dtype=q.dtype)
        if prim.kind == "sphere":
            return (q - c).norm(dim=-1) - prim.size[0]
        if prim.kind == "box":
            d = (q - c).abs() - torch.as_tensor(prim.size, dtype=q.dtype)
            outside = d.clamp(min=0).norm(dim=-1)
            inside = d.max(dim=-1).values.clamp(max=0)
            return outside + inside
        raise InputDomainError(f"unknown primitive kind {prim.kind!r}")

    def field(self, q, tint=None):
        """Density (...) and color (..., 3) at world points ``q`` (..., 3)."""
        sigma = torch.zeros(q.shape[:-1], dtype=q.dtype)
        acc = torch.zeros((*q.shape[:-1], 3), dtype=q.dtype)
        for prim in self.primitives:
            occ = torch.sigmoid(-self._sdf(prim, q) / self.edge)
            sigma = sigma + occ
            acc = acc + occ[..., None] * torch.as_tensor(prim.color, dtype=q.dtype)
        color = torch.where(sigma[..., None] > 1e-12, acc / sigma.clamp(min=1e-12)[..., None], 0.5)
        if tint is not None:
            color = (color * torch.as_tensor(tint, dtype=q.dtype)).clamp(0.0, 1.0)
        return self.density_scale * sigma, color


def random_scene(rng, n_primitives=4):
    prims = []
    for _ in range(n_primitives):
        kind = "sphere" if rng.random() < 0.5 else "box"
        center = tuple(float(v) for v in rng.uniform(-0.25, 0.25, size=3))
        if kind == "sphere":
            size = (float(rng.uniform(0.1, 0.22)),) * 3
        else:
            size = tuple(float(v) for v in rng.uniform(0.07, 0.18, size=3))
        color = tuple(float(v) for v in rng.uniform(0.05, 0.95, size=3))
        prims.append(Primitive(kind, center, size, color))
    return ProceduralScene(prims)


def orbit_poses(count, radius, seed):
    """Camera-to-world poses on a golden-angle spiral over the upper sphere, looking at the origin."""
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 2 * math.pi)
    golden = math.pi * (3.0 - math.sqrt(5.0))
    poses = []
    for k in range(count):
        z = -0.25 + 1.1 * (k + 0.5) / count
        r = math.sqrt(1 - z * z)
        phi = phase + golden * k
        eye = radius * np.array([r * math.cos(phi), r * math.sin(phi), z])
        poses.append(look_at(eye))
    return poses


def render_analytic(scene, camera, near, far, n_samples, tint=None, background=(1.0, 1.0, 1.0)):
    """Ground-truth image of ``scene`` by dense midpoint quadrature, float64."""
    rays = generate_rays(camera, pixel_grid(camera.height, camera.width), dtype=torch.float64)
    out = torch.empty((len(rays), 3), dtype=torch.float64)
    bg = torch.as_tensor(background, dtype=torch.float64)
    chunk = 1024
    for s in range(0, len(rays), chunk):
        part = rays[s:s + chunk]
        smp = sample_along_rays(part, near, far, n_samples)
        sigma, rgb = scene.field(smp.q, tint)
        res = composite(sigma, rgb, smp.delta)
        out[s:s + chunk] = res.color + (1.0 - res.opacity)[:, None] * bg
    return out.reshape(camera.height, camera.width, 3).numpy()


def generate_procedural(seed, n_images, resolution, jitter=0.0, n_test=0, scene=None,
                        n_primitives=4, radius=2.0, fov_deg=40.0, base_samples=64,
                        dense_factor=8):
    """Render a seeded procedural scene from ``n_images`` train and ``n_test`` test views.

    Returns (PosedImageSet, ProceduralScene). Ground truth is composited with
    ``dense_factor * base_samples`` samples per ray. With ``jitter > 0`` every
    image gets a multiplicative color tint drawn from [1 - jitter, 1 + jitter].
    """
    if resolution < 8:
        raise InputDomainError("resolution must be at least 8")
    rng = np.random.default_rng(seed)
    if scene is None:
        scene = random_scene(rng, n_primitives)
    half_diag = float(np.linalg.norm(np.subtract(scene.aabb[1], scene.aabb[0]))) / 2
    near, far = radius - half_diag, radius + half_diag
    angle = math.radians(fov_deg)
    # one spiral for all views; test views are spread evenly along it
    total = n_images + n_test
    spiral = orbit_poses(total, radius, seed)
    test_at = {int((j + 0.5) * total / n_test) for j in range(n_test)} if n_test else set()
    order = [k for k in range(total) if k not in test_at] + sorted(test_at)
    poses = [spiral[k] for k in order]
    splits = ["train"] * n_images + ["test"] * n_test
    tints = np.ones((len(poses), 3))
    if jitter > 0:
        tints = 1.0 + jitter * rng.uniform(-1.0, 1.0, size=(len(poses), 3))
    cams, imgs = [], []
    for k, pose in enumerate(poses):
        cam = Camera.from_fov(resolution, resolution, angle, pose)
        tint = tints[k] if jitter > 0 else None
        imgs.append(render_analytic(scene, cam, near, far, dense_factor * base_samples, tint).astype(np.float32))
        cams.append(cam)
    ds = PosedImageSet(
        images=np.stack(imgs), cameras=cams, splits=splits, near=near, far=far,
        aabb=scene.aabb, tints=tints, camera_angle_x=angle,
    )
    return ds, scene


def make_corpus(count, size, channels, seed):
    """Procedural image corpus (count, channels, size, size) of smooth blobs and shapes.

    Channels share geometry with random per-channel gains, then the whole corpus
    is standardised to zero mean and unit variance.
    """
    if count < 1:
        raise InputDomainError("corpus must contain at least one image")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(-1, 1, size), np.linspace(-1, 1, size), indexing="ij")
    out = np.zeros((count, channels, size, size))
    for k in range(count):
        img = np.zeros((channels, size, size))
        for _ in range(rng.integers(2, 6)):
            cx, cy = rng.uniform(-0.8, 0.8, size=2)
            gains = rng.normal(size=(channels, 1, 1))
            shape = rng.integers(3)
            if shape == 0:
                s = rng.uniform(0.1, 0.5)
                m = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
            elif shape == 1:
                r = rng.uniform(0.15, 0.5)
                m = 1 / (1 + np.exp((np.hypot(xx - cx, yy - cy) - r) / 0.05))
            else:
                hx, hy = rng.uniform(0.1, 0.5, size=2)
                m = (1 / (1 + np.exp((np.abs(xx - cx) - hx) / 0.05))) * (1 / (1 + np.exp((np.abs(yy - cy) - hy) / 0.05)))
            img += gains * m
        gx, gy = rng.normal(scale=0.3, size=2)
        img += (gx * xx + gy * yy)[None]
        out[k] = img
    out = (out - out.mean()) / out.std()
    return torch.tensor(out, dtype=torch.float32)


def atomic_write_bytes(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
