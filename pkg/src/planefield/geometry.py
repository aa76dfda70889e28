"""Pinhole cameras, ray generation and stratified sampling along rays."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import InputDomainError


@dataclass
class Camera:
    """Pinhole camera in the synthetic-dataset convention.

    The camera looks down its local -z axis with +y up and +x to the right.
    ``pose`` is the 4x4 camera-to-world transform.
    """

    width: int
    height: int
    focal: float
    pose: np.ndarray

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.pose.shape != (4, 4):
            raise InputDomainError(f"pose must be 4x4, got {self.pose.shape}")
        if self.width < 1 or self.height < 1:
            raise InputDomainError("image size must be at least 1x1")
        if not self.focal > 0:
            raise InputDomainError(f"focal must be positive, got {self.focal}")
        rot = self.pose[:3, :3]
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6):
            raise InputDomainError("pose rotation block is not orthonormal")
        if not np.allclose(self.pose[3], [0.0, 0.0, 0.0, 1.0], atol=1e-12):
            raise InputDomainError("pose last row must be [0, 0, 0, 1]")

    @classmethod
    def from_fov(cls, width, height, camera_angle_x, pose):
        focal = 0.5 * width / math.tan(0.5 * camera_angle_x)
        return cls(width, height, focal, pose)

    @property
    def center(self):
        return self.pose[:3, 3].copy()


@dataclass
class Rays:
    """A batch of rays; ``origins`` and ``directions`` are (R, 3)."""

    origins: torch.Tensor
    directions: torch.Tensor

    def __len__(self):
        return self.origins.shape[0]

    def __getitem__(self, idx):
        return Rays(self.origins[idx], self.directions[idx])


@dataclass
class RaySamples:
    """Sample depths ``t`` (R, S), points ``q`` (R, S, 3) and intervals ``delta`` (R, S)."""

    t: torch.Tensor
    q: torch.Tensor
    delta: torch.Tensor


def pixel_grid(height, width):
    """All (row, col) pixel indices in row-major order, shape (H*W, 2)."""
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return np.stack([rows.ravel(), cols.ravel()], axis=-1)


def generate_rays(camera, pixels, dtype=torch.float32):
    """One ray per (row, col) pixel, passing through the pixel center."""
    pix = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    rows, cols = pix[:, 0], pix[:, 1]
    if (rows < 0).any() or (rows > camera.height - 1).any() or (cols < 0).any() or (cols > camera.width - 1).any():
        raise InputDomainError("pixel outside image bounds")
    x = (cols + 0.5 - 0.5 * camera.width) / camera.focal
    y = -(rows + 0.5 - 0.5 * camera.height) / camera.focal
    local = np.stack([x, y, -np.ones_like(x)], axis=-1)
    dirs = local @ camera.pose[:3, :3].T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.pose[:3, 3], dirs.shape)
    return Rays(torch.tensor(origins, dtype=dtype), torch.tensor(dirs, dtype=dtype))


def sample_along_rays(rays, near, far, count, stratified=False, generator=None):
    """Place ``count`` samples in equal bins between ``near`` and ``far``.

    Without stratification samples sit at bin midpoints; with it each sample is
    jittered uniformly inside its bin. The last interval absorbs the leftover
    distance so that the intervals always sum to ``far - near``.
    """
    if not 0 < near < far:
        raise InputDomainError(f"need 0 < near < far, got near={near}, far={far}")
    if count < 2:
        raise InputDomainError(f"need at least 2 samples per ray, got {count}")
    n_rays = len(rays)
    dtype = rays.origins.dtype
    width = (far - near) / count
    lower = near + width * torch.arange(count, dtype=torch.float64)
    if stratified:
        u = torch.rand((n_rays, count), generator=generator, dtype=torch.float64)
    else:
        u = torch.full((n_rays, count), 0.5, dtype=torch.float64)
    t = lower + width * u
    delta = torch.empty_like(t)
    delta[:, :-1] = t[:, 1:] - t[:, :-1]
    delta[:, -1] = (far - near) - (t[:, -1] - t[:, 0])
    t = t.to(dtype)
    q = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
    return RaySamples(t=t, q=q, delta=delta.to(dtype))


def sample_along_ray(origin, direction, near, far, count, stratified=False, generator=None):
    """Single-ray convenience wrapper returning 1-D ``t``/``delta`` and (S, 3) ``q``."""
    rays = Rays(torch.as_tensor(origin).reshape(1, 3), torch.as_tensor(direction).reshape(1, 3))
    s = sample_along_rays(rays, near, far, count, stratified, generator)
    return RaySamples(t=s.t[0], q=s.q[0], delta=s.delta[0])


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)):
    """Camera-to-world pose placing the camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-8:
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    true_up = np.cross(right, forward)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = true_up
    pose[:3, 2] = -forward
    pose[:3, 3] = eye
    return pose
