"""Sampling points around pillar queries and feature lookup in every camera.

Each query emits ``P`` offsets that are scaled by its box size (length along
the heading, width across it, height up), rotated by its yaw and placed
around the pillar center ``(x, y, z + h/2)``.  For frame ``t`` the points are
moved back along the query's own velocity by ``(T - 1 - t) * 0.5`` seconds,
projected into each camera, and read from the feature maps bilinearly;
samples from cameras that see the point are averaged.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import fused, ops
from .kernels.nn import Linear
from .kernels.tensor import Tensor, as_tensor, make_node
from .queries import QuerySet
from .simworld import FRAME_DT, CameraModel, invert_rigid

MIN_DEPTH = 0.1


@dataclass
class SamplePoints:
    offsets: Tensor        # [N, P, 3] raw offsets (box-relative units)
    world_points: Tensor   # [T, N, P, 3]


@dataclass
class SceneInputs:
    """Everything the decoder needs from one clip."""
    maps: np.ndarray              # [T, K, C, H', W']
    cam_from_world: np.ndarray    # [T, K, 4, 4]
    intrinsics: np.ndarray        # [K, 3, 3]
    image_size: tuple             # (width, height) in pixels
    stride: int

    @property
    def frames(self) -> int:
        return self.maps.shape[0]


def scene_inputs(rig: list[CameraModel], ego_poses: np.ndarray, maps: np.ndarray, stride: int) -> SceneInputs:
    cam_from_world = np.stack([np.stack([cam.extrinsic @ invert_rigid(pose) for cam in rig]) for pose in ego_poses])
    sizes = {(c.width, c.height) for c in rig}
    if len(sizes) != 1:
        raise ValueError(f"all cameras must share an image size, got {sorted(sizes)}")
    return SceneInputs(np.asarray(maps, dtype=np.float64), cam_from_world,
                       np.stack([c.K for c in rig]), sizes.pop(), stride)


def offset_head(rng: np.random.Generator, d_model: int, n_points: int) -> Linear:
    """Linear map ``D -> P*3``; the bias starts as a small spread pattern inside the box."""
    angles = 2.0 * np.pi * np.arange(n_points) / max(n_points, 1)
    pattern = np.stack([0.25 * np.cos(angles), 0.25 * np.sin(angles), np.zeros(n_points)], axis=1)
    return Linear(rng, d_model, n_points * 3, std=0.01 / np.sqrt(d_model), bias_init=pattern.reshape(-1))


def pillar_geometry(boxes):
    """Differentiable per-query yaw cos/sin ``[N]``, axis scales ``[N, 3]`` (l, w, h),
    pillar centers ``[N, 3]`` and planar velocity ``[N, 3]`` (z component zero)."""
    b = as_tensor(boxes)
    dims = ops.exp(b[:, 3:6])
    scale = ops.stack([dims[:, 1], dims[:, 0], dims[:, 2]], axis=1)
    center = ops.stack([b[:, 0], b[:, 1], b[:, 2] + dims[:, 2] * 0.5], axis=1)
    theta = b[:, 6]
    zero = b[:, 7] * 0.0
    vel = ops.stack([b[:, 7], b[:, 8], zero], axis=1)
    return ops.cos(theta), ops.sin(theta), scale, center, vel


def gen_sampling_points(qset: QuerySet, head: Linear, n_points: int, frames: int,
                        features: Tensor | None = None) -> SamplePoints:
    """World points ``[T, N, P, 3]`` for every frame, differentiable in offsets and boxes."""
    feats = qset.features if features is None else features
    N = qset.n
    raw = head(feats).reshape(N, n_points, 3)
    c, s, scale, center, vel = pillar_geometry(qset.boxes)
    local = raw * scale.reshape(N, 1, 3)
    lx, ly, lz = local[:, :, 0], local[:, :, 1], local[:, :, 2]
    c, s = c.reshape(N, 1), s.reshape(N, 1)
    rotated = ops.stack([lx * c - ly * s, lx * s + ly * c, lz], axis=2)
    base = rotated + center.reshape(N, 1, 3)
    lag = (frames - 1 - np.arange(frames)) * FRAME_DT
    shift = vel.reshape(1, N, 1, 3) * lag.reshape(frames, 1, 1, 1)
    pts = base.reshape(1, N, n_points, 3) - shift
    return SamplePoints(raw, pts)


def project(points, cam_from_world: np.ndarray, intrinsics: np.ndarray, image_size) -> tuple[Tensor, np.ndarray]:
    """Pinhole projection of world points for every (frame, camera).

    points: ``[T, M, 3]``; cam_from_world: ``[T, K, 4, 4]``; intrinsics
    ``[K, 3, 3]``.  Returns pixels ``[T, K, M, 2]`` and validity ``[T, K, M]``
    (depth > 0.1 m and inside the image).  Invalid pixels are zero and carry
    no gradient.
    """
    points = as_tensor(points)
    A = cam_from_world[:, :, :3, :3]
    b = cam_from_world[:, :, :3, 3]
    p = np.einsum("tkij,tmj->tkmi", A, points.data) + b[:, :, None, :]
    X, Y, Z = p[..., 0], p[..., 1], p[..., 2]
    fx = intrinsics[None, :, None, 0, 0]
    fy = intrinsics[None, :, None, 1, 1]
    cx = intrinsics[None, :, None, 0, 2]
    cy = intrinsics[None, :, None, 1, 2]
    front = Z > MIN_DEPTH
    Zs = np.where(front, Z, 1.0)
    u = fx * X / Zs + cx
    v = fy * Y / Zs + cy
    W, H = image_size
    valid = front & (u >= 0) & (u <= W) & (v >= 0) & (v <= H)
    pix = np.where(valid[..., None], np.stack([u, v], axis=-1), 0.0)

    def bw(g):
        gu = np.where(valid, g[..., 0], 0.0)
        gv = np.where(valid, g[..., 1], 0.0)
        gp = np.stack([gu * fx / Zs, gv * fy / Zs, -(gu * fx * X + gv * fy * Y) / (Zs * Zs)], axis=-1)
        return (np.einsum("tkmi,tkij->tmj", gp, A),)

    return make_node(pix, (points,), bw), valid


def sample_all(qset: QuerySet, head: Linear, inputs: SceneInputs, n_points: int,
               features: Tensor | None = None) -> tuple[Tensor, SamplePoints, np.ndarray]:
    """Sampled features ``[T, N*P, C]`` with token order (query, point).

    Returns the features, the sampling points and the per-(frame, camera,
    token) validity mask.
    """
    T, K, C, Hm, Wm = inputs.maps.shape
    pts = gen_sampling_points(qset, head, n_points, T, features)
    M = qset.n * n_points
    flat = pts.world_points.reshape(T, M, 3)
    pix, valid = project(flat, inputs.cam_from_world, inputs.intrinsics, inputs.image_size)
    map_pix = (pix * (1.0 / inputs.stride)).reshape(T * K, M, 2)
    vals = fused.bilinear(inputs.maps.reshape(T * K, C, Hm, Wm), map_pix, valid.reshape(T * K, M))
    count = valid.sum(axis=1)                      # [T, M]
    inv = np.where(count > 0, 1.0 / np.maximum(count, 1), 0.0)
    feats = vals.reshape(T, K, M, C).sum(axis=1) * inv[..., None]
    return feats, pts, valid
