"""Synthetic labeled scenes and transformed cloud pairs.

Scenes are unions of primitive surfaces (a floor plane plus spheres and
boxes resting on it) so that class boundaries exist wherever primitives
touch. Coordinate noise and label flips inject the aleatoric signal the
uncertainty models are meant to pick up. Matching pairs apply a yaw
rotation, uniform scale and translation to a base scene, crop to a
partial overlap, and jitter the copy; the exact generating transform is
returned as ground truth.

Generation consumes structured child streams (geometry vs label noise),
so regenerating a scene with the label-noise rate set to zero yields the
identical geometry and pre-flip labels; diffing the two labelings
recovers the flip mask.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .embeddings import PointCloud
from .rng import Rng
from .sampling import RigidTransform


@dataclass(frozen=True)
class SceneConfig:
    n_points: int = 1024
    num_classes: int = 4
    noise_sigma: float = 0.01
    label_noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0.0 <= self.label_noise < 0.5:
            raise ValueError("label_noise must lie in [0, 0.5)")
        if self.n_points < self.num_classes:
            raise ValueError("need at least one point per class")


@dataclass(frozen=True)
class PairConfig:
    n_points: int = 512
    rotation_max_deg: float = 360.0
    scale_range: tuple = (0.8, 1.2)
    translation_max: float = 0.5
    jitter_sigma: float = 0.005
    overlap: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.overlap <= 1.0:
            raise ValueError("overlap must lie in (0, 1]")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("invalid scale range")
        if self.jitter_sigma < 0 or self.translation_max < 0:
            raise ValueError("jitter and translation bounds must be >= 0")


def class_budgets(n_points: int, num_classes: int) -> np.ndarray:
    """Points per class: even split, remainder to the floor class."""
    base = n_points // num_classes
    budgets = np.full(num_classes, base, dtype=np.int64)
    budgets[0] += n_points - base * num_classes
    return budgets


def _sample_floor(rng: Rng, count: int) -> np.ndarray:
    xy = rng.uniform((count, 2), -1.0, 1.0)
    return np.concatenate([xy, np.zeros((count, 1))], axis=1)


def _sample_sphere(rng: Rng, count: int) -> np.ndarray:
    # small and low: strong curvature, z band near the floor
    center = np.array([*rng.uniform((2,), -0.6, 0.6), 0.0])
    radius = float(rng.uniform(None, 0.12, 0.2))
    center[2] = radius  # rests on the floor
    z = rng.normal((count, 3))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    return center + radius * z


def _sample_cylinder(rng: Rng, count: int) -> np.ndarray:
    # tall and thin: 1-D curvature, z band above the boxes
    center = np.array([*rng.uniform((2,), -0.6, 0.6), 0.0])
    radius = float(rng.uniform(None, 0.08, 0.15))
    height = float(rng.uniform(None, 0.6, 1.0))
    # side vs caps proportionally to area
    side_area = 2 * np.pi * radius * height
    cap_area = np.pi * radius ** 2
    u = rng.uniform((count,), 0.0, side_area + 2 * cap_area)
    theta = rng.uniform((count,), 0.0, 2 * np.pi)
    uv = rng.uniform((count, 2))
    pts = np.empty((count, 3))
    on_side = u < side_area
    pts[on_side, 0] = radius * np.cos(theta[on_side])
    pts[on_side, 1] = radius * np.sin(theta[on_side])
    pts[on_side, 2] = uv[on_side, 0] * height
    caps = ~on_side
    r = radius * np.sqrt(uv[caps, 0])
    pts[caps, 0] = r * np.cos(theta[caps])
    pts[caps, 1] = r * np.sin(theta[caps])
    pts[caps, 2] = np.where(uv[caps, 1] < 0.5, 0.0, height)
    return center + pts


def _sample_box(rng: Rng, count: int) -> np.ndarray:
    # wide and flat-faced: planar patches with edges, mid z band
    center = np.array([*rng.uniform((2,), -0.6, 0.6), 0.0])
    half = np.concatenate([rng.uniform((2,), 0.15, 0.3),
                           rng.uniform((1,), 0.12, 0.22)])
    center[2] = half[2]  # rests on the floor
    # choose faces proportionally to their area
    areas = np.array([half[1] * half[2], half[1] * half[2],
                      half[0] * half[2], half[0] * half[2],
                      half[0] * half[1], half[0] * half[1]])
    cum = np.cumsum(areas) / areas.sum()
    faces = np.searchsorted(cum, rng.uniform((count,)))
    uv = rng.uniform((count, 2), -1.0, 1.0)
    pts = np.empty((count, 3))
    for f in range(6):
        m = faces == f
        axis = f // 2
        sign = 1.0 if f % 2 == 0 else -1.0
        others = [a for a in range(3) if a != axis]
        pts[m, axis] = sign * half[axis]
        pts[m, others[0]] = uv[m, 0] * half[others[0]]
        pts[m, others[1]] = uv[m, 1] * half[others[1]]
    return center + pts


_OBJECT_SAMPLERS = (_sample_sphere, _sample_box, _sample_cylinder)


def _scene_geometry(rng: Rng, budgets: np.ndarray) -> tuple:
    """Primitive surfaces with disjoint class ids; class 0 is the floor.

    Object classes cycle through geometrically distinct primitives so a
    per-point model can tell the classes apart.
    """
    coords, labels = [], []
    for cls, count in enumerate(budgets):
        child = rng.derive("primitive", cls)
        if cls == 0:
            pts = _sample_floor(child, int(count))
        else:
            sampler = _OBJECT_SAMPLERS[(cls - 1) % len(_OBJECT_SAMPLERS)]
            pts = sampler(child, int(count))
        coords.append(pts)
        labels.append(np.full(int(count), cls, dtype=np.int64))
    return np.concatenate(coords), np.concatenate(labels)


def gen_segmentation_scene(cfg: SceneConfig, rng: Rng) -> PointCloud:
    """Labeled scene with coordinate noise and label flips."""
    geo = rng.derive("geometry")
    budgets = class_budgets(cfg.n_points, cfg.num_classes)
    coords, labels = _scene_geometry(geo, budgets)
    if cfg.noise_sigma > 0:
        coords = coords + geo.derive("noise").normal(coords.shape) * cfg.noise_sigma

    # the flip stream is consumed identically for every noise rate, so a
    # zero-noise twin reproduces geometry and pre-flip labels exactly
    flip_rng = rng.derive("labels")
    flip = flip_rng.uniform((cfg.n_points,)) < cfg.label_noise
    shift = 1 + flip_rng.integers(cfg.num_classes - 1, size=cfg.n_points)
    labels = np.where(flip, (labels + shift) % cfg.num_classes, labels)
    return PointCloud(coords, labels=labels)


def flipped_label_mask(cfg: SceneConfig, rng_seed_keys: tuple) -> np.ndarray:
    """Which points of a generated scene carry flipped labels.

    `rng_seed_keys` are the derivation keys that produced the scene's rng
    from Rng(cfg.seed); the mask is recovered by diffing against a
    zero-label-noise twin.
    """
    noisy = gen_segmentation_scene(cfg, Rng(cfg.seed).derive(*rng_seed_keys))
    clean_cfg = replace(cfg, label_noise=0.0)
    clean = gen_segmentation_scene(clean_cfg, Rng(cfg.seed).derive(*rng_seed_keys))
    return noisy.labels != clean.labels


def _yaw_rotation(angle_rad: float) -> np.ndarray:
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def gen_matching_pair(cfg: PairConfig, rng: Rng) -> tuple:
    """(cloud_i, cloud_j, ground-truth transform).

    cloud_j = crop(scale * R * cloud_i + t) + jitter, with R a yaw
    rotation (scenes are gravity-aligned). The returned transform maps
    cloud_i coordinates onto pre-jitter cloud_j coordinates exactly.
    """
    geo = rng.derive("geometry")
    # floor plus one of each primitive type: no two objects of a scene share
    # a shape, which keeps rotation-marginalized matching unambiguous
    budgets = class_budgets(cfg.n_points, 1 + len(_OBJECT_SAMPLERS))
    coords, _ = _scene_geometry(geo, budgets)
    cloud_i = PointCloud(coords)

    tf_rng = rng.derive("transform")
    angle = np.deg2rad(float(tf_rng.uniform(None, 0.0, cfg.rotation_max_deg))) \
        if cfg.rotation_max_deg > 0 else 0.0
    scale = float(tf_rng.uniform(None, *cfg.scale_range))
    translation = (tf_rng.uniform((3,), -1.0, 1.0) * cfg.translation_max
                   if cfg.translation_max > 0 else np.zeros(3))
    transform = RigidTransform(_yaw_rotation(angle), translation, scale)

    moved = transform.apply(coords)
    keep = np.arange(moved.shape[0])
    if cfg.overlap < 1.0:
        crop_rng = rng.derive("crop")
        direction = crop_rng.normal((3,))
        direction /= np.linalg.norm(direction)
        proj = moved @ direction
        n_keep = int(np.ceil(cfg.overlap * moved.shape[0]))
        keep = np.lexsort((np.arange(proj.size), proj))[:n_keep]
        keep = np.sort(keep)
    cropped = moved[keep]
    if cfg.jitter_sigma > 0:
        cropped = cropped + rng.derive("jitter").normal(cropped.shape) * cfg.jitter_sigma
    return cloud_i, PointCloud(cropped), transform
