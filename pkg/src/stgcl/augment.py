"""Stochastic skeleton-sequence augmentations.

All augmentations are pure functions of (sequence, config, rng): with the
same generator state they are bit-reproducible.  Multi-view training hands
each view its own derived rng so draws are independent across views.

Coordinate transforms use the row-vector convention: a joint position is a
row vector and transforms as ``row @ M``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Tensor
from .errors import ContractViolation
from .graph import SkeletonTopology
from .rng import SplitMix64

AUGMENTATION_KINDS = ("none", "temporal_subgraph", "node_drop", "node_perturb",
                      "view_rotate", "shear")


@dataclass(frozen=True)
class AugmentationConfig:
    kind: str = "temporal_subgraph"
    crop_len: int = 95
    target_len: int = 100
    drop_apply_prob: float = 0.5
    drop_frac: float = 0.1
    perturb_sigma: float = 0.05
    rotate_range_deg: float = 17.0
    shear_lo: float = 0.01
    shear_hi: float = 0.1

    def __post_init__(self):
        if self.kind not in AUGMENTATION_KINDS:
            raise ContractViolation(f"unknown augmentation kind {self.kind!r}")
        if not 0 < self.crop_len <= self.target_len:
            raise ContractViolation("need 0 < crop_len <= target_len")
        if not 0.0 <= self.drop_apply_prob <= 1.0 or not 0.0 <= self.drop_frac <= 1.0:
            raise ContractViolation("probabilities must lie in [0, 1]")
        if self.shear_lo > self.shear_hi:
            raise ContractViolation("need shear_lo <= shear_hi")


@dataclass
class SkeletonSequence:
    """One view's joint coordinates over time, shape (T, M, 3)."""

    coords: Tensor
    topology: SkeletonTopology

    def __post_init__(self):
        shape = self.coords.shape
        if len(shape) != 3 or shape[2] != 3:
            raise ContractViolation(f"coords must be (T, M, 3), got {shape}")
        if shape[0] < 2:
            raise ContractViolation("sequences need at least 2 frames")
        if shape[1] != self.topology.num_joints:
            raise ContractViolation("joint count does not match topology")
        if not np.all(np.isfinite(self.coords.data)):
            raise ContractViolation("coordinates must be finite")

    @property
    def num_frames(self) -> int:
        return self.coords.shape[0]

    def with_coords(self, coords: np.ndarray) -> "SkeletonSequence":
        return SkeletonSequence(coords=Tensor(coords), topology=self.topology)


def linear_interpolate_time(seq: SkeletonSequence, new_len: int) -> SkeletonSequence:
    """Piecewise-linear temporal resampling; endpoints map to endpoints."""
    if new_len < 2:
        raise ContractViolation("new_len must be >= 2")
    src = seq.coords.data
    out = resample_array(src, new_len)
    return seq.with_coords(out)


def resample_array(src: np.ndarray, new_len: int) -> np.ndarray:
    """Resample axis 0 of (T, ...) to new_len by linear interpolation."""
    old_len = src.shape[0]
    if old_len < 2:
        raise ContractViolation("need at least 2 frames to interpolate")
    pos = np.linspace(0.0, old_len - 1.0, new_len)
    i0 = pos.astype(np.intp)
    i1 = np.minimum(i0 + 1, old_len - 1)
    w = (pos - i0).reshape((new_len,) + (1,) * (src.ndim - 1))
    a = src[i0]
    b = src[i1]
    # a + w*(b-a): integer positions (w == 0) and constant sequences pass
    # through bit-exactly, so same-length resampling is the identity
    return a + w * (b - a)


def temporal_subgraph(seq: SkeletonSequence, cfg: AugmentationConfig,
                      rng: SplitMix64) -> SkeletonSequence:
    """Crop a random run of crop_len frames, stretch back to target_len."""
    if seq.num_frames != cfg.target_len:
        raise ContractViolation(
            f"expected {cfg.target_len} frames, got {seq.num_frames}")
    offset = rng.below(cfg.target_len - cfg.crop_len + 1)
    cropped = seq.coords.data[offset:offset + cfg.crop_len]
    return seq.with_coords(resample_array(cropped, cfg.target_len))


def node_drop(seq: SkeletonSequence, cfg: AugmentationConfig,
              rng: SplitMix64) -> SkeletonSequence:
    """Zero a random fraction of (frame, joint) vertices, half the time."""
    if rng.uniform() >= cfg.drop_apply_prob:
        return seq
    t, m, _ = seq.coords.shape
    count = int(cfg.drop_frac * t * m)
    if count == 0:
        return seq
    picked = rng.choice_without_replacement(t * m, count)
    out = seq.coords.data.copy()
    out.reshape(t * m, 3)[picked] = 0.0
    return seq.with_coords(out)


def node_perturb(seq: SkeletonSequence, cfg: AugmentationConfig,
                 rng: SplitMix64) -> SkeletonSequence:
    """Add i.i.d. zero-mean Gaussian noise to every coordinate."""
    if cfg.perturb_sigma == 0.0:
        return seq
    noise = rng.normal(seq.coords.shape, sigma=cfg.perturb_sigma)
    return seq.with_coords(seq.coords.data + noise)


def rotation_matrix(alpha: float, beta: float, gamma: float) -> np.ndarray:
    """Composed rotation R_X(alpha) @ R_Y(beta) @ R_Z(gamma)."""
    ca, sa = math.cos(alpha), math.sin(alpha)
    cb, sb = math.cos(beta), math.sin(beta)
    cg, sg = math.cos(gamma), math.sin(gamma)
    rx = np.array([[1.0, 0.0, 0.0],
                   [0.0, ca, sa],
                   [0.0, -sa, ca]])
    ry = np.array([[cb, 0.0, -sb],
                   [0.0, 1.0, 0.0],
                   [sb, 0.0, cb]])
    rz = np.array([[cg, sg, 0.0],
                   [-sg, cg, 0.0],
                   [0.0, 0.0, 1.0]])
    return rx @ ry @ rz


def view_rotate(seq: SkeletonSequence, cfg: AugmentationConfig,
                rng: SplitMix64) -> SkeletonSequence:
    """Rotate the whole sequence by one random rotation (angles per axis)."""
    limit = math.radians(cfg.rotate_range_deg)
    alpha = rng.uniform_range(-limit, limit)
    beta = rng.uniform_range(-limit, limit)
    gamma = rng.uniform_range(-limit, limit)
    rot = rotation_matrix(alpha, beta, gamma)
    return seq.with_coords(seq.coords.data @ rot)


def shear_matrix(factors) -> np.ndarray:
    """Unit-diagonal shear with off-diagonal factors in row-major order."""
    sxy, sxz, syx, syz, szx, szy = factors
    return np.array([[1.0, sxy, sxz],
                     [syx, 1.0, syz],
                     [szx, szy, 1.0]])


def shear(seq: SkeletonSequence, cfg: AugmentationConfig,
          rng: SplitMix64) -> SkeletonSequence:
    """Slant the skeleton with six random shear factors (drawn once)."""
    factors = [rng.uniform_range(cfg.shear_lo, cfg.shear_hi) for _ in range(6)]
    return seq.with_coords(seq.coords.data @ shear_matrix(factors))


_DISPATCH = {
    "temporal_subgraph": temporal_subgraph,
    "node_drop": node_drop,
    "node_perturb": node_perturb,
    "view_rotate": view_rotate,
    "shear": shear,
}


def apply_augmentation(seq: SkeletonSequence, cfg: AugmentationConfig,
                       rng: SplitMix64) -> SkeletonSequence:
    if cfg.kind == "none":
        return seq
    return _DISPATCH[cfg.kind](seq, cfg, rng)
