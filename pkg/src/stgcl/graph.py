"""Skeleton topology, spatial adjacency partitions, and ST-graph splitting.

The spatial neighborhood of every joint is split three ways: the joint
itself (root), neighbors closer to the skeleton center (centripetal), and
the remaining neighbors (centrifugal).  Each partition gets a symmetric
degree normalization with a small additive constant so empty rows stay
finite.

`partition_stgraph` cuts an encoded feature graph into contiguous temporal
blocks or anatomical joint groups; both are plain edge cuts that keep every
vertex exactly once.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, getitem, index_select
from .errors import ContractViolation


@dataclass(frozen=True)
class SkeletonTopology:
    """Joint count, undirected bone edges, center joint, and body-part groups."""

    num_joints: int
    edges: tuple[tuple[int, int], ...]
    center_joint: int
    body_part_groups: tuple[tuple[int, ...], ...] = ()

    def __post_init__(self):
        m = self.num_joints
        for i, j in self.edges:
            if not (0 <= i < m and 0 <= j < m) or i == j:
                raise ContractViolation(f"edge ({i},{j}) invalid for {m} joints")
        if not 0 <= self.center_joint < m:
            raise ContractViolation("center joint out of range")
        if self.body_part_groups:
            flat = sorted(j for grp in self.body_part_groups for j in grp)
            if flat != list(range(m)):
                raise ContractViolation("body part groups must partition the joint set")

    def neighbor_lists(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.num_joints)]
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        return adj

    def hop_distances_from_center(self) -> np.ndarray:
        """BFS hop distance of every joint to the center joint."""
        adj = self.neighbor_lists()
        dist = np.full(self.num_joints, -1, dtype=np.int64)
        dist[self.center_joint] = 0
        queue = deque([self.center_joint])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if dist[v] < 0:
                    dist[v] = dist[u] + 1
                    queue.append(v)
        if self.num_joints > 1 and (dist < 0).any():
            raise ContractViolation("skeleton graph is disconnected")
        return dist


def ntu25_topology() -> SkeletonTopology:
    """25-joint skeleton tree in the common Kinect-v2 joint order."""
    edges = (
        (0, 1), (1, 20), (2, 20), (3, 2),
        (4, 20), (5, 4), (6, 5), (7, 6), (21, 22), (22, 7),
        (8, 20), (9, 8), (10, 9), (11, 10), (23, 24), (24, 11),
        (12, 0), (13, 12), (14, 13), (15, 14),
        (16, 0), (17, 16), (18, 17), (19, 18),
    )
    groups = (
        (0, 1, 2, 3, 20),              # trunk + head
        (4, 5, 6, 7, 21, 22),          # left arm
        (8, 9, 10, 11, 23, 24),        # right arm
        (12, 13, 14, 15),              # left leg
        (16, 17, 18, 19),              # right leg
    )
    return SkeletonTopology(num_joints=25, edges=edges, center_joint=20,
                            body_part_groups=groups)


@dataclass(frozen=True)
class SpatialPartitions:
    """Root/centripetal/centrifugal adjacency and their normalized forms."""

    root: np.ndarray
    centripetal: np.ndarray
    centrifugal: np.ndarray
    normalized: tuple[np.ndarray, np.ndarray, np.ndarray]
    alpha: float

    @property
    def matrices(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.root, self.centripetal, self.centrifugal


def normalize_adjacency(adjacency: np.ndarray, alpha: float) -> np.ndarray:
    """Symmetric degree normalization D^(-1/2) A D^(-1/2), D_ii = rowsum + alpha."""
    adjacency = np.asarray(adjacency, dtype=np.float64)
    if alpha <= 0:
        raise ContractViolation("alpha must be positive")
    if (adjacency < 0).any():
        raise ContractViolation("adjacency entries must be nonnegative")
    inv_sqrt = 1.0 / np.sqrt(adjacency.sum(axis=1) + alpha)
    return adjacency * np.outer(inv_sqrt, inv_sqrt)


def build_partitions(topology: SkeletonTopology, alpha: float = 0.001) -> SpatialPartitions:
    """Three-way spatial partition of the bone adjacency.

    A directed neighbor pair (i, j) is centripetal when j is strictly closer
    to the center than i, centrifugal otherwise (ties go centrifugal).
    """
    m = topology.num_joints
    dist = topology.hop_distances_from_center()
    root = np.eye(m)
    centripetal = np.zeros((m, m))
    centrifugal = np.zeros((m, m))
    for i, j in topology.edges:
        for a, b in ((i, j), (j, i)):
            if dist[b] < dist[a]:
                centripetal[a, b] = 1.0
            else:
                centrifugal[a, b] = 1.0
    normalized = tuple(normalize_adjacency(p, alpha) for p in (root, centripetal, centrifugal))
    return SpatialPartitions(root=root, centripetal=centripetal, centrifugal=centrifugal,
                             normalized=normalized, alpha=alpha)


@dataclass
class STGraphFeature:
    """Encoded feature values (frames x joints x channels) plus provenance."""

    values: Tensor
    topology: SkeletonTopology
    frame_stride: int = 1
    subgraph_index: int | None = None

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def num_joints(self) -> int:
        return self.values.shape[1]

    @property
    def num_channels(self) -> int:
        return self.values.shape[2]


def temporal_blocks(num_frames: int, num_subgraphs: int) -> list[tuple[int, int]]:
    """Contiguous (start, stop) frame blocks; the first (T mod S) blocks get one extra frame."""
    if num_subgraphs < 1 or num_subgraphs > num_frames:
        raise ContractViolation(
            f"cannot split {num_frames} frames into {num_subgraphs} blocks")
    base, rem = divmod(num_frames, num_subgraphs)
    blocks = []
    start = 0
    for s in range(num_subgraphs):
        size = base + (1 if s < rem else 0)
        blocks.append((start, start + size))
        start += size
    return blocks


def spatial_groups(topology: SkeletonTopology, num_subgraphs: int) -> list[np.ndarray]:
    """Joint index groups: declared body parts, or even index ranges as fallback."""
    m = topology.num_joints
    if topology.body_part_groups:
        if num_subgraphs != len(topology.body_part_groups):
            raise ContractViolation(
                f"spatial split needs S == {len(topology.body_part_groups)} "
                f"declared body part groups, got S={num_subgraphs}")
        return [np.asarray(g, dtype=np.intp) for g in topology.body_part_groups]
    return [np.arange(start, stop, dtype=np.intp)
            for start, stop in temporal_blocks(m, num_subgraphs)]


def partition_stgraph(feature: STGraphFeature, axis: str, num_subgraphs: int) -> list[STGraphFeature]:
    """Split a feature graph into S subgraphs along 'temporal' or 'spatial'."""
    if axis == "temporal":
        blocks = temporal_blocks(feature.num_frames, num_subgraphs)
        return [
            STGraphFeature(values=getitem(feature.values, slice(start, stop)),
                           topology=feature.topology,
                           frame_stride=feature.frame_stride,
                           subgraph_index=s)
            for s, (start, stop) in enumerate(blocks)
        ]
    if axis == "spatial":
        groups = spatial_groups(feature.topology, num_subgraphs)
        return [
            STGraphFeature(values=index_select(feature.values, 1, grp),
                           topology=feature.topology,
                           frame_stride=feature.frame_stride,
                           subgraph_index=s)
            for s, grp in enumerate(groups)
        ]
    raise ContractViolation(f"axis must be 'temporal' or 'spatial', got {axis!r}")
