"""Graph-convolutional encoder, projection heads, and checkpoint I/O.

The encoder is a stack of blocks, each a three-partition spatial graph
convolution followed by a per-joint temporal 1-D convolution (odd kernel,
symmetric zero padding, optional stride) and a ReLU.  Per-block bias is the
only normalization parameter; there is no batch norm, which keeps small
deterministic batches exactly reproducible.

Checkpoints are a single binary container: magic ``STGC``, a u32 format
version, then for each named entry a u16 name length, the utf-8 name, a u8
rank, u32 extents, and the row-major little-endian float64 payload.
Everything (parameters, structural metadata, optimizer buffers, rng state)
is stored as named float64 tensors, so round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, matmul, record_op, relu, reshape, transpose
from .errors import ContractViolation, DataError
from .graph import (SkeletonTopology, SpatialPartitions, STGraphFeature,
                    build_partitions)
from .rng import SplitMix64

CHECKPOINT_MAGIC = b"STGC"
CHECKPOINT_VERSION = 1

DEFAULT_BLOCKS = ((3, 64, 1), (64, 64, 1), (64, 128, 2), (128, 256, 2))


@dataclass(frozen=True)
class EncoderConfig:
    """Block channel plan (in, out, temporal stride) plus kernel width.

    `center_input` makes the encoder subtract each sequence's mean coordinate
    (per channel, over frames and joints) before the first block.  Without
    batch normalization the shared skeleton offset otherwise dominates every
    pooled feature and pins all cosine similarities near 1.
    """

    blocks: tuple[tuple[int, int, int], ...] = DEFAULT_BLOCKS
    temporal_kernel: int = 9
    output_dim: int = 256
    center_input: bool = True

    def __post_init__(self):
        if not self.blocks:
            raise ContractViolation("encoder needs at least one block")
        if self.temporal_kernel % 2 == 0 or self.temporal_kernel < 1:
            raise ContractViolation("temporal kernel must be a positive odd integer")
        prev_out = None
        for cin, cout, stride in self.blocks:
            if cin < 1 or cout < 1 or stride < 1:
                raise ContractViolation("block extents must be positive")
            if prev_out is not None and cin != prev_out:
                raise ContractViolation("block channel chain is inconsistent")
            prev_out = cout
        if prev_out != self.output_dim:
            raise ContractViolation(
                f"final block emits {prev_out} channels, expected {self.output_dim}")

    @property
    def in_channels(self) -> int:
        return self.blocks[0][0]

    @property
    def total_stride(self) -> int:
        s = 1
        for _, _, stride in self.blocks:
            s *= stride
        return s


@dataclass
class ProjectionHead:
    """Two-layer MLP: W2 @ relu(W1 @ x + b1) + b2."""

    w1: Tensor  # (hidden, in)
    b1: Tensor  # (hidden,)
    w2: Tensor  # (out, hidden)
    b2: Tensor  # (out,)

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[0]


@dataclass
class BlockParams:
    spatial_weights: list[Tensor]  # one (Cin, Cout) matrix per partition
    temporal_weight: Tensor        # (K, Cout, Cout)
    bias: Tensor                   # (Cout,)


@dataclass
class EncoderState:
    """All learnable state: encoder blocks, optional heads, loss weights."""

    config: EncoderConfig
    topology: SkeletonTopology
    partitions: SpatialPartitions
    blocks: list[BlockParams]
    head_global: ProjectionHead | None = None
    head_local: ProjectionHead | None = None
    log_sigma_sq: dict[str, Tensor] = field(default_factory=dict)

    def named_parameters(self) -> dict[str, Tensor]:
        """Deterministically ordered learnable parameters."""
        named: dict[str, Tensor] = {}
        for i, blk in enumerate(self.blocks):
            for p, w in enumerate(blk.spatial_weights):
                named[f"block{i}/spatial_w{p}"] = w
            named[f"block{i}/temporal_w"] = blk.temporal_weight
            named[f"block{i}/bias"] = blk.bias
        for tag, head in (("head_global", self.head_global), ("head_local", self.head_local)):
            if head is not None:
                named[f"{tag}/w1"] = head.w1
                named[f"{tag}/b1"] = head.b1
                named[f"{tag}/w2"] = head.w2
                named[f"{tag}/b2"] = head.b2
        for term in sorted(self.log_sigma_sq):
            named[f"sigma/{term}"] = self.log_sigma_sq[term]
        return named

    def without_heads(self) -> "EncoderState":
        return EncoderState(config=self.config, topology=self.topology,
                            partitions=self.partitions, blocks=self.blocks)


def _glorot(rng: SplitMix64, shape: tuple[int, ...], fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform_range(-limit, limit, shape), requires_grad=True)


def init_projection_head(rng: SplitMix64, in_dim: int, hidden_dim: int,
                         out_dim: int) -> ProjectionHead:
    return ProjectionHead(
        w1=_glorot(rng.derive("w1"), (hidden_dim, in_dim), in_dim, hidden_dim),
        b1=Tensor(np.zeros(hidden_dim), requires_grad=True),
        w2=_glorot(rng.derive("w2"), (out_dim, hidden_dim), hidden_dim, out_dim),
        b2=Tensor(np.zeros(out_dim), requires_grad=True),
    )


def init_encoder_state(config: EncoderConfig, topology: SkeletonTopology,
                       rng: SplitMix64, alpha: float = 0.001,
                       proj_hidden: int = 256, proj_out: int = 512,
                       loss_terms: tuple[str, ...] = (),
                       with_heads: bool = True) -> EncoderState:
    partitions = build_partitions(topology, alpha)
    blocks = []
    k = config.temporal_kernel
    for i, (cin, cout, _) in enumerate(config.blocks):
        brng = rng.derive("block", i)
        spatial = [_glorot(brng.derive("spatial", p), (cin, cout), cin, cout)
                   for p in range(3)]
        temporal = _glorot(brng.derive("temporal"), (k, cout, cout), k * cout, k * cout)
        bias = Tensor(np.zeros(cout), requires_grad=True)
        blocks.append(BlockParams(spatial_weights=spatial, temporal_weight=temporal,
                                  bias=bias))
    state = EncoderState(config=config, topology=topology, partitions=partitions,
                         blocks=blocks)
    if with_heads:
        d = config.output_dim
        state.head_global = init_projection_head(rng.derive("head_global"), d,
                                                 proj_hidden, proj_out)
        state.head_local = init_projection_head(rng.derive("head_local"), d,
                                                proj_hidden, proj_out)
        state.log_sigma_sq = {term: Tensor(np.zeros(()), requires_grad=True)
                              for term in loss_terms}
    return state


# ---------------------------------------------------------------------------
# forward operations
# ---------------------------------------------------------------------------

def spatial_gcn_forward(features: Tensor, partitions: SpatialPartitions,
                        weights: list[Tensor]) -> Tensor:
    """Sum over partitions of A_norm @ F @ W, applied frame by frame.

    `features` is (..., M, C); leading axes (batch, time) broadcast through.
    """
    if len(weights) != len(partitions.normalized):
        raise ContractViolation("one weight matrix per partition required")
    out = None
    for a_norm, w in zip(partitions.normalized, weights):
        if w.shape[0] != features.shape[-1]:
            raise ContractViolation(
                f"weight expects {w.shape[0]} channels, feature has {features.shape[-1]}")
        term = matmul(matmul(Tensor(a_norm), features), w)
        out = term if out is None else out + term
    return out


def temporal_conv_forward(features: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """Per-joint 1-D convolution along time; joints never mix.

    `features` is (T, M, C) or batched (B, T, M, C); `kernel` is (K, C, C').
    Symmetric zero padding of (K-1)//2 gives T' = ceil(T / stride).
    """
    single = features.ndim == 3
    x = reshape(features, (1,) + features.shape) if single else features
    out = _temporal_conv_batched(x, kernel, stride)
    return reshape(out, out.shape[1:]) if single else out


def _temporal_conv_batched(x: Tensor, w: Tensor, stride: int) -> Tensor:
    if x.ndim != 4 or w.ndim != 3:
        raise ContractViolation("expected (B, T, M, C) input and (K, C, C') kernel")
    b, t, m, c = x.shape
    k, cin, cout = w.shape
    if k % 2 == 0:
        raise ContractViolation("temporal kernel must be odd")
    if cin != c:
        raise ContractViolation(f"kernel expects {cin} channels, input has {c}")
    if stride < 1:
        raise ContractViolation("stride must be >= 1")
    pad = (k - 1) // 2
    padded_t = t + 2 * pad
    if k > padded_t:
        raise ContractViolation("kernel larger than padded sequence")
    t_out = (t - 1) // stride + 1  # == ceil(t / stride)
    reach = (t_out - 1) * stride + 1

    padded = np.zeros((b, padded_t, m, c))
    padded[:, pad:pad + t] = x.data
    wd = w.data
    out = np.zeros((b, t_out, m, cout))
    for tap in range(k):
        out += np.matmul(padded[:, tap:tap + reach:stride], wd[tap])

    def backward(g):
        gw = np.zeros_like(wd)
        gp = np.zeros_like(padded)
        for tap in range(k):
            window = padded[:, tap:tap + reach:stride]
            gw[tap] = np.ascontiguousarray(window).reshape(-1, c).T @ g.reshape(-1, cout)
            gp[:, tap:tap + reach:stride] += np.matmul(g, wd[tap].T)
        return gp[:, pad:pad + t], gw

    return record_op(out, (x, w), backward, "temporal_conv")


def encode_batch(x: Tensor, state: EncoderState) -> Tensor:
    """Run the block stack on (B, T, M, C_in); returns (B, T', M, C_out)."""
    if x.shape[-1] != state.config.in_channels:
        raise ContractViolation(
            f"encoder expects {state.config.in_channels} input channels")
    if x.shape[-2] != state.topology.num_joints:
        raise ContractViolation("input joint count does not match topology")
    h = x
    if state.config.center_input:
        h = h - h.mean(axis=(1, 2), keepdims=True)
    for blk, (_, _, stride) in zip(state.blocks, state.config.blocks):
        h = spatial_gcn_forward(h, state.partitions, blk.spatial_weights)
        h = temporal_conv_forward(h, blk.temporal_weight, stride)
        h = relu(h + blk.bias)
    return h


def encode(seq, state: EncoderState) -> STGraphFeature:
    """Encode one skeleton sequence into an ST-graph feature."""
    coords = seq.coords
    batched = reshape(coords, (1,) + coords.shape)
    h = encode_batch(batched, state)
    return STGraphFeature(values=reshape(h, h.shape[1:]), topology=state.topology,
                          frame_stride=state.config.total_stride)


def global_pool(feature) -> Tensor:
    """Mean over every (frame, joint) vertex, per channel."""
    values = feature.values if isinstance(feature, STGraphFeature) else feature
    return values.mean(axis=tuple(range(values.ndim - 1)))


def pool_batch(h: Tensor) -> Tensor:
    """Mean over (frame, joint) for a batched (B, T, M, C) feature."""
    return h.mean(axis=(1, 2))


def project(head: ProjectionHead, pooled: Tensor) -> Tensor:
    """Apply the projection MLP to a (D,) vector or (B, D) batch."""
    single = pooled.ndim == 1
    x = reshape(pooled, (1, -1)) if single else pooled
    if x.shape[1] != head.in_dim:
        raise ContractViolation(
            f"projection head expects {head.in_dim} inputs, got {x.shape[1]}")
    hidden = relu(matmul(x, transpose(head.w1)) + head.b1)
    out = matmul(hidden, transpose(head.w2)) + head.b2
    return reshape(out, (head.out_dim,)) if single else out


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def checkpoint_write(path, entries: dict[str, np.ndarray]) -> None:
    """Write named float64 tensors; order is preserved."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, arr in entries.items():
            arr = np.asarray(arr, dtype=np.float64)  # 0-d rank preserved
            name_bytes = name.encode("utf-8")
            if len(name_bytes) > 0xFFFF:
                raise ContractViolation(f"entry name too long: {name!r}")
            if arr.ndim > 0xFF:
                raise ContractViolation("tensor rank exceeds format limit")
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<B", arr.ndim))
            for extent in arr.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(arr.astype("<f8").tobytes())


def checkpoint_read(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    entries: dict[str, np.ndarray] = {}
    offset = 8
    total = len(blob)
    while offset < total:
        try:
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            shape = struct.unpack_from(f"<{rank}I", blob, offset) if rank else ()
            offset += 4 * rank
            count = int(np.prod(shape)) if shape else 1
            payload = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
            offset += 8 * count
        except (struct.error, ValueError) as exc:
            raise DataError(f"{path}: truncated checkpoint near entry {len(entries)}") from exc
        if payload.size != count:
            raise DataError(f"{path}: truncated payload for entry {name!r}")
        entries[name] = payload.reshape(shape).astype(np.float64)
    return entries


def _topology_entries(topology: SkeletonTopology) -> dict[str, np.ndarray]:
    groups = topology.body_part_groups
    if groups:
        width = max(len(g) for g in groups)
        padded = np.full((len(groups), width), -1.0)
        for i, g in enumerate(groups):
            padded[i, :len(g)] = g
    else:
        padded = np.zeros((0, 0))
    return {
        "meta/num_joints": np.array(float(topology.num_joints)),
        "meta/center_joint": np.array(float(topology.center_joint)),
        "meta/edges": np.asarray(topology.edges, dtype=np.float64),
        "meta/body_part_groups": padded,
    }


def _topology_from_entries(entries: dict[str, np.ndarray]) -> SkeletonTopology:
    groups_arr = entries["meta/body_part_groups"]
    groups = tuple(
        tuple(int(j) for j in row if j >= 0) for row in groups_arr
    ) if groups_arr.size else ()
    edges = tuple((int(i), int(j)) for i, j in entries["meta/edges"])
    return SkeletonTopology(
        num_joints=int(entries["meta/num_joints"]),
        edges=edges,
        center_joint=int(entries["meta/center_joint"]),
        body_part_groups=groups,
    )


def encoder_entries(state: EncoderState) -> dict[str, np.ndarray]:
    """Serializable view of the encoder: metadata first, then parameters."""
    entries = {
        "meta/blocks": np.asarray(state.config.blocks, dtype=np.float64),
        "meta/temporal_kernel": np.array(float(state.config.temporal_kernel)),
        "meta/center_input": np.array(1.0 if state.config.center_input else 0.0),
        "meta/alpha": np.array(state.partitions.alpha),
    }
    entries.update(_topology_entries(state.topology))
    for name, param in state.named_parameters().items():
        entries[name] = param.data
    return entries


def encoder_from_entries(entries: dict[str, np.ndarray]) -> EncoderState:
    """Rebuild an encoder (heads included when present) from named entries."""
    blocks_spec = tuple(tuple(int(v) for v in row) for row in entries["meta/blocks"])
    config = EncoderConfig(blocks=blocks_spec,
                           temporal_kernel=int(entries["meta/temporal_kernel"]),
                           output_dim=blocks_spec[-1][1],
                           center_input=bool(entries.get("meta/center_input", 1.0)))
    topology = _topology_from_entries(entries)
    partitions = build_partitions(topology, float(entries["meta/alpha"]))

    def param(name):
        if name not in entries:
            raise DataError(f"checkpoint missing parameter {name!r}")
        return Tensor(entries[name].copy(), requires_grad=True)

    blocks = []
    for i in range(len(blocks_spec)):
        blocks.append(BlockParams(
            spatial_weights=[param(f"block{i}/spatial_w{p}") for p in range(3)],
            temporal_weight=param(f"block{i}/temporal_w"),
            bias=param(f"block{i}/bias"),
        ))
    state = EncoderState(config=config, topology=topology, partitions=partitions,
                         blocks=blocks)
    for tag in ("head_global", "head_local"):
        if f"{tag}/w1" in entries:
            head = ProjectionHead(w1=param(f"{tag}/w1"), b1=param(f"{tag}/b1"),
                                  w2=param(f"{tag}/w2"), b2=param(f"{tag}/b2"))
            setattr(state, tag, head)
    state.log_sigma_sq = {
        name.split("/", 1)[1]: param(name)
        for name in entries if name.startswith("sigma/")
    }
    return state


def save_encoder(path, state: EncoderState) -> None:
    checkpoint_write(path, encoder_entries(state))


def load_encoder(path) -> EncoderState:
    return encoder_from_entries(checkpoint_read(path))
