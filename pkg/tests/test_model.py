import numpy as np
import pytest

from oracles import composite_grad_error, mlp_project, spatial_gcn, temporal_conv
from stgcl.augment import SkeletonSequence
from stgcl.autodiff import Tape, Tensor, grad_check
from stgcl.errors import ContractViolation, DataError
from stgcl.graph import (SkeletonTopology, SpatialPartitions, build_partitions,
                         normalize_adjacency, ntu25_topology)
from stgcl.model import (EncoderConfig, ProjectionHead, checkpoint_read,
                         checkpoint_write, encode, encode_batch,
                         encoder_entries, encoder_from_entries, global_pool,
                         init_encoder_state, load_encoder, pool_batch, project,
                         save_encoder, spatial_gcn_forward,
                         temporal_conv_forward)
from stgcl.rng import SplitMix64


def _identity_partitions(m):
    zero = np.zeros((m, m))
    return SpatialPartitions(root=np.eye(m), centripetal=zero, centrifugal=zero,
                             normalized=(np.eye(m), zero, zero), alpha=0.001)


def _chain_topology(m):
    return SkeletonTopology(num_joints=m, edges=tuple((i, i + 1) for i in range(m - 1)),
                            center_joint=0)


# --- spatial graph convolution ------------------------------------------------

def test_spatial_gcn_identity_operator():
    parts = _identity_partitions(4)
    x = Tensor(SplitMix64(1).normal((6, 4, 3)))
    weights = [Tensor(np.eye(3)), Tensor(np.zeros((3, 3))), Tensor(np.zeros((3, 3)))]
    out = spatial_gcn_forward(x, parts, weights)
    np.testing.assert_array_equal(out.data, x.data)


def test_spatial_gcn_single_joint_normalization():
    topo = SkeletonTopology(num_joints=1, edges=(), center_joint=0)
    parts = build_partitions(topo, alpha=0.001)
    x = Tensor(np.array([[[2.0, -3.0]]]))  # (T=1, M=1, C=2)
    w = SplitMix64(2).normal((2, 2))
    weights = [Tensor(w), Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 2)))]
    out = spatial_gcn_forward(x, parts, weights)
    expected = (1.0 / 1.001) * x.data[0] @ w
    np.testing.assert_allclose(out.data[0], expected, atol=1e-12)


def test_spatial_gcn_matches_triple_loop_oracle():
    rng = SplitMix64(3)
    topo = _chain_topology(3)
    parts = build_partitions(topo, alpha=0.001)
    features = rng.normal((3, 2))
    weights = [rng.normal((2, 2)) for _ in range(3)]
    out = spatial_gcn_forward(Tensor(features[None]), parts,
                              [Tensor(w) for w in weights])
    expected = spatial_gcn(parts.normalized, features, weights)
    np.testing.assert_allclose(out.data[0], expected, atol=1e-12)


def test_spatial_gcn_random_graphs_match_oracle():
    rng = SplitMix64(4)
    for m in (2, 4, 6):
        edges = tuple((i, i + 1) for i in range(m - 1))
        parts = build_partitions(SkeletonTopology(num_joints=m, edges=edges,
                                                  center_joint=m // 2), alpha=0.001)
        features = rng.normal((m, 3))
        weights = [rng.normal((3, 2)) for _ in range(3)]
        out = spatial_gcn_forward(Tensor(features[None]), parts,
                                  [Tensor(w) for w in weights])
        expected = spatial_gcn(parts.normalized, features, weights)
        np.testing.assert_allclose(out.data[0], expected, atol=1e-12)


def test_disconnected_components_permute_consistently():
    # two 2-joint components with hand-built partitions; swapping the
    # components permutes the convolution output rows identically
    cp = np.zeros((4, 4))
    cp[0, 1] = cp[2, 3] = 1.0
    cf = cp.T.copy()
    parts = SpatialPartitions(
        root=np.eye(4), centripetal=cp, centrifugal=cf,
        normalized=(normalize_adjacency(np.eye(4), 0.001),
                    normalize_adjacency(cp, 0.001),
                    normalize_adjacency(cf, 0.001)),
        alpha=0.001)
    rng = SplitMix64(5)
    x = rng.normal((1, 4, 3))
    weights = [Tensor(rng.normal((3, 3))) for _ in range(3)]
    perm = np.array([2, 3, 0, 1])
    out = spatial_gcn_forward(Tensor(x), parts, weights).data
    out_perm = spatial_gcn_forward(Tensor(x[:, perm]), parts, weights).data
    np.testing.assert_allclose(out_perm, out[:, perm], atol=1e-12)


# --- temporal convolution -------------------------------------------------------

def test_temporal_conv_delta_kernel_identity():
    c = 3
    kernel = np.zeros((3, c, c))
    kernel[1] = np.eye(c)
    x = Tensor(SplitMix64(6).normal((10, 4, c)))
    out = temporal_conv_forward(x, Tensor(kernel), stride=1)
    np.testing.assert_array_equal(out.data, x.data)


def test_temporal_conv_averaging_kernel_preserves_constant_interior():
    c = 2
    kernel = np.stack([np.eye(c) / 3.0] * 3)
    const = np.full((8, 3, c), 1.7)
    out = temporal_conv_forward(Tensor(const), Tensor(kernel), stride=1)
    np.testing.assert_allclose(out.data[1:-1], const[1:-1], atol=1e-12)


def test_temporal_conv_stride_halves_length():
    x = Tensor(np.zeros((100, 2, 3)))
    kernel = Tensor(np.zeros((9, 3, 5)))
    out = temporal_conv_forward(x, kernel, stride=2)
    assert out.shape == (50, 2, 5)
    assert temporal_conv_forward(Tensor(np.zeros((7, 2, 3))), kernel, stride=2).shape[0] == 4


def test_temporal_conv_matches_loop_oracle():
    rng = SplitMix64(7)
    for stride in (1, 2, 3):
        x = rng.normal((7, 3, 2))
        kernel = rng.normal((3, 2, 4))
        out = temporal_conv_forward(Tensor(x), Tensor(kernel), stride=stride)
        np.testing.assert_allclose(out.data, temporal_conv(x, kernel, stride),
                                   atol=1e-12)


def test_temporal_conv_gradients():
    rng = SplitMix64(8)
    x = Tensor(rng.normal((6, 2, 3)))
    kernel = Tensor(rng.normal((3, 3, 2)))
    weight = Tensor(rng.normal((3, 2, 2)))
    assert grad_check(
        lambda t: (temporal_conv_forward(t, kernel, 2) * weight).sum(), x) < 1e-4
    assert grad_check(
        lambda k: (temporal_conv_forward(x, k, 2) * weight).sum(), kernel) < 1e-4


def test_temporal_conv_rejects_even_kernel():
    with pytest.raises(ContractViolation):
        temporal_conv_forward(Tensor(np.zeros((5, 2, 3))),
                              Tensor(np.zeros((4, 3, 3))), 1)


# --- encoder ----------------------------------------------------------------

def _toy_state(seed=0, with_heads=False):
    config = EncoderConfig(blocks=((3, 4, 1), (4, 5, 2)), temporal_kernel=3,
                           output_dim=5)
    topo = _chain_topology(3)
    return init_encoder_state(config, topo, SplitMix64(seed), proj_hidden=4,
                              proj_out=4, loss_terms=("global", "temporal"),
                              with_heads=with_heads), config, topo


def test_encode_zero_input_zero_output():
    state, config, topo = _toy_state()
    x = SkeletonSequence(coords=Tensor(np.zeros((8, 3, 3))), topology=topo)
    feature = encode(x, state)
    assert not feature.values.data.any()
    assert feature.frame_stride == 2


def test_encode_default_config_shapes():
    topo = ntu25_topology()
    state = init_encoder_state(EncoderConfig(), topo, SplitMix64(9),
                               with_heads=False)
    x = SkeletonSequence(coords=Tensor(SplitMix64(10).normal((100, 25, 3))),
                         topology=topo)
    feature = encode(x, state)
    assert feature.values.shape == (25, 25, 256)
    pooled = global_pool(feature)
    assert pooled.shape == (256,)


def test_encode_finite_for_bounded_inputs():
    state, config, topo = _toy_state(seed=11)
    coords = SplitMix64(12).uniform_range(-10.0, 10.0, (20, 3, 3))
    out = encode(SkeletonSequence(coords=Tensor(coords), topology=topo), state)
    assert np.isfinite(out.values.data).all()


def test_encode_deterministic():
    state, config, topo = _toy_state(seed=13)
    coords = SplitMix64(14).normal((10, 3, 3))
    seq = SkeletonSequence(coords=Tensor(coords), topology=topo)
    a = encode(seq, state).values.data
    b = encode(seq, state).values.data
    assert a.tobytes() == b.tobytes()


def test_encode_equivariant_under_joint_relabeling():
    rng = SplitMix64(15)
    topo1 = _chain_topology(4)
    perm = np.array([2, 0, 3, 1])
    edges2 = tuple(sorted((int(perm[i]), int(perm[j])) for i, j in topo1.edges))
    topo2 = SkeletonTopology(num_joints=4, edges=edges2,
                             center_joint=int(perm[topo1.center_joint]))

    config = EncoderConfig(blocks=((3, 4, 1), (4, 4, 2)), temporal_kernel=3,
                           output_dim=4)
    state1 = init_encoder_state(config, topo1, SplitMix64(77), with_heads=False)
    state2 = init_encoder_state(config, topo2, SplitMix64(77), with_heads=False)
    # same weights, different topology-derived adjacency
    for b1, b2 in zip(state1.blocks, state2.blocks):
        for w1, w2 in zip(b1.spatial_weights, b2.spatial_weights):
            assert w1.data.tobytes() == w2.data.tobytes()

    x = rng.normal((1, 6, 4, 3))
    x_perm = np.empty_like(x)
    x_perm[:, :, perm] = x
    out1 = encode_batch(Tensor(x), state1).data
    out2 = encode_batch(Tensor(x_perm), state2).data
    expected = np.empty_like(out1)
    expected[:, :, perm] = out1
    np.testing.assert_allclose(out2, expected, atol=1e-12)


def test_encode_gradients_pass_on_toy_batch():
    state, config, topo = _toy_state(seed=16)
    coords = np.ascontiguousarray(SplitMix64(17).normal((1, 6, 3, 3)))

    def loss_fn():
        return pool_batch(encode_batch(Tensor(coords), state)).sum()

    err = composite_grad_error(loss_fn, state.named_parameters())
    assert err < 1e-3


# --- pooling and projection -----------------------------------------------------

def test_global_pool_constant_and_known_mean():
    from stgcl.graph import STGraphFeature
    topo = _chain_topology(2)
    const = STGraphFeature(values=Tensor(np.full((4, 2, 3), 2.5)), topology=topo)
    np.testing.assert_allclose(global_pool(const).data, [2.5, 2.5, 2.5], atol=1e-15)
    known = STGraphFeature(values=Tensor(np.array([[[1.0], [2.0]], [[3.0], [4.0]]])),
                           topology=topo)
    np.testing.assert_allclose(global_pool(known).data, [2.5], atol=1e-15)


def test_global_pool_permutation_invariant():
    from stgcl.graph import STGraphFeature
    topo = _chain_topology(5)
    values = SplitMix64(18).normal((6, 5, 4))
    base = global_pool(STGraphFeature(values=Tensor(values), topology=topo)).data
    shuffled = values[:, np.array([4, 2, 0, 1, 3])]
    out = global_pool(STGraphFeature(values=Tensor(shuffled), topology=topo)).data
    np.testing.assert_allclose(out, base, atol=1e-15)


def test_projection_identity_passthrough():
    head = ProjectionHead(w1=Tensor(np.eye(3)), b1=Tensor(np.zeros(3)),
                          w2=Tensor(np.eye(3)), b2=Tensor(np.zeros(3)))
    x = Tensor(np.array([0.5, 2.0, 0.0]))
    np.testing.assert_array_equal(project(head, x).data, x.data)
    zero = Tensor(np.zeros(3))
    assert not project(head, zero).data.any()


def test_projection_matches_loop_oracle():
    rng = SplitMix64(19)
    head = ProjectionHead(w1=Tensor(rng.normal((4, 3))), b1=Tensor(rng.normal((4,))),
                          w2=Tensor(rng.normal((2, 4))), b2=Tensor(rng.normal((2,))))
    x = rng.normal((3,))
    expected = mlp_project(head.w1.data, head.b1.data, head.w2.data, head.b2.data, x)
    np.testing.assert_allclose(project(head, Tensor(x)).data, expected, atol=1e-12)


def test_projection_rejects_dimension_mismatch():
    head = ProjectionHead(w1=Tensor(np.zeros((4, 3))), b1=Tensor(np.zeros(4)),
                          w2=Tensor(np.zeros((2, 4))), b2=Tensor(np.zeros(2)))
    with pytest.raises(ContractViolation):
        project(head, Tensor(np.zeros(5)))


# --- checkpoints -------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = SplitMix64(20)
    entries = {
        "alpha/w": rng.normal((3, 4)),
        "beta/scalar": np.array(0.123456789),
        "gamma/deep": rng.normal((2, 3, 4)),
    }
    path = tmp_path / "params.stgc"
    checkpoint_write(path, entries)
    loaded = checkpoint_read(path)
    assert list(loaded) == list(entries)
    for name in entries:
        assert loaded[name].tobytes() == np.asarray(entries[name]).tobytes()
        assert loaded[name].shape == np.asarray(entries[name]).shape


def test_checkpoint_write_deterministic(tmp_path):
    entries = {"x": SplitMix64(21).normal((5, 5))}
    p1, p2 = tmp_path / "a.stgc", tmp_path / "b.stgc"
    checkpoint_write(p1, entries)
    checkpoint_write(p2, entries)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_corruption(tmp_path):
    path = tmp_path / "broken.stgc"
    checkpoint_write(path, {"x": np.zeros((4, 4))})
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])  # truncate payload
    with pytest.raises(DataError):
        checkpoint_read(path)
    path.write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(DataError):
        checkpoint_read(path)


def test_encoder_state_round_trip(tmp_path):
    state, config, topo = _toy_state(seed=22, with_heads=True)
    path = tmp_path / "encoder.stgc"
    save_encoder(path, state)
    loaded = load_encoder(path)
    assert loaded.config == config
    assert loaded.topology == topo
    for (n1, p1), (n2, p2) in zip(state.named_parameters().items(),
                                  loaded.named_parameters().items()):
        assert n1 == n2
        assert p1.data.tobytes() == p2.data.tobytes()
    assert loaded.head_global is not None
    assert set(loaded.log_sigma_sq) == {"global", "temporal"}


def test_encoder_entries_without_heads(tmp_path):
    state, _, _ = _toy_state(seed=23, with_heads=True)
    bare = state.without_heads()
    entries = encoder_entries(bare)
    assert not any(name.startswith("head_") for name in entries)
    loaded = encoder_from_entries(entries)
    assert loaded.head_global is None and loaded.head_local is None
