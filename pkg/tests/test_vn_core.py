import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from gradutil import TOL, fd_relative_error
from vnafford.errors import CheckpointLoadError, InsufficientPointsError
from vnafford.geometry import PointCloud, apply_transform, random_rigid_transform, random_rotation
from vnafford.heads import build_model, encode_cloud, load_model, save_model
from vnafford.vn_core import (FRAME_SOFTNESS, ModelConfig, gather_neighbors, graph_for, invariantize,
                              mean_max_pool, read_checkpoint, vn_edge_conv, vn_linear, vn_relu)

DT = torch.float64


def rot_t(rng, dtype=DT):
    return torch.as_tensor(random_rotation(rng), dtype=dtype)


def rotate(f, r):
    return f @ r.T


def feat(rng, *shape, dtype=DT):
    return torch.as_tensor(rng.standard_normal((*shape, 3)), dtype=dtype)


def small_cloud(rng, n=24):
    return PointCloud(rng.uniform(-0.5, 0.5, (n, 3)))


# ---------------------------------------------------------------- vn_linear

def test_vn_linear_identity_and_zero():
    rng = np.random.default_rng(0)
    f = feat(rng, 5, 4)
    assert torch.equal(vn_linear(torch.eye(4, dtype=DT), f), f)
    assert torch.count_nonzero(vn_linear(torch.zeros(2, 4, dtype=DT), f)) == 0


def test_vn_linear_shape_mismatch():
    with pytest.raises(ValueError):
        vn_linear(torch.zeros(2, 3), torch.zeros(5, 4, 3))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_vn_linear_equivariant(seed):
    rng = np.random.default_rng(seed)
    f = feat(rng, 7, 5, dtype=torch.float32)
    w = torch.as_tensor(rng.standard_normal((3, 5)), dtype=torch.float32)
    r = rot_t(rng, torch.float32)
    assert torch.allclose(vn_linear(w, rotate(f, r)), rotate(vn_linear(w, f), r), atol=1e-5)


def test_vn_linear_never_mixes_coordinates():
    f = torch.zeros(1, 2, 3, dtype=DT)
    f[0, 0, 0] = 1.0
    out = vn_linear(torch.ones(3, 2, dtype=DT), f)
    assert torch.count_nonzero(out[..., 1:]) == 0


# ---------------------------------------------------------------- vn_relu

def test_vn_relu_parallel_kept_antiparallel_removed():
    v = torch.tensor([[1.0, 2.0, -0.5]], dtype=DT)
    assert torch.allclose(vn_relu(v, torch.eye(1, dtype=DT)), v)
    assert torch.allclose(vn_relu(v, -torch.eye(1, dtype=DT)), torch.zeros_like(v))


def test_vn_relu_projects_onto_plane():
    rng = np.random.default_rng(1)
    f = feat(rng, 2)
    w = torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=DT)
    out = vn_relu(f, w)
    for c in range(2):
        v, q = f[c], f[1 - c]
        if v @ q >= 0:
            assert torch.allclose(out[c], v)
        else:
            qh = q / q.norm()
            assert torch.allclose(out[c], v - (v @ qh) * qh)


def test_vn_relu_zero_direction_passes_through():
    f = torch.tensor([[1.0, 0.0, 0.0]], dtype=DT)
    assert torch.equal(vn_relu(f, torch.zeros(1, 1, dtype=DT)), f)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_vn_relu_equivariant(seed):
    rng = np.random.default_rng(seed)
    f = feat(rng, 6, 4, dtype=torch.float32)
    w = torch.as_tensor(rng.standard_normal((4, 4)), dtype=torch.float32)
    r = rot_t(rng, torch.float32)
    assert torch.allclose(vn_relu(rotate(f, r), w), rotate(vn_relu(f, w), r), atol=1e-5)


# ---------------------------------------------------------------- pooling and edge conv

def test_pool_order_free_and_equivariant():
    rng = np.random.default_rng(2)
    h = feat(rng, 4, 6, 3)
    out = mean_max_pool(h, dim=1)
    assert out.shape == (4, 6, 3)
    perm = torch.as_tensor(rng.permutation(6))
    assert torch.allclose(mean_max_pool(h[:, perm], dim=1), out, atol=1e-12)
    r = rot_t(rng)
    assert torch.allclose(mean_max_pool(rotate(h, r), dim=1), rotate(out, r), atol=1e-12)


def test_soft_max_branch_prefers_long_vectors():
    h = torch.zeros(1, 2, 1, 3, dtype=DT)
    h[0, 0, 0] = torch.tensor([10.0, 0, 0])
    h[0, 1, 0] = torch.tensor([0, 0.1, 0])
    soft = mean_max_pool(h, dim=1)[0, 1]
    assert soft[0] > 9.0


def test_edge_conv_zero_offset_self_edge():
    rng = np.random.default_rng(3)
    f = feat(rng, 1, 5, 2)
    edges = torch.zeros(1, 5, 3, dtype=torch.long) + torch.arange(5)[None, :, None]
    w = torch.as_tensor(rng.standard_normal((4, 4)), dtype=DT)
    wd = torch.as_tensor(rng.standard_normal((4, 4)), dtype=DT)
    out = vn_edge_conv(f, edges, w, wd)
    # every edge is (0, f_i): pooling three copies returns the transformed copy twice
    single = vn_relu(vn_linear(w[:, 2:], f), wd)
    assert torch.allclose(out, torch.cat([single, single], dim=-2))
    assert torch.equal(out, vn_edge_conv(f, edges, w, wd))


def test_edge_conv_neighbor_order_free():
    rng = np.random.default_rng(4)
    c = small_cloud(rng)
    f = torch.as_tensor(c.points, dtype=DT)[None, :, None, :]
    edges = torch.from_numpy(graph_for(c.points, 6))[None]
    shuffled = edges[..., torch.as_tensor(rng.permutation(6))]
    w = torch.as_tensor(rng.standard_normal((8, 2)), dtype=DT)
    wd = torch.as_tensor(rng.standard_normal((8, 8)), dtype=DT)
    assert torch.equal(vn_edge_conv(f, edges, w, wd), vn_edge_conv(f, shuffled, w, wd))


def test_edge_conv_rigid_equivariance():
    rng = np.random.default_rng(5)
    c = small_cloud(rng, 64)
    t = random_rigid_transform(rng)
    edges = torch.from_numpy(graph_for(c.points, 8))[None]
    w = torch.as_tensor(rng.standard_normal((8, 2)), dtype=torch.float32)
    wd = torch.as_tensor(rng.standard_normal((8, 8)), dtype=torch.float32)

    def run(points):
        x = torch.as_tensor(points - points.mean(0), dtype=torch.float32)[None, :, None, :]
        return vn_edge_conv(x, edges, w, wd)

    a = run(c.points)
    b = run(apply_transform(t, c).points)
    r = torch.as_tensor(t.rotation, dtype=torch.float32)
    assert torch.allclose(b, rotate(a, r), atol=1e-4 * float(a.abs().max()))


def test_gather_neighbors_shape():
    f = torch.arange(2 * 4 * 3 * 3, dtype=DT).reshape(2, 4, 3, 3)
    edges = torch.zeros(2, 4, 2, dtype=torch.long)
    assert gather_neighbors(f, edges).shape == (2, 4, 2, 3, 3)


# ---------------------------------------------------------------- invariantize

def test_invariantize_zero_gives_bias():
    mix = torch.nn.Linear(3 * 4, 5).double()
    out = invariantize(torch.zeros(2, 4, 3, dtype=DT), torch.ones(3, 4, dtype=DT), mix)
    assert torch.allclose(out, mix.bias.expand(2, 5))


def test_invariantize_projection_onto_own_channel():
    v = torch.tensor([[[3.0, 4.0, 0.0], [0, 0, 0], [0, 0, 0]]], dtype=DT)
    frame_w = torch.zeros(3, 3, dtype=DT)
    frame_w[0, 0] = 1.0
    mix = torch.nn.Linear(9, 9).double()
    with torch.no_grad():
        mix.weight.copy_(torch.eye(9))
        mix.bias.zero_()
    out = invariantize(v, frame_w, mix)
    # one point: the soft floor is FRAME_SOFTNESS^2 times its own squared norm
    expected = 5.0 / np.sqrt(1 + FRAME_SOFTNESS ** 2)
    assert abs(float(out[0, 0].detach()) - expected) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_invariantize_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    f = feat(rng, 5, 6, dtype=torch.float32)
    fw = torch.as_tensor(rng.standard_normal((3, 6)), dtype=torch.float32)
    mix = torch.nn.Linear(18, 4)
    r = rot_t(rng, torch.float32)
    with torch.no_grad():
        assert torch.allclose(invariantize(rotate(f, r), fw, mix), invariantize(f, fw, mix), atol=1e-5)


# ---------------------------------------------------------------- encoder

@pytest.fixture(scope="module")
def vn_model():
    return build_model(ModelConfig())


def drawer_cloud(seed):
    from vnafford.simenv import initial_state, render_cloud, sample_object
    rng = np.random.default_rng(seed)
    return render_cloud(initial_state(sample_object("drawer", rng, "so3"), rng), 256, rng)


def test_encoder_desk_config_smoke(vn_model):
    f = encode_cloud(vn_model, drawer_cloud(0))
    assert f.inv.shape == (256, 64) and f.eqv.shape == (256, 32, 3)
    assert torch.isfinite(f.inv).all() and torch.isfinite(f.eqv).all()


def test_encoder_deterministic(vn_model):
    c = drawer_cloud(1)
    a, b = encode_cloud(vn_model, c), encode_cloud(vn_model, c)
    assert torch.equal(a.inv, b.inv) and torch.equal(a.eqv, b.eqv)


@pytest.mark.parametrize("seed", range(10))
def test_encoder_invariance_and_equivariance(vn_model, seed):
    c = drawer_cloud(100 + seed)
    t = random_rigid_transform(np.random.default_rng(seed))
    a, b = encode_cloud(vn_model, c), encode_cloud(vn_model, apply_transform(t, c))
    ia, ib = a.inv.double().numpy(), b.inv.double().numpy()
    assert np.max(np.linalg.norm(ia - ib, axis=1) / np.linalg.norm(ia, axis=1)) < 1e-4
    ea = a.eqv.double().numpy() @ t.rotation.T
    eb = b.eqv.double().numpy()
    per_point = np.linalg.norm((ea - eb).reshape(256, -1), axis=1) / np.linalg.norm(ea.reshape(256, -1), axis=1)
    assert per_point.max() < 1e-4


def test_encoder_per_channel_equivariance_double():
    model = build_model(ModelConfig(precision="float64"))
    for seed in range(5):
        c = drawer_cloud(200 + seed)
        t = random_rigid_transform(np.random.default_rng(seed))
        a, b = encode_cloud(model, c), encode_cloud(model, apply_transform(t, c))
        ea = a.eqv.numpy() @ t.rotation.T
        dev = np.linalg.norm(b.eqv.numpy() - ea, axis=-1) / (np.linalg.norm(ea, axis=-1) + 1e-8)
        assert dev.max() < 1e-4


def test_encoder_translation_invariant(vn_model):
    c = drawer_cloud(2)
    from vnafford.geometry import RigidTransform
    moved = apply_transform(RigidTransform(np.eye(3), [0.3, -0.2, 0.7]), c)
    a, b = encode_cloud(vn_model, c), encode_cloud(vn_model, moved)
    assert torch.allclose(a.eqv, b.eqv, atol=1e-4 * float(a.eqv.abs().max()))


def test_encoder_permutation_equivariant(vn_model):
    # exact up to summation order in the mean pools
    c = drawer_cloud(3)
    perm = np.random.default_rng(0).permutation(256)
    a = encode_cloud(vn_model, c)
    b = encode_cloud(vn_model, PointCloud(c.points[perm], c.part_labels[perm]))
    assert torch.allclose(b.inv, a.inv[perm], atol=1e-5)
    assert torch.allclose(b.eqv, a.eqv[perm], atol=1e-5)


def test_encoder_insufficient_points(vn_model):
    with pytest.raises(InsufficientPointsError):
        encode_cloud(vn_model, np.zeros((16, 3)))


# ---------------------------------------------------------------- gradients

LAYERS = {
    "vn_linear": lambda rng, dt: (vn_linear, [torch.as_tensor(rng.standard_normal((3, 4)), dtype=dt),
                                              feat(rng, 2, 4, dtype=dt)]),
    "vn_relu": lambda rng, dt: (vn_relu, [feat(rng, 2, 3, dtype=dt),
                                          torch.as_tensor(rng.standard_normal((3, 3)), dtype=dt)]),
    "mean_max_pool": lambda rng, dt: (lambda h: mean_max_pool(h, 1), [feat(rng, 2, 4, 2, dtype=dt)]),
    "vn_edge_conv": lambda rng, dt: (
        lambda f, w, wd: vn_edge_conv(f, torch.tensor([[[1, 2], [0, 2], [0, 1]]]), w, wd),
        [feat(rng, 1, 3, 1, dtype=dt), torch.as_tensor(rng.standard_normal((3, 2)), dtype=dt),
         torch.as_tensor(rng.standard_normal((3, 3)), dtype=dt)]),
    "invariantize": lambda rng, dt: (
        lambda f, fw, lw: invariantize(f, fw, lambda x: x @ lw.T),
        [feat(rng, 2, 3, dtype=dt), torch.as_tensor(rng.standard_normal((3, 3)), dtype=dt),
         torch.as_tensor(rng.standard_normal((2, 9)), dtype=dt)]),
}


@pytest.mark.parametrize("name", sorted(LAYERS))
@pytest.mark.parametrize("dtype", [torch.float64, torch.float32], ids=["double", "single"])
def test_layer_gradients(name, dtype):
    rng = np.random.default_rng(hash(name) % 2 ** 32)
    for i in range(20):
        fn, inputs = LAYERS[name](rng, dtype)
        assert fd_relative_error(fn, inputs, seed=i) < TOL[dtype]


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip_bit_exact(tmp_path, vn_model):
    path = tmp_path / "m.npz"
    save_model(path, vn_model)
    loaded = load_model(path)
    for (k, a), (k2, b) in zip(vn_model.state_dict().items(), loaded.state_dict().items()):
        assert k == k2 and torch.equal(a, b)
    manifest, _ = read_checkpoint(path)
    assert manifest["config"]["k_nn"] == 16 and manifest["config"]["precision"] == "float32"


def test_checkpoint_corrupt(tmp_path):
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"not a zip")
    with pytest.raises(CheckpointLoadError):
        load_model(bad)


def test_checkpoint_truncated(tmp_path, vn_model):
    path = tmp_path / "m.npz"
    save_model(path, vn_model)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointLoadError):
        load_model(path)
