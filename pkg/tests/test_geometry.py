import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from afford3d import autodiff as ad
from afford3d import encoder
from afford3d.data import normalize
from afford3d.geometry import (PointCloud, PyramidConfig, build_dense, fps, init_pyramid, init_upsample, knn,
                               propagate, upsample)

SQUARE = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)


def brute_fps_ok(pts, chosen):
    """Every chosen point maximises the distance to the prior set; ties -> lowest index."""
    for i in range(1, len(chosen)):
        prior = pts[chosen[:i]]
        d = ((pts[:, None, :] - prior[None]) ** 2).sum(-1).min(axis=1)
        d[chosen[:i]] = -np.inf
        best = np.flatnonzero(d == d.max())[0]
        if chosen[i] != best:
            return False
    return True


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


# ---------------------------------------------------------------- PointCloud

def test_point_cloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        PointCloud(np.array([[0.0, np.nan, 0.0]]))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((4, 3)), channels=np.zeros((3, 2)))
    assert len(PointCloud(np.zeros((5, 3)))) == 5


def test_normalize_centroid_and_scale(rng):
    c = normalize(rng.normal(size=(200, 3)) * 5 + 3)
    np.testing.assert_allclose(c.coords.mean(axis=0), 0.0, atol=1e-12)
    assert abs(np.linalg.norm(c.coords, axis=1).max() - 1.0) < 1e-6


# ---------------------------------------------------------------- fps

def test_fps_square_examples():
    assert fps(SQUARE, 2, 0).tolist() == [0, 3]
    assert fps(SQUARE, 3, 0).tolist() == [0, 3, 1]


def test_fps_argmax_property_random(rng):
    for _ in range(20):
        pts = rng.normal(size=(64, 3))
        assert brute_fps_ok(pts, fps(pts, 16))


def test_fps_errors():
    with pytest.raises(ValueError):
        fps(SQUARE, 5)
    with pytest.raises(ValueError):
        fps(SQUARE, 0)
    with pytest.raises(ValueError):
        fps(SQUARE, 2, start=4)


@given(n=st.integers(1, 40), seed=st.integers(0, 2**16))
def test_fps_full_is_permutation(n, seed):
    pts = np.random.default_rng(seed).normal(size=(n, 3))
    start = seed % n
    out = fps(pts, n, start)
    assert out[0] == start
    assert sorted(out.tolist()) == list(range(n))


@given(seed=st.integers(0, 2**16))
def test_fps_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(48, 3))
    rot = pts @ random_rotation(rng).T
    assert fps(pts, 12, 3).tolist() == fps(rot, 12, 3).tolist()


def test_fps_duplicate_points_lowest_index():
    pts = np.array([[0, 0, 0], [2, 0, 0], [2, 0, 0], [1, 0, 0]], dtype=float)
    assert fps(pts, 3).tolist() == [0, 1, 3]


# ---------------------------------------------------------------- knn

def test_knn_coincident_query_first():
    idx, d2 = knn(SQUARE[2:3], SQUARE, 2)
    assert idx[0, 0] == 2 and d2[0, 0] == 0.0


def test_knn_line_example():
    refs = np.array([[x, 0, 0] for x in range(4)], dtype=float)
    idx, d2 = knn(np.array([[1.4, 0, 0]]), refs, 2)
    assert idx.tolist() == [[1, 2]]
    np.testing.assert_allclose(d2, [[0.16, 0.36]])


def test_knn_matches_exhaustive_sort(rng):
    q, r = rng.normal(size=(32, 3)), rng.normal(size=(128, 3))
    idx, d2 = knn(q, r, 3)
    for i in range(32):
        dist = [float(((q[i] - r[j]) ** 2).sum()) for j in range(128)]
        order = sorted(range(128), key=lambda j: (dist[j], j))[:3]
        assert idx[i].tolist() == order
        np.testing.assert_allclose(d2[i], [dist[j] for j in order], rtol=1e-12)


def test_knn_ties_lowest_index():
    refs = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [3, 0, 0]], dtype=float)
    idx, _ = knn(np.zeros((1, 3)), refs, 3)
    assert idx.tolist() == [[0, 1, 2]]


def test_knn_k_too_large():
    with pytest.raises(ValueError):
        knn(SQUARE, SQUARE, 5)


# ---------------------------------------------------------------- propagate

def test_propagate_triangle_centroid():
    tri = np.array([[1, 0, 0], [math.cos(2 * math.pi / 3), math.sin(2 * math.pi / 3), 0],
                    [math.cos(4 * math.pi / 3), math.sin(4 * math.pi / 3), 0]])
    out = propagate(np.zeros((1, 3)), tri, np.array([[1.0], [2.0], [3.0]]))
    assert out.data[0, 0] == pytest.approx(2.0, abs=1e-12)


def test_propagate_exact_match():
    src = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    out = propagate(src[1:2], src, np.array([[0.0], [7.5], [1.0], [2.0]]))
    assert out.data[0, 0] == 7.5


def test_propagate_formula(rng):
    src, feats, dst = rng.normal(size=(3, 3)), rng.normal(size=(3, 2)), rng.normal(size=(1, 3))
    d2 = ((src - dst) ** 2).sum(axis=1)
    w = 1.0 / (d2 + 1e-8)
    expected = (w[:, None] * feats).sum(axis=0) / w.sum()
    np.testing.assert_allclose(propagate(dst, src, feats).data[0], expected, rtol=1e-12)


def test_propagate_needs_three_sources():
    with pytest.raises(ValueError):
        propagate(np.zeros((1, 3)), np.zeros((2, 3)), np.zeros((2, 1)))


@given(seed=st.integers(0, 2**16), value=st.floats(-1e3, 1e3))
def test_propagate_constant_field(seed, value):
    rng = np.random.default_rng(seed)
    src, dst = rng.normal(size=(10, 3)), rng.normal(size=(6, 3))
    out = propagate(dst, src, np.full((10, 2), value)).data
    np.testing.assert_allclose(out, value, rtol=1e-12, atol=1e-12)


@given(seed=st.integers(0, 2**16))
def test_propagate_convex_combination(seed):
    rng = np.random.default_rng(seed)
    src, dst, feats = rng.normal(size=(12, 3)), rng.normal(size=(9, 3)), rng.normal(size=(12, 4))
    out = propagate(dst, src, feats).data
    idx, _ = knn(dst, src, 3)
    nb = feats[idx]
    assert np.all(out >= nb.min(axis=1) - 1e-12) and np.all(out <= nb.max(axis=1) + 1e-12)


# ---------------------------------------------------------------- upsample

def upsample_oracle(src_xyz, src_feats, dst_xyz, dst_feats, p, name, k):
    """Per-destination, per-edge loop."""
    ps = src_feats @ p[f"{name}/src_proj/w"].data
    pd = dst_feats @ p[f"{name}/dst_proj/w"].data
    w, b = p[f"{name}/edge/w"].data, p[f"{name}/edge/b"].data[0]
    out = []
    for i in range(len(dst_xyz)):
        dist = ((src_xyz - dst_xyz[i]) ** 2).sum(axis=1)
        nbrs = sorted(range(len(src_xyz)), key=lambda j: (dist[j], j))[:k]
        edges = []
        for j in nbrs:
            e = np.concatenate([ps[j] - pd[i], pd[i]]) @ w + b
            edges.append([0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in e])
        out.append(np.max(edges, axis=0))
    return np.array(out)


def test_upsample_matches_edge_loop(rng):
    p = {}
    init_upsample(p, "u", 4, 3, 5, 6, rng)
    p["u/edge/b"].data = rng.normal(size=(1, 6))
    sx, sf, dx, df = rng.normal(size=(11, 3)), rng.normal(size=(11, 4)), rng.normal(size=(7, 3)), rng.normal(size=(7, 3))
    got = upsample(sx, sf, dx, df, p, "u", k=8).data
    np.testing.assert_allclose(got, upsample_oracle(sx, sf, dx, df, p, "u", 8), rtol=1e-10, atol=1e-12)


def test_upsample_identity_shape(rng):
    p = {}
    init_upsample(p, "u", 6, 6, 6, 5, rng, identity=True)
    xyz, f = rng.normal(size=(20, 3)), rng.normal(size=(20, 6))
    out = upsample(xyz, f, xyz, f, p, "u")
    assert out.shape == (20, 5) and np.all(np.isfinite(out.data))


def test_upsample_single_source_clamps_k(rng):
    p = {}
    init_upsample(p, "u", 3, 3, 4, 4, rng)
    sx, sf = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
    dx, df = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    got = upsample(sx, sf, dx, df, p, "u", k=8).data
    np.testing.assert_allclose(got, upsample_oracle(sx, sf, dx, df, p, "u", 1), atol=1e-12)


def test_upsample_rejects_empty(rng):
    p = {}
    init_upsample(p, "u", 3, 3, 4, 4, rng)
    with pytest.raises(ValueError):
        upsample(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((2, 3)), np.zeros((2, 3)), p, "u")


def test_upsample_gradients(rng):
    from afford3d.gradsuite import case_upsample
    assert case_upsample(rng, max_elements=None).passed


# ---------------------------------------------------------------- build_dense

def _enc(cloud, cfg, seed=0):
    return encoder.encode(cloud, cfg, encoder.init_params(cfg, seed=seed))


def test_build_dense_default_shapes(rng):
    cloud = rng.normal(size=(2048, 3))
    ecfg = encoder.EncoderConfig(centers=128, k=16, width=32, depth=2, taps=(1, 2), sparse_width=16)
    pcfg = PyramidConfig(n2=512, n3=1024, width=128)
    params = {}
    init_pyramid(params, ecfg.width, pcfg, np.random.default_rng(1))
    pyr = build_dense(cloud, _enc(cloud, ecfg), params, pcfg)
    assert pyr.f_dense.shape == (2048, 128)
    assert pyr.f1.shape == (512, 32) and pyr.f2.shape == (1024, 32)
    for idx, n in ((pyr.p2_indices, 512), (pyr.p3_indices, 1024)):
        assert len(set(idx.tolist())) == n and idx.min() >= 0 and idx.max() < 2048


def test_build_dense_deterministic_and_sensitive(rng):
    cloud = rng.normal(size=(128, 3))
    ecfg = encoder.EncoderConfig(centers=16, k=8, width=8, depth=2, taps=(1, 2), sparse_width=8)
    pcfg = PyramidConfig(n2=32, n3=64, width=8)
    params = {}
    init_pyramid(params, ecfg.width, pcfg, np.random.default_rng(1))
    eparams = encoder.init_params(ecfg, seed=3)
    a = build_dense(cloud, encoder.encode(cloud, ecfg, eparams), params, pcfg).f_dense.data
    b = build_dense(cloud, encoder.encode(cloud, ecfg, eparams), params, pcfg).f_dense.data
    assert a.tobytes() == b.tobytes()
    eparams["encoder/block0/mlp/fc2/w"].data[0, 0] += 0.5
    c = build_dense(cloud, encoder.encode(cloud, ecfg, eparams), params, pcfg).f_dense.data
    assert not np.allclose(a, c)


def test_build_dense_gradient_through_chain(rng):
    cloud = rng.normal(size=(64, 3))
    ecfg = encoder.EncoderConfig(centers=8, k=8, width=6, depth=2, heads=2, taps=(1, 2), sparse_width=4)
    pcfg = PyramidConfig(n2=16, n3=32, up_k=4, width=5)
    params = encoder.init_params(ecfg, seed=2)
    init_pyramid(params, ecfg.width, pcfg, np.random.default_rng(3))
    proj = np.random.default_rng(4).normal(size=(64, 5))

    def fn(ts):
        merged = dict(params) | ts
        pyr = build_dense(cloud, encoder.encode(cloud, ecfg, merged), merged, pcfg)
        return ad.sum_(pyr.f_dense * ad.Tensor(proj))

    point = {k: v.data for k, v in params.items()}
    rep = ad.grad_check(fn, point, tol=1e-4, max_elements=3, rng=np.random.default_rng(0))
    assert rep.passed, str(rep)


@pytest.mark.parametrize("n2,n3,n", [(64, 32, 128), (32, 128, 128), (32, 64, 48)])
def test_pyramid_config_rejects_bad_counts(n2, n3, n):
    with pytest.raises(ValueError):
        PyramidConfig(n2=n2, n3=n3).validate(n)
