import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nes import autodiff as ad
from nes.fields import FieldConfig
from nes.volren import (LAST_DELTA_CAP, N_COARSE, N_SURFACE, Camera, composite, generate_rays, render_image_vr,
                        render_pixel_vr, render_rays_vr, sample_depths, sample_ray, sphere_interval)

from conftest import random_model


def cam(res=32, eye=(0.0, -4.0, 0.5)):
    return Camera.look_at(eye, [0, 0, 0], focal=1.3 * res, width=res, height=res)


def test_camera_projects_through_pixel_centres():
    c = cam(16)
    o, d = generate_rays(c, [[3, 11]])
    p = o[0] + 2.5 * d[0]
    q = c.rotation @ p + c.translation
    assert c.fx * q[0] / q[2] + c.cx == pytest.approx(3.0, abs=1e-12)
    assert c.fy * q[1] / q[2] + c.cy == pytest.approx(11.0, abs=1e-12)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0)


def test_camera_matrix_roundtrip_and_validation():
    c = cam(20)
    back = Camera.from_matrices(c.intrinsics, c.extrinsics, 20, 20)
    np.testing.assert_allclose(back.center, c.center, atol=1e-12)
    with pytest.raises(ValueError):
        Camera(10, 10, 5, 5, np.diag([1, 1, -1.0]), np.zeros(3), 10, 10)
    with pytest.raises(ValueError):
        generate_rays(c, [[20, 0]])


def test_sphere_interval():
    near, far = sphere_interval(np.array([[0, 0, -5.0], [0, 3, -5.0]]), np.array([[0, 0, 1.0], [0, 0, 1.0]]),
                                np.zeros(3), 1.0)
    assert (near[0], far[0]) == pytest.approx((4.0, 6.0))
    assert np.isnan(near[1])


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 5.0), st.floats(0.01, 5.0), st.floats(0.0, 1.0), st.integers(0, 1000))
def test_sample_depths_sorted_and_bracket_hit(near, span, frac, seed):
    far = near + span
    hit = near + frac * span
    t, d, src = sample_depths([near], [far], [hit], 0.1, rng=np.random.default_rng(seed))
    assert t.shape == (1, N_COARSE + N_SURFACE)
    assert np.all(np.diff(t[0]) >= 0) and t[0, 0] >= near and t[0, -1] <= far
    assert np.all(d >= 0) and 0 < d[0, -1] <= LAST_DELTA_CAP
    s = t[0][src[0] == 1]
    assert s.min() <= hit <= s.max()
    assert np.all(np.abs(s - hit) <= 0.4 + 1e-12)


def test_stratified_one_sample_per_stratum():
    t, _, _ = sample_depths([1.0], [3.0], None, n_coarse=16, rng=np.random.default_rng(0))
    idx = np.floor((t[0] - 1.0) / (2.0 / 16)).astype(int)
    np.testing.assert_array_equal(idx, np.arange(16))


def test_sample_ray_rejects_empty_interval():
    with pytest.raises(ValueError):
        sample_ray(np.zeros(3), [0, 0, 1.0], 2.0, 2.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_composite_weights(seed):
    rng = np.random.default_rng(seed)
    sig = rng.exponential(2.0, (3, 20))
    dl = rng.uniform(0.001, 0.2, (3, 20))
    rgb, w, op = composite(rng.random((3, 20, 3)), sig, dl)
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(-1), 1 - np.exp(-(sig * dl).sum(-1)), atol=1e-12)
    np.testing.assert_allclose(op, w.sum(-1))


def test_composite_limits_and_errors():
    c = np.stack([np.full((4, 3), k) for k in (0.2,)])[0]
    rgb, w, _ = composite(c[None], np.array([[1e9, 1.0, 1.0, 1.0]]), np.full((1, 4), 0.1))
    np.testing.assert_array_equal(w[0], [1.0, 0.0, 0.0, 0.0])
    rgb, w, op = composite(c[None], np.zeros((1, 4)), np.full((1, 4), 0.1))
    assert np.all(w == 0) and np.all(rgb == 0) and op[0] == 0
    with pytest.raises(ValueError):
        composite(c[None], np.zeros((1, 3)), np.zeros((1, 4)))


def test_composite_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    sig, dl, col = rng.exponential(1.0, 6), rng.uniform(0.05, 0.3, 6), rng.random((6, 3))
    vs, vc = ad.Var(sig), ad.Var(col)
    with ad.Tape() as tape:
        rgb, _, _ = composite(vc, vs, dl)
        loss = ad.total(ad.mul(rgb, np.array([1.0, 2.0, 3.0])))
    g = tape.backward(loss)
    f = lambda s: float(composite(col, s, dl)[0] @ np.array([1.0, 2.0, 3.0]))
    eps = 1e-7
    fd = np.array([(f(sig + eps * (np.arange(6) == i)) - f(sig - eps * (np.arange(6) == i))) / (2 * eps)
                   for i in range(6)])
    np.testing.assert_allclose(g[vs], fd, rtol=1e-6, atol=1e-9)


def test_vr_sample_and_query_counts(coarse_sphere):
    m = random_model(FieldConfig(depth=3, width=8, octaves=2))
    c = cam(16)
    centre = generate_rays(c, [[7, 7], [8, 8], [7, 8]])
    out = render_rays_vr(m, coarse_sphere, np.zeros(8), *centre)
    assert out.texture_queries == 3 * (N_COARSE + N_SURFACE)
    miss = generate_rays(Camera.look_at([0, -4, 0], [0, 0, 4], focal=10, width=4, height=4), [[0, 0]])
    out = render_rays_vr(m, coarse_sphere, np.zeros(8), *miss)
    assert out.texture_queries == 0 and np.all(out.rgb == 0)


def test_pixel_render_is_pure_and_matches_image(coarse_sphere):
    m = random_model(FieldConfig(depth=3, width=8, octaves=2))
    c = cam(8)
    a = render_pixel_vr(m, coarse_sphere, np.zeros(8), c, (3, 4), seed=1)
    b = render_pixel_vr(m, coarse_sphere, np.zeros(8), c, (3, 4), seed=1)
    np.testing.assert_array_equal(a, b)
    img1 = render_image_vr(m, coarse_sphere, np.zeros(8), c, seed=2, chunk=16)
    img2 = render_image_vr(m, coarse_sphere, np.zeros(8), c, seed=2, chunk=16, threads=2)
    np.testing.assert_array_equal(img1, img2)
    assert img1.shape == (8, 8, 3) and np.all((img1 >= 0) & (img1 <= 1))


def test_principal_ray_and_corner_angle():
    c = Camera.look_at([0, -4, 0], [0, 0, 0], focal=50.0, width=33, height=33)
    _, d = generate_rays(c, [[16, 16], [0, 0]])
    np.testing.assert_allclose(d[0], c.rotation[2], atol=1e-15)
    half_diag = np.hypot(16, 16)
    assert np.arccos(d[1] @ c.rotation[2]) == pytest.approx(np.arctan(half_diag / 50.0), abs=1e-12)


def test_sample_counts_and_determinism():
    t, _, src = sample_depths([1.0], [3.0], None, rng=np.random.default_rng(4))
    assert t.shape == (1, 128) and t.min() >= 1 and t.max() <= 3
    t2, _, src2 = sample_depths([1.0], [3.0], [2.0], 0.1, rng=np.random.default_rng(4))
    assert t2.shape == (1, 144) and src2.sum() == 16
    inside = t2[0][src2[0] == 1]
    assert np.all(np.abs(inside - 2.0) <= 0.4)
    t3, _, _ = sample_depths([1.0], [3.0], [2.0], 0.1, rng=np.random.default_rng(4))
    np.testing.assert_array_equal(t2, t3)


def test_two_sample_hand_example():
    rgb, _, _ = composite(np.array([[1.0, 0, 0], [0, 1.0, 0]]), np.array([1.0, 2.0]), np.array([0.5, 0.5]))
    np.testing.assert_allclose(rgb, [1 - np.exp(-0.5), np.exp(-0.5) * (1 - np.exp(-1.0)), 0], atol=1e-15)
    np.testing.assert_allclose(rgb, [0.3935, 0.3834, 0], atol=1e-4)


def test_opaque_front_sample():
    c = np.random.default_rng(0).random((5, 3))
    rgb, w, _ = composite(c, np.array([500.0, 1, 1, 1, 1]), np.full(5, 0.1))
    assert 1.0 - w[0] < 1e-20 and np.all(w[1:] < 1e-20)
    np.testing.assert_allclose(rgb, c[0], atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 6))
def test_zero_density_samples_change_nothing(seed, pos):
    rng = np.random.default_rng(seed)
    sig, dl, col = rng.exponential(1.0, 6), rng.uniform(0.01, 0.3, 6), rng.random((6, 3))
    rgb, _, op = composite(col, sig, dl)
    rgb2, _, op2 = composite(np.insert(col, pos, rng.random(3), axis=0), np.insert(sig, pos, 0.0),
                             np.insert(dl, pos, 0.2))
    np.testing.assert_allclose(rgb2, rgb, atol=1e-12)
    assert op2 == pytest.approx(op, abs=1e-12)


def test_vr_inference_deterministic(coarse_sphere):
    m = random_model(FieldConfig(depth=3, width=8, octaves=2))
    o, d = generate_rays(cam(8), [[4, 4], [2, 5]])
    a = render_rays_vr(m, coarse_sphere, np.zeros(8), o, d, rng=np.random.default_rng(1)).rgb
    b = render_rays_vr(m, coarse_sphere, np.zeros(8), o, d, rng=np.random.default_rng(1)).rgb
    assert np.array_equal(a, b)
