import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nes.geometry import (ObjFormatError, TemplateMesh, barycentric_interp, capsule, cast_rays, deform_vertices,
                          first_hit, icosphere, project_points, read_obj, texel_to_surface, write_obj)


def closest_on_triangle(p, a, b, c):
    """Reference closest point (Ericson's region test), written independently of the kernel."""
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = ab @ ap, ac @ ap
    if d1 <= 0 and d2 <= 0:
        return a
    bp = p - b
    d3, d4 = ab @ bp, ac @ bp
    if d3 >= 0 and d4 <= d3:
        return b
    vc = d1 * d4 - d3 * d2
    if vc <= 0 and d1 >= 0 and d3 <= 0:
        return a + d1 / (d1 - d3) * ab
    cp = p - c
    d5, d6 = ab @ cp, ac @ cp
    if d6 >= 0 and d5 <= d6:
        return c
    vb = d5 * d2 - d1 * d6
    if vb <= 0 and d2 >= 0 and d6 <= 0:
        return a + d2 / (d2 - d6) * ac
    va = d3 * d6 - d5 * d4
    if va <= 0 and (d4 - d3) >= 0 and (d5 - d6) >= 0:
        return b + (d4 - d3) / ((d4 - d3) + (d5 - d6)) * (c - b)
    denom = 1.0 / (va + vb + vc)
    return a + ab * vb * denom + ac * vc * denom


def brute_distance(mesh, p):
    tri = mesh.vertices[mesh.faces]
    return min(np.linalg.norm(p - closest_on_triangle(p, *t)) for t in tri)


def brute_raycast(mesh, o, d):
    best = np.inf
    for a, b, c in mesh.vertices[mesh.faces]:
        e1, e2 = b - a, c - a
        M = np.column_stack([-d, e1, e2])
        if abs(np.linalg.det(M)) < 1e-14:
            continue
        t, u, v = np.linalg.solve(M, o - a)
        if t > 0 and u >= 0 and v >= 0 and u + v <= 1:
            best = min(best, t)
    return best


def test_icosphere_counts_and_atlas(sphere):
    assert sphere.n_faces == 20 * 4**4
    assert np.allclose(np.linalg.norm(sphere.vertices, axis=1), 1.0)
    assert sphere.face_texels.min() >= 0 and sphere.face_texels.max() <= 1
    # every face is front-facing outward
    c = sphere.vertices[sphere.faces].mean(axis=1)
    assert np.all(np.einsum("ij,ij->i", sphere.face_normals, c) > 0)


def test_metric_sqrt_factorises_inverse_metric(sphere):
    L = sphere.uv_metric_sqrt
    np.testing.assert_allclose(L @ np.swapaxes(L, 1, 2), sphere.uv_metric, atol=1e-9)


def test_inverse_metric_matches_texel_jacobian(sphere):
    P = sphere.texel_jacobian[:50]
    M = sphere.uv_metric[:50]
    np.testing.assert_allclose(M @ (np.swapaxes(P, 1, 2) @ P), np.broadcast_to(np.eye(2), M.shape), atol=1e-8)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-2.5, 2.5), min_size=3, max_size=3))
def test_projection_matches_brute_force(coarse_sphere, xyz):
    p = np.array(xyz)
    proj = project_points(coarse_sphere, p[None])
    assert proj.distance[0] == pytest.approx(brute_distance(coarse_sphere, p), abs=1e-9)
    assert np.linalg.norm(proj.position[0] - p) == pytest.approx(proj.distance[0], abs=1e-9)


def test_projection_batch_deep_interior_and_cutoff(sphere):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(200, 3)) * 0.8
    exact = project_points(sphere, x)
    capped = project_points(sphere, x, max_distance=0.6)
    near = exact.distance <= 0.6
    assert np.all(capped.exact[near])
    np.testing.assert_allclose(capped.distance[near], exact.distance[near], atol=1e-12)
    assert np.all(capped.distance >= exact.distance - 1e-12)


def test_projection_on_surface_is_identity(sphere):
    f = np.arange(0, sphere.n_faces, 97)
    b = np.tile([0.2, 0.3, 0.5], (len(f), 1))
    pts = np.einsum("nc,ncd->nd", b, sphere.vertices[sphere.faces[f]])
    proj = project_points(sphere, pts)
    np.testing.assert_allclose(proj.position, pts, atol=1e-12)
    np.testing.assert_array_equal(proj.face, f)
    expect_tex = np.einsum("nc,ncd->nd", b, sphere.face_texels[f])
    np.testing.assert_allclose(proj.texel, expect_tex, atol=1e-12)


def test_projection_tie_takes_lowest_face():
    # two coplanar triangles sharing an edge; a point above the edge is equidistant
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0], [0.5, 0.5, -1]], float)
    faces = np.array([[1, 3, 2], [0, 1, 2], [0, 4, 1], [1, 4, 3], [3, 4, 2], [2, 4, 0]])
    tex = np.full((len(faces), 3, 2), 0.5)
    mesh = TemplateMesh(v, faces, tex)
    proj = project_points(mesh, np.array([[0.5, 0.5, 1.0]]))
    assert proj.face[0] == 0


def test_raycast_matches_brute_force(coarse_sphere):
    rng = np.random.default_rng(1)
    o = rng.normal(size=(40, 3))
    o = 3 * o / np.linalg.norm(o, axis=1, keepdims=True)
    d = -o + rng.normal(scale=0.6, size=o.shape)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    t, face, bary = cast_rays(coarse_sphere, o, d)
    for i in range(len(o)):
        ref = brute_raycast(coarse_sphere, o[i], d[i])
        assert t[i] == pytest.approx(ref, abs=1e-9) if np.isfinite(ref) else not np.isfinite(t[i])
    hit = np.isfinite(t)
    pts = np.einsum("nc,ncd->nd", bary[hit], coarse_sphere.vertices[coarse_sphere.faces[face[hit]]])
    np.testing.assert_allclose(pts, o[hit] + t[hit, None] * d[hit], atol=1e-9)


def test_first_hit_on_deformed_sphere(sphere):
    m = deform_vertices(sphere, np.full(len(sphere.vertices), 0.1))
    t, _, _ = first_hit(m, [0, 0, 5.0], [0, 0, -1.0])
    assert t == pytest.approx(3.9, abs=1e-9)
    assert first_hit(m, [0, 0, 5.0], [0, 0, 1.0]) is None


def test_deform_moves_along_normals_and_clamps(sphere):
    l = np.linspace(-0.2, 0.2, len(sphere.vertices))
    m = deform_vertices(sphere, l)
    np.testing.assert_allclose(np.linalg.norm(m.vertices, axis=1), 1 + l, atol=1e-12)
    with pytest.warns(RuntimeWarning):
        m2 = deform_vertices(sphere, np.full(len(sphere.vertices), 0.9), max_offset=0.5)
    np.testing.assert_allclose(np.linalg.norm(m2.vertices, axis=1), 1.5, atol=1e-12)
    with pytest.raises(ValueError):
        deform_vertices(sphere, np.zeros(3))


def test_refit_bvh_answers_like_rebuilt(sphere):
    rng = np.random.default_rng(2)
    m = deform_vertices(sphere, rng.uniform(-0.1, 0.1, len(sphere.vertices)))
    fresh = TemplateMesh(m.vertices, m.faces, m.face_texels, m.vertex_normals)
    x = rng.normal(size=(100, 3))
    np.testing.assert_allclose(project_points(m, x).distance, project_points(fresh, x).distance, atol=1e-12)


def test_texel_to_surface_roundtrip(sphere):
    f = np.arange(3, sphere.n_faces, 131)
    b = np.tile([0.25, 0.25, 0.5], (len(f), 1))
    tex = np.einsum("nc,ncd->nd", b, sphere.face_texels[f])
    face, bary, pos = texel_to_surface(sphere, tex)
    np.testing.assert_allclose(pos, np.einsum("nc,ncd->nd", b, sphere.vertices[sphere.faces[f]]), atol=1e-9)


def test_vertex_texels_locate_their_vertex(sphere):
    _, _, pos = texel_to_surface(sphere, sphere.vertex_texels)
    np.testing.assert_allclose(pos, sphere.vertices, atol=1e-9)


def test_barycentric_interp_validation(sphere):
    assert barycentric_interp(sphere, 0, [1, 0, 0]) == pytest.approx(sphere.vertices[sphere.faces[0, 0]])
    with pytest.raises(IndexError):
        barycentric_interp(sphere, -1, [1, 0, 0])
    with pytest.raises(ValueError):
        barycentric_interp(sphere, 0, [0.5, 0.6, 0])


def test_obj_roundtrip(tmp_path, coarse_sphere):
    write_obj(coarse_sphere, tmp_path / "m.obj")
    back = read_obj(tmp_path / "m.obj")
    np.testing.assert_array_equal(back.vertices, coarse_sphere.vertices)
    np.testing.assert_array_equal(back.faces, coarse_sphere.faces)
    np.testing.assert_array_equal(back.face_texels, coarse_sphere.face_texels)


def test_obj_rejects_quads(tmp_path):
    (tmp_path / "q.obj").write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    with pytest.raises(ObjFormatError):
        read_obj(tmp_path / "q.obj")


def test_capsule_template_is_closed_and_valid():
    c = capsule()
    # closed: every edge shared by exactly two faces
    e = np.sort(np.concatenate([c.faces[:, [0, 1]], c.faces[:, [1, 2]], c.faces[:, [2, 0]]]), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    assert np.all(counts == 2)
    assert c.valid_faces.all()


def test_template_validation():
    with pytest.raises(ValueError):
        TemplateMesh(np.zeros((3, 3)), np.array([[0, 1, 5]]), np.zeros((1, 3, 2)))
    with pytest.raises(ValueError):
        TemplateMesh(np.eye(3), np.array([[0, 1, 2]]), np.full((1, 3, 2), 1.5))


def test_pole_projection_and_centroid(sphere):
    pole = np.argmax(sphere.vertices[:, 2])
    p = project_points(sphere, np.array([[0, 0, 1.3]]))
    assert p.distance[0] == pytest.approx(0.3, abs=1e-12)
    np.testing.assert_allclose(p.position[0], sphere.vertices[pole], atol=1e-12)
    f = sphere.faces[10]
    np.testing.assert_allclose(barycentric_interp(sphere, 10, [1 / 3] * 3), sphere.vertices[f].mean(0), atol=1e-15)


def test_sinusoidal_offset_matches_per_vertex_oracle(sphere):
    l = 0.1 * np.sin(3 * sphere.vertices[:, 0]) * np.cos(2 * sphere.vertices[:, 2])
    m = deform_vertices(sphere, l)
    for i in range(0, len(l), 101):
        np.testing.assert_allclose(m.vertices[i], sphere.vertices[i] + l[i] * sphere.vertex_normals[i], atol=1e-15)
    np.testing.assert_array_equal(deform_vertices(sphere, np.zeros(len(l))).vertices, sphere.vertices)


def test_ray_through_centre_and_miss(sphere):
    t, f, b = first_hit(sphere, [0, 0, 3.0], [0, 0, -1.0])  # through the pole vertex
    assert t == pytest.approx(2.0, abs=1e-6)
    tri = sphere.vertices[sphere.faces[f]]
    n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
    assert abs((np.array([0, 0, 3.0 - t]) - tri[0]) @ n) < 1e-9
    assert first_hit(sphere, [5, 5, 5.0], [1, 0, 0.0]) is None


def test_projection_beats_dense_surface_samples(coarse_sphere):
    rng = np.random.default_rng(7)
    w = rng.dirichlet([1, 1, 1], size=40)
    dense = np.einsum("kc,fcd->fkd", w, coarse_sphere.vertices[coarse_sphere.faces]).reshape(-1, 3)
    x = rng.normal(size=(20, 3)) * 1.2
    proj = project_points(coarse_sphere, x)
    best = np.min(np.linalg.norm(x[:, None] - dense[None], axis=2), axis=1)
    assert np.all(proj.distance <= best + 1e-6)
