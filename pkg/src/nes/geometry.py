"""Template meshes with a UV atlas, nearest-point projection and ray casting.

Everything here is read-only after construction: arrays are frozen and the
acceleration structures are built eagerly, so queries can be shared between
threads.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels as K

DEGENERATE_AREA = 1e-14


def _frozen(a, dtype=np.float64) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def _normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


def area_weighted_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    tri = vertices[faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    acc = np.zeros_like(vertices)
    for c in range(3):
        np.add.at(acc, faces[:, c], cross)
    return _normalize(acc)


class TemplateMesh:
    """Closed triangle mesh with per-corner texels in [0, 1]^2.

    Parameters
    ----------
    vertices : (V, 3) array
    faces : (F, 3) int array
    face_texels : (F, 3, 2) array, texel of each face corner
    vertex_normals : (V, 3) array, optional; area-weighted if omitted
    """

    def __init__(self, vertices, faces, face_texels, vertex_normals=None):
        vertices = np.asarray(vertices, dtype=np.float64)
        faces = np.asarray(faces, dtype=np.int64)
        face_texels = np.asarray(face_texels, dtype=np.float64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise ValueError(f"vertices must be (V, 3), got {vertices.shape}")
        if faces.ndim != 2 or faces.shape[1] != 3 or len(faces) == 0:
            raise ValueError(f"faces must be a non-empty (F, 3) array, got {faces.shape}")
        if faces.min() < 0 or faces.max() >= len(vertices):
            raise ValueError("face index out of range")
        if face_texels.shape != (len(faces), 3, 2):
            raise ValueError(f"face_texels must be (F, 3, 2), got {face_texels.shape}")
        if face_texels.min() < 0.0 or face_texels.max() > 1.0:
            raise ValueError("texel coordinates must lie in [0, 1]")
        if vertex_normals is None:
            vertex_normals = area_weighted_normals(vertices, faces)
        vertex_normals = _normalize(np.asarray(vertex_normals, dtype=np.float64))
        if vertex_normals.shape != vertices.shape:
            raise ValueError("vertex_normals must match vertices")

        self.vertices = _frozen(vertices)
        self.faces = _frozen(faces, np.int64)
        self.face_texels = _frozen(face_texels)
        self.vertex_normals = _frozen(vertex_normals)

        tri = vertices[faces]
        e1, e2 = tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
        cross = np.cross(e1, e2)
        area = 0.5 * np.linalg.norm(cross, axis=1)
        self.face_areas = _frozen(area)
        self.face_normals = _frozen(_normalize(cross))
        self.valid_faces = _frozen(area > DEGENERATE_AREA, bool)

        # canonical texel per vertex: corner of the lowest-index incident face
        first = np.full(len(vertices), len(faces))
        for c in range(3):
            np.minimum.at(first, faces[:, c], np.arange(len(faces)))
        vt = np.zeros((len(vertices), 2))
        for c in range(3):
            own = first[faces[:, c]] == np.arange(len(faces))
            vt[faces[own, c]] = face_texels[own, c]
        self.vertex_texels = _frozen(vt)

        # inverse metric of the texel->surface map per face: |grad_S l|^2 = g^T M g
        t = face_texels
        T = np.stack([t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]], axis=2)  # (F, 2, 2) columns
        E = np.stack([e1, e2], axis=2)  # (F, 3, 2)
        det = np.linalg.det(T)
        ok = np.abs(det) > 1e-14
        Tinv = np.zeros_like(T)
        Tinv[ok] = np.linalg.inv(T[ok])
        P = E @ Tinv  # d(position)/d(u, v)
        G = np.swapaxes(P, 1, 2) @ P
        gdet = np.linalg.det(G)
        good = ok & (np.abs(gdet) > 1e-20)
        M = np.zeros_like(G)
        M[good] = np.linalg.inv(G[good])
        self.texel_jacobian = _frozen(P)
        self.uv_metric = _frozen(M)
        L = np.zeros_like(M)
        L[good] = np.linalg.cholesky(M[good])
        self.uv_metric_sqrt = _frozen(L)  # L L^T = M

        self.bvh = self._build_bvh(tri)

    def _build_bvh(self, tri):
        return K.build_bvh(tri, self.face_normals, self.face_areas, self.valid_faces)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def bounding_sphere(self) -> tuple[np.ndarray, float]:
        center = 0.5 * (self.vertices.min(axis=0) + self.vertices.max(axis=0))
        return center, float(np.max(np.linalg.norm(self.vertices - center, axis=1)))


class DeformedMesh(TemplateMesh):
    """Template with displaced vertices; topology and texels are shared with ``source``."""

    def __init__(self, source: TemplateMesh, vertices):
        vertices = np.asarray(vertices, dtype=np.float64)
        self.source = source
        super().__init__(vertices, source.faces, source.face_texels,
                         area_weighted_normals(vertices, np.asarray(source.faces)))

    def _build_bvh(self, tri):
        # same topology: refit the source hierarchy instead of rebuilding it
        b = self.source.bvh
        return K.refit(b.axis, b.left, b.right, b.start, b.end, b.order, tri,
                       self.face_normals, self.valid_faces)


@dataclass(frozen=True)
class SurfacePoint:
    face: int
    bary: np.ndarray
    position: np.ndarray
    normal: np.ndarray
    texel: np.ndarray
    distance: float


@dataclass(frozen=True)
class Projection:
    """Vectorised result of :func:`project_points`."""

    face: np.ndarray      # (N,)
    bary: np.ndarray      # (N, 3)
    position: np.ndarray  # (N, 3)
    normal: np.ndarray    # (N, 3)
    texel: np.ndarray     # (N, 2)
    distance: np.ndarray  # (N,)
    exact: np.ndarray     # (N,) False where the cutoff fallback was used

    def __getitem__(self, i: int) -> SurfacePoint:
        return SurfacePoint(int(self.face[i]), self.bary[i], self.position[i],
                            self.normal[i], self.texel[i], float(self.distance[i]))


# -- barycentric helpers ----------------------------------------------------

def barycentric_interp(mesh: TemplateMesh, face: int, bary) -> np.ndarray:
    if not 0 <= int(face) < mesh.n_faces:
        raise IndexError(f"face {face} out of range [0, {mesh.n_faces})")
    bary = np.asarray(bary, dtype=np.float64)
    if bary.shape != (3,):
        raise ValueError("bary must have three weights")
    if abs(bary.sum() - 1.0) > 1e-6:
        raise ValueError(f"barycentric weights sum to {bary.sum()}, expected 1")
    if np.any(bary < -1e-12):
        raise ValueError("barycentric weights must be nonnegative")
    return bary @ mesh.vertices[mesh.faces[face]]


def interp_faces(values: np.ndarray, faces: np.ndarray, face: np.ndarray, bary: np.ndarray) -> np.ndarray:
    """Interpolate per-vertex ``values`` at (face, bary) pairs."""
    return np.einsum("nc,ncd->nd", bary, values[faces[face]])


def project_points(mesh: TemplateMesh, x, max_distance: float = np.inf) -> Projection:
    """Nearest surface point for each row of ``x`` (N, 3).

    Branch-and-bound over the mesh BVH; equal-distance ties (within 1e-12)
    resolve to the lowest face index and degenerate faces are skipped. The
    result is exact for every point within ``max_distance`` of the surface;
    points beyond it get a cheap greedy estimate and ``exact=False``.
    """
    x = np.ascontiguousarray(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    b = mesh.bvh
    face, bary, dist, exact = K.nearest(x, b.lo, b.hi, b.axis, b.smin, b.smax, b.left, b.right,
                                        b.start, b.end, b.order, b.tri, b.fnormal, b.valid,
                                        float(max_distance))
    pos = np.einsum("nc,ncd->nd", bary, mesh.vertices[mesh.faces[face]])
    normal = _normalize(interp_faces(mesh.vertex_normals, mesh.faces, face, bary))
    texel = np.einsum("nc,ncd->nd", bary, mesh.face_texels[face])
    return Projection(face, bary, pos, normal, np.clip(texel, 0.0, 1.0), dist, exact)


def project_to_surface(mesh: TemplateMesh, x) -> SurfacePoint:
    return project_points(mesh, np.asarray(x, dtype=np.float64)[None])[0]


def texel_to_surface(mesh: TemplateMesh, texel):
    """Surface point for each texel, found by point location in the atlas.

    Returns (face, bary, position); texels in atlas gaps get face -1 and a
    NaN position.
    """
    q = np.ascontiguousarray(np.atleast_2d(np.asarray(texel, dtype=np.float64)))
    face, bary = K.locate_texels(q, np.ascontiguousarray(mesh.face_texels))
    pos = np.full((len(q), 3), np.nan)
    ok = face >= 0
    pos[ok] = np.einsum("nc,ncd->nd", bary[ok], mesh.vertices[mesh.faces[face[ok]]])
    return face, bary, pos


# -- deformation ------------------------------------------------------------

def deform_vertices(mesh: TemplateMesh, offsets, max_offset: float = 0.5) -> DeformedMesh:
    """Move each vertex along its normal by its offset; normals are recomputed."""
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1)
    if len(offsets) != len(mesh.vertices):
        raise ValueError(f"expected {len(mesh.vertices)} offsets, got {len(offsets)}")
    if np.any(np.abs(offsets) > max_offset):
        warnings.warn(f"offsets exceed max_offset={max_offset}; clamped", RuntimeWarning, stacklevel=2)
        offsets = np.clip(offsets, -max_offset, max_offset)
    source = mesh.source if isinstance(mesh, DeformedMesh) else mesh
    return DeformedMesh(source, mesh.vertices + offsets[:, None] * mesh.vertex_normals)


# -- ray casting ------------------------------------------------------------

def cast_rays(mesh: TemplateMesh, origins, directions):
    """First hit of each ray against the mesh (both faces count).

    Returns (t (N,), face (N,), bary (N, 3)); misses have t=inf and face=-1.
    Exact ties in t resolve to the lowest face index.
    """
    o = np.ascontiguousarray(np.atleast_2d(np.asarray(origins, dtype=np.float64)))
    d = np.ascontiguousarray(np.atleast_2d(np.asarray(directions, dtype=np.float64)))
    b = mesh.bvh
    return K.raycast(o, d, b.lo, b.hi, b.left, b.right, b.start, b.end, b.order, b.tri)


def first_hit(mesh: TemplateMesh, origin, direction):
    """Closest positive intersection of one ray, or None."""
    t, f, b = cast_rays(mesh, np.asarray(origin)[None], np.asarray(direction)[None])
    if not np.isfinite(t[0]):
        return None
    return float(t[0]), int(f[0]), b[0]


# -- templates --------------------------------------------------------------

def _orient_outward(verts, faces, texels=None):
    # valid for meshes star-shaped about the origin
    tri = verts[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = np.einsum("ij,ij->i", n, tri.mean(axis=1)) < 0
    faces = faces.copy()
    faces[flip] = faces[flip][:, [0, 2, 1]]
    if texels is None:
        return faces
    texels = texels.copy()
    texels[flip] = texels[flip][:, [0, 2, 1]]
    return faces, texels


def _icosahedron():
    z = 1.0 / np.sqrt(5.0)
    r = 2.0 / np.sqrt(5.0)
    verts = [(0.0, 0.0, 1.0)]
    verts += [(r * np.cos(2 * np.pi * i / 5), r * np.sin(2 * np.pi * i / 5), z) for i in range(5)]
    verts += [(r * np.cos(2 * np.pi * (i + 0.5) / 5), r * np.sin(2 * np.pi * (i + 0.5) / 5), -z) for i in range(5)]
    verts += [(0.0, 0.0, -1.0)]
    faces = []
    for i in range(5):
        a, b = 1 + i, 1 + (i + 1) % 5
        c, d = 6 + i, 6 + (i + 1) % 5
        faces += [(0, a, b), (a, c, b), (b, c, d), (c, 11, d)]
    return np.array(verts), np.array(faces)


def _subdivide(verts, faces):
    verts = list(map(tuple, verts))
    cache: dict[tuple[int, int], int] = {}

    def mid(i, j):
        key = (min(i, j), max(i, j))
        if key not in cache:
            m = (np.asarray(verts[i]) + np.asarray(verts[j])) / 2.0
            verts.append(tuple(m / np.linalg.norm(m)))
            cache[key] = len(verts) - 1
        return cache[key]

    out = []
    for a, b, c in faces:
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        out += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
    return np.array(verts), np.array(out)


def icosphere(level: int = 4, radius: float = 1.0) -> TemplateMesh:
    """Unit-scale icosphere with a longitude/latitude atlas.

    Faces straddling the u seam are unwrapped past 1 and the whole atlas is
    rescaled in u so every texel stays inside [0, 1]. Pole corners take the
    mean u of their face.
    """
    v, f = _icosahedron()
    for _ in range(level):
        v, f = _subdivide(v, f)
    v = v / np.linalg.norm(v, axis=1, keepdims=True)
    f = _orient_outward(v, f)
    u = (np.arctan2(v[:, 1], v[:, 0]) / (2 * np.pi)) % 1.0
    vv = np.arccos(np.clip(v[:, 2], -1, 1)) / np.pi
    pole = np.hypot(v[:, 0], v[:, 1]) < 1e-12
    fu = u[f].copy()
    span = np.where(pole[f], np.nan, fu)
    wide = (np.nanmax(span, axis=1) - np.nanmin(span, axis=1)) > 0.5
    fu[wide] = np.where(fu[wide] < 0.5, fu[wide] + 1.0, fu[wide])
    for c in range(3):
        m = pole[f[:, c]]
        others = [(c + 1) % 3, (c + 2) % 3]
        fu[m, c] = fu[m][:, others].mean(axis=1)
    fu /= fu.max()
    texels = np.stack([fu, vv[f]], axis=2)
    return TemplateMesh(v * radius, f, np.clip(texels, 0.0, 1.0), v)


def capsule(radius: float = 0.5, half_length: float = 0.5, n_lon: int = 48, n_lat: int = 32) -> TemplateMesh:
    """Capsule along z with a cylindrical atlas (u around, v along arc length)."""
    cap = np.pi * radius / 2
    total = 2 * cap + 2 * half_length
    s = np.linspace(0.0, total, n_lat + 1)[1:-1]
    rad = np.empty_like(s)
    z = np.empty_like(s)
    nrm_r = np.empty_like(s)
    nrm_z = np.empty_like(s)
    top = s < cap
    mid = (s >= cap) & (s <= cap + 2 * half_length)
    bot = s > cap + 2 * half_length
    ang = s[top] / radius
    rad[top], z[top] = radius * np.sin(ang), half_length + radius * np.cos(ang)
    nrm_r[top], nrm_z[top] = np.sin(ang), np.cos(ang)
    rad[mid], z[mid] = radius, half_length - (s[mid] - cap)
    nrm_r[mid], nrm_z[mid] = 1.0, 0.0
    ang = (s[bot] - cap - 2 * half_length) / radius
    rad[bot], z[bot] = radius * np.cos(ang), -half_length - radius * np.sin(ang)
    nrm_r[bot], nrm_z[bot] = np.cos(ang), -np.sin(ang)

    phi = 2 * np.pi * np.arange(n_lon) / n_lon
    ring = len(s)
    verts = [(0.0, 0.0, half_length + radius)]
    norms = [(0.0, 0.0, 1.0)]
    for i in range(ring):
        for p in phi:
            verts.append((rad[i] * np.cos(p), rad[i] * np.sin(p), z[i]))
            norms.append((nrm_r[i] * np.cos(p), nrm_r[i] * np.sin(p), nrm_z[i]))
    verts.append((0.0, 0.0, -half_length - radius))
    norms.append((0.0, 0.0, -1.0))
    south = len(verts) - 1
    vcoord = s / total

    def vid(i, j):
        return 1 + i * n_lon + (j % n_lon)

    faces, tex = [], []
    for j in range(n_lon):
        u0, u1 = j / n_lon, (j + 1) / n_lon
        faces.append((0, vid(0, j), vid(0, j + 1)))
        tex.append(((0.5 * (u0 + u1), 0.0), (u0, vcoord[0]), (u1, vcoord[0])))
    for i in range(ring - 1):
        for j in range(n_lon):
            u0, u1 = j / n_lon, (j + 1) / n_lon
            a, b = vid(i, j), vid(i, j + 1)
            c, d = vid(i + 1, j), vid(i + 1, j + 1)
            faces += [(a, c, b), (b, c, d)]
            tex += [((u0, vcoord[i]), (u0, vcoord[i + 1]), (u1, vcoord[i])),
                    ((u1, vcoord[i]), (u0, vcoord[i + 1]), (u1, vcoord[i + 1]))]
    for j in range(n_lon):
        u0, u1 = j / n_lon, (j + 1) / n_lon
        faces.append((south, vid(ring - 1, j + 1), vid(ring - 1, j)))
        tex.append(((0.5 * (u0 + u1), 1.0), (u1, vcoord[-1]), (u0, vcoord[-1])))
    verts = np.array(verts)
    faces, tex = _orient_outward(verts, np.array(faces), np.array(tex))
    return TemplateMesh(verts, faces, tex, np.array(norms))


def make_template(name: str, level: int = 4) -> TemplateMesh:
    if name == "sphere":
        return icosphere(level)
    if name == "capsule":
        return capsule()
    raise ValueError(f"unknown template {name!r} (expected 'sphere' or 'capsule')")


# -- OBJ subset -------------------------------------------------------------

class ObjFormatError(ValueError):
    pass


def write_obj(mesh: TemplateMesh, path: str | Path) -> None:
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    tex = mesh.face_texels.reshape(-1, 2)
    lines += [f"vt {u:.17g} {v:.17g}" for u, v in tex]
    lines += [f"vn {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertex_normals]
    for i, (a, b, c) in enumerate(mesh.faces):
        t = 3 * i + 1
        lines.append(f"f {a + 1}/{t}/{a + 1} {b + 1}/{t + 1}/{b + 1} {c + 1}/{t + 2}/{c + 1}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path: str | Path) -> TemplateMesh:
    verts, tex, norms, faces, ftex, fnorm = [], [], [], [], [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        head, *rest = line.split()
        try:
            if head == "v" and len(rest) == 3:
                verts.append([float(x) for x in rest])
            elif head == "vt" and len(rest) == 2:
                tex.append([float(x) for x in rest])
            elif head == "vn" and len(rest) == 3:
                norms.append([float(x) for x in rest])
            elif head == "f" and len(rest) == 3:
                corners = [tuple(int(i) - 1 for i in c.split("/")) for c in rest]
                if any(len(c) != 3 for c in corners):
                    raise ObjFormatError(f"line {lineno}: faces must use v/vt/vn triples")
                faces.append([c[0] for c in corners])
                ftex.append([c[1] for c in corners])
                fnorm.append([c[2] for c in corners])
            elif head == "f":
                raise ObjFormatError(f"line {lineno}: only triangular faces are supported")
            else:
                raise ObjFormatError(f"line {lineno}: unsupported directive {head!r}")
        except ValueError as exc:
            if isinstance(exc, ObjFormatError):
                raise
            raise ObjFormatError(f"line {lineno}: {exc}") from None
    faces = np.array(faces, dtype=np.int64)
    tex = np.array(tex)
    norms = np.array(norms)
    try:
        face_texels = tex[np.array(ftex)]
        vn = np.zeros((len(verts), 3))
        vn[faces.ravel()] = norms[np.array(fnorm).ravel()]
    except IndexError:
        raise ObjFormatError(f"{path}: face refers to a missing vt/vn entry") from None
    return TemplateMesh(np.array(verts), faces, face_texels, vn)
