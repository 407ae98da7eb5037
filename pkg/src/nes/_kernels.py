"""Compiled inner loops for BVH queries.

Node layout (preorder, so children always have larger indices than parents):
``left``/``right`` child ids (-1 for leaves) and ``start``/``end`` ranges into
the ``order`` face permutation; every subtree covers a contiguous range.
Each node is bounded twice, by an axis-aligned box and by a slab along the
mean normal of its faces. The slab is what keeps queries from inside a
curved surface cheap: the boxes of a curved patch bulge toward its centre
of curvature, its normal slab does not.

Triangles, face normals and validity flags are stored again in BVH order
(``tri``, ``fnormal``, ``valid``) so leaves read contiguous memory.
"""

from __future__ import annotations

from typing import NamedTuple

import numba as nb
import numpy as np

TIE = 1e-12


class Bvh(NamedTuple):
    lo: np.ndarray
    hi: np.ndarray
    axis: np.ndarray
    smin: np.ndarray
    smax: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    end: np.ndarray
    order: np.ndarray
    tri: np.ndarray
    fnormal: np.ndarray
    valid: np.ndarray


def build_bvh(tri: np.ndarray, normals: np.ndarray, areas: np.ndarray, valid: np.ndarray,
              leaf_size: int = 8) -> Bvh:
    """Median-split BVH over triangles (F, 3, 3)."""
    cen = tri.mean(axis=1)
    order = np.arange(len(tri))
    left, right, start, end = [], [], [], []

    stack = [(0, len(tri), -1, False)]
    while stack:
        s, e, parent, is_right = stack.pop()
        node = len(left)
        left.append(-1)
        right.append(-1)
        start.append(s)
        end.append(e)
        if parent >= 0:
            (right if is_right else left)[parent] = node
        if e - s > leaf_size:
            idx = order[s:e]
            c = cen[idx]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            part = np.argsort(c[:, axis], kind="stable")
            order[s:e] = idx[part]
            mid = s + (e - s) // 2
            # push right first so the left subtree is numbered next (preorder)
            stack.append((mid, e, node, True))
            stack.append((s, mid, node, False))
    left = np.array(left, np.int64)
    right = np.array(right, np.int64)
    start = np.array(start, np.int64)
    end = np.array(end, np.int64)
    weighted = normals[order] * areas[order, None]
    axis = node_axes(np.ascontiguousarray(weighted), start, end)
    return refit(axis, left, right, start, end, order, tri, normals, valid)


def refit(axis, left, right, start, end, order, tri, normals, valid) -> Bvh:
    """Bounds for moved vertices over a fixed topology (axes are kept)."""
    t = np.ascontiguousarray(tri[order])
    lo, hi, smin, smax = _fit(t, axis, start, end)
    return Bvh(lo, hi, axis, smin, smax, left, right, start, end, order.astype(np.int64), t,
               np.ascontiguousarray(normals[order]), np.ascontiguousarray(valid[order]))


@nb.njit(cache=True)
def node_axes(weighted, start, end):
    m = len(start)
    axis = np.zeros((m, 3))
    for node in range(m):
        a0 = a1 = a2 = 0.0
        for k in range(start[node], end[node]):
            a0 += weighted[k, 0]
            a1 += weighted[k, 1]
            a2 += weighted[k, 2]
        nrm = np.sqrt(a0 * a0 + a1 * a1 + a2 * a2)
        if nrm < 1e-12:
            axis[node, 0] = 1.0
        else:
            axis[node, 0], axis[node, 1], axis[node, 2] = a0 / nrm, a1 / nrm, a2 / nrm
    return axis


@nb.njit(cache=True)
def _fit(tri, axis, start, end):
    m = len(start)
    lo = np.full((m, 3), np.inf)
    hi = np.full((m, 3), -np.inf)
    smin = np.full(m, np.inf)
    smax = np.full(m, -np.inf)
    for node in range(m):
        for k in range(start[node], end[node]):
            for c in range(3):
                s = 0.0
                for a in range(3):
                    x = tri[k, c, a]
                    s += x * axis[node, a]
                    if x < lo[node, a]:
                        lo[node, a] = x
                    if x > hi[node, a]:
                        hi[node, a] = x
                if s < smin[node]:
                    smin[node] = s
                if s > smax[node]:
                    smax[node] = s
    return lo, hi, smin, smax


@nb.njit(cache=True, inline="always")
def _bound2(p0, p1, p2, lo, hi, axis, smin, smax, node):
    """Squared lower bound on the distance from p to anything in ``node``."""
    d = 0.0
    if p0 < lo[node, 0]:
        d += (lo[node, 0] - p0) ** 2
    elif p0 > hi[node, 0]:
        d += (p0 - hi[node, 0]) ** 2
    if p1 < lo[node, 1]:
        d += (lo[node, 1] - p1) ** 2
    elif p1 > hi[node, 1]:
        d += (p1 - hi[node, 1]) ** 2
    if p2 < lo[node, 2]:
        d += (lo[node, 2] - p2) ** 2
    elif p2 > hi[node, 2]:
        d += (p2 - hi[node, 2]) ** 2
    s = p0 * axis[node, 0] + p1 * axis[node, 1] + p2 * axis[node, 2]
    g = 0.0
    if s < smin[node]:
        g = smin[node] - s
    elif s > smax[node]:
        g = s - smax[node]
    return max(d, g * g)


@nb.njit(cache=True, inline="always")
def _closest_on_triangle(p0, p1, p2, a0, a1, a2, b0, b1, b2, c0, c1, c2):
    """Ericson's closest-point region test; returns barycentrics."""
    ab0, ab1, ab2 = b0 - a0, b1 - a1, b2 - a2
    ac0, ac1, ac2 = c0 - a0, c1 - a1, c2 - a2
    ap0, ap1, ap2 = p0 - a0, p1 - a1, p2 - a2
    d1 = ab0 * ap0 + ab1 * ap1 + ab2 * ap2
    d2 = ac0 * ap0 + ac1 * ap1 + ac2 * ap2
    if d1 <= 0.0 and d2 <= 0.0:
        return 1.0, 0.0, 0.0
    bp0, bp1, bp2 = p0 - b0, p1 - b1, p2 - b2
    d3 = ab0 * bp0 + ab1 * bp1 + ab2 * bp2
    d4 = ac0 * bp0 + ac1 * bp1 + ac2 * bp2
    if d3 >= 0.0 and d4 <= d3:
        return 0.0, 1.0, 0.0
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return 1.0 - v, v, 0.0
    cp0, cp1, cp2 = p0 - c0, p1 - c1, p2 - c2
    d5 = ab0 * cp0 + ab1 * cp1 + ab2 * cp2
    d6 = ac0 * cp0 + ac1 * cp1 + ac2 * cp2
    if d6 >= 0.0 and d5 <= d6:
        return 0.0, 0.0, 1.0
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return 1.0 - w, 0.0, w
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return 0.0, 1.0 - w, w
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return 1.0 - v - w, v, w


@nb.njit(cache=True, inline="always")
def _leaf_dist(p0, p1, p2, tri, k):
    a0, a1, a2 = tri[k, 0, 0], tri[k, 0, 1], tri[k, 0, 2]
    b0, b1, b2 = tri[k, 1, 0], tri[k, 1, 1], tri[k, 1, 2]
    c0, c1, c2 = tri[k, 2, 0], tri[k, 2, 1], tri[k, 2, 2]
    w0, w1, w2 = _closest_on_triangle(p0, p1, p2, a0, a1, a2, b0, b1, b2, c0, c1, c2)
    q0 = w0 * a0 + w1 * b0 + w2 * c0
    q1 = w0 * a1 + w1 * b1 + w2 * c1
    q2 = w0 * a2 + w1 * b2 + w2 * c2
    return np.sqrt((p0 - q0) ** 2 + (p1 - q1) ** 2 + (p2 - q2) ** 2), w0, w1, w2


@nb.njit(cache=True, nogil=True)
def nearest(points, lo, hi, axis, smin, smax, left, right, start, end, order, tri, fnormal, valid,
            max_dist):
    """Exact nearest face for points within ``max_dist`` of the mesh.

    Points with nothing inside the cutoff fall back to a greedy descent and
    are reported with ``exact=False``.
    """
    n = len(points)
    face_out = np.full(n, -1, np.int64)
    bary_out = np.zeros((n, 3))
    dist_out = np.full(n, np.inf)
    exact = np.ones(n, np.bool_)
    stack = np.empty(128, np.int64)
    bound = np.empty(128)
    for i in range(n):
        p0, p1, p2 = points[i, 0], points[i, 1], points[i, 2]
        best = max_dist
        best_f = -1
        b0 = b1 = b2 = 0.0
        stack[0] = 0
        bound[0] = 0.0
        top = 1
        while top > 0:
            top -= 1
            node = stack[top]
            if bound[top] > (best + TIE) * (best + TIE):
                continue
            if left[node] < 0:
                for k in range(start[node], end[node]):
                    if not valid[k]:
                        continue
                    # distance to the supporting plane is a cheap lower bound
                    pd = ((p0 - tri[k, 0, 0]) * fnormal[k, 0] + (p1 - tri[k, 0, 1]) * fnormal[k, 1]
                          + (p2 - tri[k, 0, 2]) * fnormal[k, 2])
                    if abs(pd) > best + TIE:
                        continue
                    d, w0, w1, w2 = _leaf_dist(p0, p1, p2, tri, k)
                    f = order[k]
                    # distances within TIE are ties; the lowest face index wins
                    if d < best - TIE or (d <= best + TIE and (f < best_f or best_f < 0)):
                        best = d
                        best_f = f
                        b0, b1, b2 = w0, w1, w2
            else:
                l, r = left[node], right[node]
                dl = _bound2(p0, p1, p2, lo, hi, axis, smin, smax, l)
                dr = _bound2(p0, p1, p2, lo, hi, axis, smin, smax, r)
                if dl <= dr:
                    stack[top], bound[top] = r, dr
                    stack[top + 1], bound[top + 1] = l, dl
                else:
                    stack[top], bound[top] = l, dl
                    stack[top + 1], bound[top + 1] = r, dr
                top += 2
        if best_f < 0:
            exact[i] = False
            node = 0
            while left[node] >= 0:
                l, r = left[node], right[node]
                if (_bound2(p0, p1, p2, lo, hi, axis, smin, smax, l)
                        <= _bound2(p0, p1, p2, lo, hi, axis, smin, smax, r)):
                    node = l
                else:
                    node = r
            best = np.inf
            for k in range(start[node], end[node]):
                if not valid[k]:
                    continue
                d, w0, w1, w2 = _leaf_dist(p0, p1, p2, tri, k)
                if d < best:
                    best = d
                    best_f = order[k]
                    b0, b1, b2 = w0, w1, w2
        face_out[i] = best_f
        bary_out[i, 0], bary_out[i, 1], bary_out[i, 2] = b0, b1, b2
        dist_out[i] = best
    return face_out, bary_out, dist_out, exact


@nb.njit(cache=True)
def _slab(o, inv, lo, hi, node, tmax):
    tn = 0.0
    tf = tmax
    for a in range(3):
        if inv[a] == np.inf or inv[a] == -np.inf:
            if o[a] < lo[node, a] or o[a] > hi[node, a]:
                return False
            continue
        t1 = (lo[node, a] - o[a]) * inv[a]
        t2 = (hi[node, a] - o[a]) * inv[a]
        if t1 > t2:
            t1, t2 = t2, t1
        if t1 > tn:
            tn = t1
        if t2 < tf:
            tf = t2
        if tn > tf:
            return False
    return True


@nb.njit(cache=True, nogil=True)
def raycast(origins, directions, lo, hi, left, right, start, end, order, tri):
    n = len(origins)
    t_out = np.full(n, np.inf)
    f_out = np.full(n, -1, np.int64)
    b_out = np.zeros((n, 3))
    stack = np.empty(128, np.int64)
    inv = np.empty(3)
    for i in range(n):
        o = origins[i]
        d = directions[i]
        for a in range(3):
            inv[a] = 1.0 / d[a] if d[a] != 0.0 else np.inf
        best = np.inf
        best_f = -1
        bu = bv = 0.0
        stack[0] = 0
        top = 1
        while top > 0:
            top -= 1
            node = stack[top]
            if not _slab(o, inv, lo, hi, node, best):
                continue
            if left[node] < 0:
                for k in range(start[node], end[node]):
                    f = order[k]
                    e10 = tri[k, 1, 0] - tri[k, 0, 0]
                    e11 = tri[k, 1, 1] - tri[k, 0, 1]
                    e12 = tri[k, 1, 2] - tri[k, 0, 2]
                    e20 = tri[k, 2, 0] - tri[k, 0, 0]
                    e21 = tri[k, 2, 1] - tri[k, 0, 1]
                    e22 = tri[k, 2, 2] - tri[k, 0, 2]
                    px = d[1] * e22 - d[2] * e21
                    py = d[2] * e20 - d[0] * e22
                    pz = d[0] * e21 - d[1] * e20
                    det = e10 * px + e11 * py + e12 * pz
                    if abs(det) < 1e-14:
                        continue
                    idet = 1.0 / det
                    tx = o[0] - tri[k, 0, 0]
                    ty = o[1] - tri[k, 0, 1]
                    tz = o[2] - tri[k, 0, 2]
                    u = (tx * px + ty * py + tz * pz) * idet
                    if u < 0.0 or u > 1.0:
                        continue
                    qx = ty * e12 - tz * e11
                    qy = tz * e10 - tx * e12
                    qz = tx * e11 - ty * e10
                    v = (d[0] * qx + d[1] * qy + d[2] * qz) * idet
                    if v < 0.0 or u + v > 1.0:
                        continue
                    t = (e20 * qx + e21 * qy + e22 * qz) * idet
                    if t <= 0.0:
                        continue
                    if t < best or (t == best and f < best_f):
                        best = t
                        best_f = f
                        bu, bv = u, v
            else:
                stack[top] = right[node]
                stack[top + 1] = left[node]
                top += 2
        t_out[i] = best
        f_out[i] = best_f
        b_out[i, 0], b_out[i, 1], b_out[i, 2] = 1.0 - bu - bv, bu, bv
    return t_out, f_out, b_out


@nb.njit(cache=True)
def locate_texels(q, face_texels):
    """Face and barycentrics of each texel inside the atlas; face -1 if in a gap.

    Texels on a shared atlas edge resolve to the lowest face index.
    """
    n = len(q)
    face = np.full(n, -1, np.int64)
    bary = np.zeros((n, 3))
    eps = 1e-12
    for f in range(len(face_texels)):
        u0, v0 = face_texels[f, 0, 0], face_texels[f, 0, 1]
        u1, v1 = face_texels[f, 1, 0], face_texels[f, 1, 1]
        u2, v2 = face_texels[f, 2, 0], face_texels[f, 2, 1]
        det = (u1 - u0) * (v2 - v0) - (u2 - u0) * (v1 - v0)
        if abs(det) < 1e-18:
            continue
        umin, umax = min(u0, u1, u2) - eps, max(u0, u1, u2) + eps
        vmin, vmax = min(v0, v1, v2) - eps, max(v0, v1, v2) + eps
        for i in range(n):
            if face[i] >= 0:
                continue
            u, v = q[i, 0], q[i, 1]
            if u < umin or u > umax or v < vmin or v > vmax:
                continue
            b1 = ((u - u0) * (v2 - v0) - (u2 - u0) * (v - v0)) / det
            b2 = ((u1 - u0) * (v - v0) - (u - u0) * (v1 - v0)) / det
            b0 = 1.0 - b1 - b2
            if b0 >= -eps and b1 >= -eps and b2 >= -eps:
                face[i] = f
                bary[i, 0], bary[i, 1], bary[i, 2] = b0, b1, b2
    return face, bary
