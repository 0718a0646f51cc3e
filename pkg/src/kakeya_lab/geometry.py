"""Geometric primitives: paraboloid normals, caps, strips, tubes, oriented
parallelepipeds and their lattice tilings.

Vectors are plain numpy arrays. Frames are stored as 3x3 arrays whose rows
are the (unit) spanning vectors e1, e2, e3; a point x has local coordinates
c with x = center + c @ frame.
"""

from dataclasses import dataclass, field
from functools import cached_property
from itertools import product

import numpy as np

_TOL = 1e-9


def unit(v):
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("cannot normalize the zero vector")
    return v / n


def rotate2(v, angle):
    """Rotate a planar vector counter-clockwise by `angle` radians."""
    c, s = np.cos(angle), np.sin(angle)
    x, y = np.asarray(v, dtype=float)
    return np.array([c * x - s * y, s * x + c * y])


def perp2(v):
    x, y = np.asarray(v, dtype=float)
    return np.array([-y, x])


def paraboloid_normal(xi):
    """Unit normal direction (xi, -1)/|(xi, -1)| of the paraboloid at xi.

    Accepts a single point of shape (2,) or a stack of shape (k, 2).
    """
    xi = np.asarray(xi, dtype=float)
    v = np.concatenate([xi, -np.ones(xi.shape[:-1] + (1,))], axis=-1)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def wedge3(v1, v2, v3):
    """|v1 ^ v2 ^ v3| = |det[v1 v2 v3]|; broadcasts over leading axes."""
    m = np.stack(np.broadcast_arrays(*map(np.asarray, (v1, v2, v3))), axis=-2)
    return np.abs(np.linalg.det(m))


@dataclass(frozen=True)
class Cap:
    """Axis-parallel square of side 2**-j with lower-left vertex `corner`."""
    corner: np.ndarray
    j: int

    @property
    def side(self):
        return 2.0 ** -self.j

    @property
    def center(self):
        return np.asarray(self.corner) + self.side / 2

    def contains(self, xi):
        d = np.asarray(xi, dtype=float) - self.corner
        return np.all((d >= -_TOL * self.side) & (d <= self.side * (1 + _TOL)), axis=-1)

    def vertices(self):
        s = self.side
        return np.asarray(self.corner) + np.array([[0, 0], [s, 0], [s, s], [0, s]])


@dataclass(frozen=True)
class Strip:
    """Planar strip {xi : |xi - m - w((xi - m).w)| <= 2**-j}."""
    j: int
    w: np.ndarray
    m: np.ndarray

    @property
    def half_width(self):
        return 2.0 ** -self.j

    def offset(self, xi):
        """Signed distance from the centre line, measured along w-perp."""
        return (np.asarray(xi, dtype=float) - self.m) @ perp2(self.w)


def strip_contains(s, xi):
    d = np.asarray(xi, dtype=float) - s.m
    resid = d - np.multiply.outer(d @ s.w, s.w)
    return np.linalg.norm(resid, axis=-1) <= s.half_width


@dataclass(frozen=True)
class Tube:
    """Closed cylinder of given radius around the line anchor + s*direction."""
    direction: np.ndarray
    anchor: np.ndarray
    radius: float = 1.0

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        if abs(np.linalg.norm(d) - 1) > 1e-12:
            d = unit(d)
        object.__setattr__(self, "direction", d)
        object.__setattr__(self, "anchor", np.asarray(self.anchor, dtype=float))
        if not self.radius > 0:
            raise ValueError("tube radius must be positive")


def axis_distance(anchor, direction, p):
    """Distance from point(s) p to the line anchor + s*direction."""
    d = np.asarray(p, dtype=float) - anchor
    along = d @ direction
    resid = d - np.multiply.outer(along, direction)
    return np.linalg.norm(resid, axis=-1)


def tube_contains(t, p):
    return axis_distance(t.anchor, t.direction, p) <= t.radius


def frame_from(w, m):
    """Rows e1=(w,0), e2=(w,0)x(m,-1), e3=(m,-1), each normalized."""
    e1 = np.array([w[0], w[1], 0.0])
    e3 = np.array([m[0], m[1], -1.0])
    e2 = np.cross(e1, e3)
    if np.linalg.norm(e2) < 1e-9 or abs(np.linalg.norm(e1) - 1) > 1e-9:
        raise ValueError("degenerate parallelepiped frame")
    return np.array([unit(e1), unit(e2), unit(e3)])


@dataclass(frozen=True)
class Parallelepiped:
    """Oriented box: edge i runs along frame[i] with length 2**exponents[i]."""
    frame: np.ndarray
    exponents: np.ndarray
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "frame", np.asarray(self.frame, dtype=float))
        object.__setattr__(self, "exponents", np.asarray(self.exponents, dtype=float))
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if abs(np.linalg.det(self.frame)) < 1e-12:
            raise ValueError("frame vectors are linearly dependent")

    @property
    def lengths(self):
        return 2.0 ** self.exponents

    @property
    def volume(self):
        return float(abs(np.linalg.det(self.frame)) * np.prod(self.lengths))

    @cached_property
    def _inv(self):
        return np.linalg.inv(self.frame)

    def local(self, p):
        """Frame coordinates of point(s) p relative to the centre."""
        return (np.asarray(p, dtype=float) - self.center) @ self._inv

    def contains(self, p, tol=_TOL):
        c = self.local(p)
        return np.all(np.abs(c) <= self.lengths / 2 * (1 + tol), axis=-1)

    def corners(self):
        signs = np.array(list(product((-0.5, 0.5), repeat=3)))
        return self.center + (signs * self.lengths) @ self.frame

    def translated(self, center):
        return Parallelepiped(self.frame, self.exponents, center)

    def scaled(self, lam):
        return Parallelepiped(self.frame, self.exponents + lam, self.center)


def cube(half_side, center=(0.0, 0.0, 0.0)):
    """Axis-parallel cube [-half_side, half_side]^3 (the Q_R stand-in)."""
    return Parallelepiped(np.eye(3), np.full(3, np.log2(2 * half_side)), np.asarray(center, float))


def make_parallelepiped(j, t, w, m, E, F, lam=0.0, a=(0.0, 0.0, 0.0)):
    """Definition-2 box with exponents (Ej+t, Ej+Ft, j+t) shifted by lam."""
    if j < 0 or t < 0:
        raise ValueError("j and t must be non-negative")
    if not (0 <= E <= 1 and 0 <= F <= 1):
        raise ValueError("E and F must lie in [0, 1]")
    exps = np.array([E * j + t, E * j + F * t, j + t], dtype=float) + lam
    return Parallelepiped(frame_from(w, m), exps, np.asarray(a, dtype=float))


def _face_normals(frame):
    return np.array([np.cross(frame[1], frame[2]), np.cross(frame[2], frame[0]),
                     np.cross(frame[0], frame[1])])


def _sat_axes(fa, fb):
    axes = [*_face_normals(fa), *_face_normals(fb)]
    axes += [np.cross(a, b) for a in fa for b in fb]
    axes = np.array(axes)
    norms = np.linalg.norm(axes, axis=1)
    return axes[norms > 1e-12] / norms[norms > 1e-12, None]


def _half_extent(box, axes):
    return np.abs(axes @ (box.frame.T * box.lengths / 2)).sum(axis=1)


def boxes_overlap(a, b, centers_b=None, tol=_TOL):
    """Separating-axis test for interior overlap of parallelepipeds.

    If `centers_b` is given it holds many centres for translates of `b`
    and a boolean array is returned.
    """
    axes = _sat_axes(a.frame, b.frame)
    ra, rb = _half_extent(a, axes), _half_extent(b, axes)
    cb = np.atleast_2d(b.center if centers_b is None else centers_b)
    gap = np.abs((cb - a.center) @ axes.T)
    scale = np.maximum(ra + rb, 1.0)
    hit = np.all(gap < ra + rb - tol * scale, axis=1)
    return hit[0] if centers_b is None else hit


def _zonogon(gens2):
    """Vertices (counter-clockwise) of the zonogon sum_i [-g_i, g_i] for
    planar half-generators g_i."""
    g = np.where((gens2[:, 1] < 0) | ((gens2[:, 1] == 0) & (gens2[:, 0] < 0)), -1.0, 1.0)[:, None] * gens2
    g = g[np.argsort(np.arctan2(g[:, 1], g[:, 0]))]
    steps = np.concatenate([2 * g, -2 * g])
    return -g.sum(axis=0) + np.concatenate([np.zeros((1, 2)), np.cumsum(steps, axis=0)[:-1]])


def _polygon_distance(p, poly):
    """Distance from planar points p (n, 2) to a convex polygon (ccw)."""
    a = poly
    e = np.roll(poly, -1, axis=0) - poly
    ee = (e * e).sum(1)
    keep = ee > 1e-24 * max(ee.max(), 1e-300)
    a, e, ee = a[keep], e[keep], ee[keep]
    rel = p[:, None, :] - a[None]
    outside = (e[None, :, 0] * rel[..., 1] - e[None, :, 1] * rel[..., 0]) < 0
    u = np.clip((rel * e[None]).sum(2) / ee[None], 0.0, 1.0)
    dist = np.linalg.norm(rel - u[..., None] * e[None], axis=2).min(axis=1)
    return np.where(outside.any(axis=1), dist, 0.0)


def line_box_distance(anchors, directions, box, centers=None):
    """Exact distance between lines and a parallelepiped.

    Projects along each line direction, where the box becomes a zonogon,
    and returns the planar distance from the projected anchor to it.  If
    `centers` is given, line i is tested against the translate of `box`
    centred at centers[i].
    """
    anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
    if centers is not None:
        centers = np.atleast_2d(np.asarray(centers, dtype=float))
        anchors = np.broadcast_to(anchors, np.broadcast_shapes(anchors.shape, centers.shape))
    gens = box.frame * (box.lengths / 2)[:, None]
    q = anchors - (box.center if centers is None else centers)
    d = np.atleast_2d(np.asarray(directions, dtype=float))
    if len(d) == 1 or np.all(d == d[0]):
        # one direction: build the zonogon once, in a basis of d-perp
        d0 = d[0]
        u = unit(np.cross(d0, [1.0, 0.0, 0.0] if abs(d0[0]) < 0.9 else [0.0, 1.0, 0.0]))
        B = np.stack([u, np.cross(d0, u)], axis=1)
        return _polygon_distance(q @ B, _zonogon(gens @ B))
    d = np.broadcast_to(d, anchors.shape)
    q = q - (q * d).sum(1)[:, None] * d
    f = gens[None, :, :] - (gens[None] * d[:, None, :]).sum(2)[:, :, None] * d[:, None, :]
    signs = np.array(list(product((-1.0, 1.0), repeat=3)))
    verts = np.einsum("vk,tkc->tvc", signs, f)
    cand = q[:, None, :] - verts
    # edge normals of the zonogon: directions in the projection plane
    # orthogonal to each generator
    en = np.cross(d[:, None, :], f)
    cand = np.concatenate([cand, en, -en], axis=1)
    norms = np.linalg.norm(cand, axis=2)
    ok = norms > 1e-12
    n = np.where(ok[..., None], cand / np.where(ok, norms, 1)[..., None], 0.0)
    support = np.abs(np.einsum("tnc,tkc->tnk", n, f)).sum(2)
    vals = np.einsum("tnc,tc->tn", n, q) - support
    vals = np.where(ok, vals, -np.inf)
    return np.maximum(vals.max(axis=1), 0.0)


def tube_meets_box(tubes, box):
    """Boolean per tube: does the closed tube intersect the box."""
    if not tubes:
        return np.zeros(0, dtype=bool)
    a = np.array([t.anchor for t in tubes])
    d = np.array([t.direction for t in tubes])
    r = np.array([t.radius for t in tubes])
    return line_box_distance(a, d, box) <= r * (1 + 1e-12)


@dataclass(frozen=True)
class Tiling:
    """Lattice of translates of `prototype` along its own frame.

    `indices` are integer lattice coordinates; translate k is centred at
    host.center + (k * lengths) @ frame, so index (0,0,0) shares the host
    centre.
    """
    prototype: Parallelepiped
    host: Parallelepiped
    indices: np.ndarray

    @property
    def centers(self):
        p = self.prototype
        return self.host.center + (self.indices * p.lengths) @ p.frame

    @property
    def offsets(self):
        return self.centers - self.prototype.center

    def __len__(self):
        return len(self.indices)

    def tiles(self):
        return [self.prototype.translated(c) for c in self.centers]

    def locate(self, p):
        """Lattice index of the (half-open) translate containing each point."""
        p = np.atleast_2d(p)
        proto = self.prototype.translated(self.host.center)
        c = proto.local(p) / proto.lengths
        return np.floor(c + 0.5).astype(np.int64)


def tile(host, proto, prune=True):
    """Centre-anchored covering of `host` by translates of `proto`.

    Candidate translates come from the host's extent in the prototype frame;
    with `prune` those whose interior misses the host are dropped.
    """
    ref = proto.translated(host.center)
    c = ref.local(host.corners()) / ref.lengths
    lo, hi = c.min(axis=0), c.max(axis=0)
    kmin = np.floor(lo - 0.5 + _TOL).astype(int) + 1
    kmax = np.ceil(hi + 0.5 - _TOL).astype(int) - 1
    grids = np.meshgrid(*[np.arange(a, b + 1) for a, b in zip(kmin, kmax)], indexing="ij")
    idx = np.stack([g.ravel() for g in grids], axis=1)
    t = Tiling(proto, host, idx)
    if prune and len(idx):
        keep = boxes_overlap(host, proto, centers_b=t.centers)
        t = Tiling(proto, host, idx[keep])
    return t
