"""Discrete evaluation of the trilinear functional

    I(region) = integral over region of prod_n (sum_{T in family n} chi_T)^(1/2)

as a centre-sampled Riemann sum on a cubic voxel grid.

Counts are kept sparse: for every family the linear indices of voxels with a
positive count and the counts themselves.  Rasterization walks each tube
layer by layer along its dominant axis and tests only the voxels in a small
window around the axis, so the cost is proportional to the number of
tube-voxel incidences rather than voxels x tubes.
"""

import math
import struct
from dataclasses import dataclass

import numpy as np

from .geometry import Parallelepiped, axis_distance, boxes_overlap, line_box_distance

DEFAULT_BUDGET = 2 ** 40
DENSE_LIMIT = 2 ** 27


@dataclass(frozen=True)
class Grid:
    origin: np.ndarray
    h: float
    dims: tuple

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if not self.h > 0:
            raise ValueError("voxel size must be positive")
        if any(d < 1 for d in self.dims):
            raise ValueError("grid dims must be at least 1")

    @property
    def size(self):
        return int(np.prod(self.dims, dtype=np.int64))

    @property
    def upper(self):
        return self.origin + self.h * np.array(self.dims)

    def centers(self, idx):
        """Centres of voxels with integer index triples idx (k, 3)."""
        return self.origin + (np.asarray(idx) + 0.5) * self.h

    def ravel(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return (idx[..., 0] * self.dims[1] + idx[..., 1]) * self.dims[2] + idx[..., 2]

    def unravel(self, lin):
        return np.stack(np.unravel_index(np.asarray(lin, dtype=np.int64), self.dims), axis=-1)

    def describe(self):
        return {"origin": self.origin.tolist(), "h": self.h, "dims": list(self.dims)}

    @classmethod
    def covering(cls, region, h, budget=DEFAULT_BUDGET):
        """Smallest grid of spacing h, aligned to multiples of h, covering
        the bounding box of `region`."""
        lo, hi = region_bounds(region)
        lo_i = np.floor(lo / h + 1e-9)
        hi_i = np.ceil(hi / h - 1e-9)
        dims = np.maximum(hi_i - lo_i, 1).astype(np.int64)
        g = cls(lo_i * h, h, tuple(dims))
        check_budget(g, budget)
        return g


def check_budget(g, budget):
    if g.size > budget:
        raise MemoryError(f"voxel budget exceeded: grid needs {g.size} voxels, budget is {budget}")


# --- regions -----------------------------------------------------------------

class CellUnion:
    """Union of pairwise disjoint parallelepipeds; membership is half-open
    so that shared faces are counted once."""

    def __init__(self, cells):
        self.cells = list(cells)

    def contains(self, p):
        p = np.atleast_2d(p)
        out = np.zeros(len(p), dtype=bool)
        for c in self.cells:
            out |= contains_halfopen(c, p)
        return out

    @property
    def volume(self):
        return sum(c.volume for c in self.cells)


class Intersection:
    """Intersection of regions (membership and volume by the members)."""

    def __init__(self, *parts):
        self.parts = parts

    def contains(self, p):
        out = np.ones(len(np.atleast_2d(p)), dtype=bool)
        for r in self.parts:
            out &= region_contains(r, p)
        return out

    def bounds(self):
        b = [region_bounds(r) for r in self.parts]
        lo = np.max([x[0] for x in b], axis=0)
        return lo, np.maximum(lo, np.min([x[1] for x in b], axis=0))

    @property
    def volume(self):
        """Smallest member volume: an upper bound, exact when one member
        contains the others."""
        return min(region_volume(r) for r in self.parts)


def contains_halfopen(box, p):
    c = box.local(np.atleast_2d(p)) / box.lengths
    return np.all((c >= -0.5) & (c < 0.5), axis=-1)


def region_contains(region, p):
    if region is None:
        return np.ones(len(np.atleast_2d(p)), dtype=bool)
    if isinstance(region, Parallelepiped):
        return contains_halfopen(region, p)
    return region.contains(p)


def region_bounds(region):
    if isinstance(region, Parallelepiped):
        c = region.corners()
        return c.min(axis=0), c.max(axis=0)
    if isinstance(region, CellUnion):
        b = [region_bounds(c) for c in region.cells]
        return np.min([x[0] for x in b], axis=0), np.max([x[1] for x in b], axis=0)
    return region.bounds()


def region_volume(region):
    return region.volume


# --- counts ------------------------------------------------------------------

@dataclass
class CountField:
    """Sparse per-family voxel counts: `index[n]` (sorted linear voxel
    indices with positive count) and `count[n]`."""
    grid: Grid
    index: tuple
    count: tuple
    region: object = None
    complete: bool = True

    def dense(self):
        if self.grid.size > DENSE_LIMIT:
            raise MemoryError(f"dense export needs {self.grid.size} voxels")
        out = np.zeros((3, self.grid.size), dtype=np.uint32)
        for n in range(3):
            out[n, self.index[n]] = self.count[n]
        return out.reshape((3,) + self.grid.dims)

    @property
    def counts(self):
        return self.dense()

    def dump(self, path):
        """Binary export: dims (3 x uint32), h (float64), origin (3 x float64),
        then three row-major uint32 count arrays, all little-endian."""
        d = self.dense()
        with open(path, "wb") as fh:
            fh.write(struct.pack("<3I", *self.grid.dims))
            fh.write(struct.pack("<d", self.grid.h))
            fh.write(struct.pack("<3d", *self.grid.origin))
            fh.write(d.astype("<u4").tobytes(order="C"))


def load_counts(path):
    with open(path, "rb") as fh:
        dims = struct.unpack("<3I", fh.read(12))
        h, = struct.unpack("<d", fh.read(8))
        origin = struct.unpack("<3d", fh.read(24))
        data = np.frombuffer(fh.read(), dtype="<u4").reshape((3,) + dims)
    return Grid(np.array(origin), h, dims), data


def _tube_voxels(g, anchor, d, radius, layer_range=None, allowed=None):
    """Linear indices of grid voxels whose centre lies in the tube
    (restricted to voxels where `allowed(idx)` holds, if given)."""
    a = int(np.argmax(np.abs(d)))
    b, c = [k for k in range(3) if k != a]
    h, o = g.h, g.origin
    lo, hi = 0, g.dims[a] - 1
    if layer_range is not None:
        lo, hi = max(lo, layer_range[0]), min(hi, layer_range[1])
    if lo > hi:
        return np.zeros(0, dtype=np.int64)
    # a tube cross-section in a plane x_a = z is an ellipse inside the disc
    # of radius r/|d_a| around the axis point
    rho = radius / abs(d[a])
    # skip layers where the window misses the grid in b or c
    z = o[a] + (np.arange(lo, hi + 1) + 0.5) * h
    s = (z - anchor[a]) / d[a]
    pb = anchor[b] + s * d[b]
    pc = anchor[c] + s * d[c]
    ib0 = np.floor((pb - rho - o[b]) / h - 0.5).astype(np.int64)
    ic0 = np.floor((pc - rho - o[c]) / h - 0.5).astype(np.int64)
    W = int(np.floor(2 * rho / h)) + 3
    keep = ((ib0 + W > 0) & (ib0 < g.dims[b]) & (ic0 + W > 0) & (ic0 < g.dims[c]))
    if not keep.any():
        return np.zeros(0, dtype=np.int64)
    layers = np.arange(lo, hi + 1)[keep]
    ib0, ic0 = ib0[keep], ic0[keep]
    off = np.arange(W)
    L = len(layers)
    ia = np.broadcast_to(layers[:, None, None], (L, W, W))
    ib = ib0[:, None, None] + off[None, :, None]
    ic = ic0[:, None, None] + off[None, None, :]
    ib, ic = np.broadcast_to(ib, (L, W, W)), np.broadcast_to(ic, (L, W, W))
    ok = (ib >= 0) & (ib < g.dims[b]) & (ic >= 0) & (ic < g.dims[c])
    idx = np.empty((int(ok.sum()), 3), dtype=np.int64)
    idx[:, a], idx[:, b], idx[:, c] = ia[ok], ib[ok], ic[ok]
    if allowed is not None:
        idx = idx[allowed(idx)]
    inside = axis_distance(anchor, d, g.centers(idx)) <= radius
    return g.ravel(idx[inside])


def _family_counts(g, arrays, region, layer_ranges=None, allowed=None):
    anchors, dirs, radii = arrays
    parts = []
    for i in range(len(anchors)):
        lr = None if layer_ranges is None else layer_ranges[i]
        if layer_ranges is not None and lr is None:
            continue
        parts.append(_tube_voxels(g, anchors[i], dirs[i], radii[i], lr, allowed))
    if not parts:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    lin = np.concatenate(parts)
    if region is not None and len(lin):
        ulin = np.unique(lin)
        inside = region_contains(region, g.centers(g.unravel(ulin)))
        lin = lin[np.isin(lin, ulin[inside])]
    idx, cnt = np.unique(lin, return_counts=True)
    return idx, cnt


def rasterize(f, region=None, g=None, h=0.25, budget=DEFAULT_BUDGET, coarse=None):
    """Per-family voxel counts of the tube union, restricted to `region`.

    With `coarse` (an integer factor), a conservative coarse pass first finds
    the coarse cells met by all three families; the fine pass then only
    visits voxels inside those cells.  Voxels outside them contribute
    nothing to the trilinear integral, but their counts are omitted, so the
    resulting field is marked incomplete.
    """
    if g is None:
        if region is None:
            raise ValueError("need a region or a grid")
        g = Grid.covering(region, h, budget)
    check_budget(g, budget)
    arrays = [f.arrays(n) for n in range(3)]
    if coarse is None or coarse <= 1:
        idx, cnt = zip(*[_family_counts(g, arr, region) for arr in arrays])
        return CountField(g, idx, cnt, region)
    k = int(coarse)
    H = g.h * k
    cg = Grid(g.origin, H, tuple(-(-np.array(g.dims) // k)))
    pad = np.sqrt(3) * H / 2
    per_tube, hit = [], []
    for anchors, dirs, radii in arrays:
        cells = [_tube_voxels(cg, a, d, r + pad) for a, d, r in zip(anchors, dirs, radii)]
        per_tube.append(cells)
        hit.append(np.unique(np.concatenate(cells)) if cells else np.zeros(0, np.int64))
    live = np.intersect1d(np.intersect1d(hit[0], hit[1]), hit[2])
    if not len(live):
        empty = tuple(np.zeros(0, np.int64) for _ in range(3))
        return CountField(g, empty, empty, region, complete=False)
    out_idx, out_cnt = [], []
    for (anchors, dirs, radii), cells in zip(arrays, per_tube):
        ranges = []
        for i, cl in enumerate(cells):
            cl = cl[np.isin(cl, live)]
            if not len(cl):
                ranges.append(None)
                continue
            a = int(np.argmax(np.abs(dirs[i])))
            la = cg.unravel(cl)[:, a]
            ranges.append((int(la.min()) * k, int(la.max()) * k + k - 1))

        def allowed(idx):
            cl = cg.ravel(idx // k)
            pos = np.minimum(np.searchsorted(live, cl), len(live) - 1)
            return live[pos] == cl
        idx, cnt = _family_counts(g, (anchors, dirs, radii), region, ranges, allowed)
        out_idx.append(idx)
        out_cnt.append(cnt)
    return CountField(g, tuple(out_idx), tuple(out_cnt), region, complete=False)


def rasterize_naive(f, g, region=None):
    """O(voxels x tubes) reference: dense counts by testing every voxel
    centre against every tube."""
    idx = np.stack(np.meshgrid(*[np.arange(d) for d in g.dims], indexing="ij"), -1).reshape(-1, 3)
    p = g.centers(idx)
    inside = region_contains(region, p)
    out = np.zeros((3, len(p)), dtype=np.int64)
    for n in range(3):
        for t in f.families[n]:
            out[n] += (axis_distance(t.anchor, t.direction, p) <= t.radius) & inside
    return out.reshape((3,) + g.dims)


@dataclass(frozen=True)
class IntegralResult:
    value: float
    region_volume: float
    grid: dict


def _triple(cf):
    common = np.intersect1d(np.intersect1d(cf.index[0], cf.index[1]), cf.index[2])
    c = [cf.count[n][np.searchsorted(cf.index[n], common)] for n in range(3)]
    return common, c


def trilinear_integral(cf, region=None):
    """h^3 * sum over voxels in region of prod_n count_n^(1/2)."""
    common, c = _triple(cf)
    if region is not None and len(common):
        keep = region_contains(region, cf.grid.centers(cf.grid.unravel(common)))
        c = [x[keep] for x in c]
    terms = np.sqrt(c[0] * c[1] * c[2].astype(float)) if len(common) else np.zeros(0)
    # c0*c1*c2 is exact in int64/float64 for desk-scale counts
    val = math.fsum(terms.tolist()) * cf.grid.h ** 3
    vol = region_volume(region) if region is not None else (
        region_volume(cf.region) if cf.region is not None else cf.grid.size * cf.grid.h ** 3)
    return IntegralResult(val, vol, cf.grid.describe())


def triple_terms(cf):
    """(voxel centres, prod count^(1/2)) for voxels met by all families."""
    common, c = _triple(cf)
    return cf.grid.centers(cf.grid.unravel(common)), np.sqrt(c[0] * c[1] * c[2].astype(float))


def bilinear_integral(cf, a, b, region=None):
    """h^3 * sum over voxels of count_a * count_b (optionally restricted)."""
    common = np.intersect1d(cf.index[a], cf.index[b])
    ca = cf.count[a][np.searchsorted(cf.index[a], common)].astype(float)
    cb = cf.count[b][np.searchsorted(cf.index[b], common)].astype(float)
    if region is not None and len(common):
        keep = region_contains(region, cf.grid.centers(cf.grid.unravel(common)))
        ca, cb = ca[keep], cb[keep]
    return math.fsum((ca * cb).tolist()) * cf.grid.h ** 3


def integrate(f, region, h=0.25, budget=DEFAULT_BUDGET, coarse=None):
    cf = rasterize(f, region, h=h, budget=budget, coarse=coarse)
    return trilinear_integral(cf, region)


def cells_disjoint(cells):
    for i in range(len(cells)):
        for k in range(i + 1, len(cells)):
            if boxes_overlap(cells[i], cells[k]):
                return False
    return True


def integral_over_Bsets(f, cells, g=None, h=0.25, budget=DEFAULT_BUDGET):
    """Sum of the integral over pairwise disjoint cells."""
    cells = list(cells)
    if not cells:
        return IntegralResult(0.0, 0.0, g.describe() if g is not None else {})
    if not cells_disjoint(cells):
        raise ValueError("cells overlap")
    union = CellUnion(cells)
    cf = rasterize(f, union, g=g, h=h, budget=budget)
    centers, terms = triple_terms(cf)
    parts = []
    for c in cells:
        parts.append(math.fsum(terms[contains_halfopen(c, centers)].tolist()))
    return IntegralResult(math.fsum(parts) * cf.grid.h ** 3, union.volume, cf.grid.describe())


def restricted_tube_count(f, region):
    """|T_n(region)| via the exact tube-box distance test."""
    return tuple(int(tube_hits(f, n, region).sum()) for n in range(3))


def tube_hits(f, n, region):
    """Boolean mask over family n: tube meets region (box or cell union)."""
    anchors, dirs, radii = f.arrays(n)
    if not len(anchors):
        return np.zeros(0, dtype=bool)
    cells = region.cells if isinstance(region, CellUnion) else [region]
    out = np.zeros(len(anchors), dtype=bool)
    for c in cells:
        out |= line_box_distance(anchors, dirs, c) <= radii * (1 + 1e-12)
    return out
