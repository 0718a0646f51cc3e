"""Scale schedule, dyadic bucketing, density profile and refinement factors.

All parallelepiped levels used by the construction are cells of one nested
dyadic lattice in the frame of the arrangement: a level is described by
three integer exponents (edge lengths 2^e along e1, e2, e3) and a cell by its
integer key.  With a shared origin offset, the key of a cell at a coarser
level is the finer key shifted right by the exponent difference, so every
"#{cells of level A inside a cell of level B}" census is a group-by on keys.

Per scale s (lam = M_s j + N_s t, E, F the increments to scale s+1):

    U  (unit)  lam + (0, 0, 0)
    P2         lam + (0, 0, r)
    P1         lam + (0, 0, j)
    P          lam + (t, 0, j+t)
    P4         lam + (Ej+t, Ej, j+t)
    P3         lam + (Ej+t, Ej+Ft, j+t)

and U ⊂ P2 ⊂ P1 ⊂ P ⊂ P4 ⊂ P3 ⊂ P(s+1).
"""

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .geometry import Parallelepiped, boxes_overlap, cube, frame_from, line_box_distance

_B = 1 << 20  # key offset for packing


# --- schedule ----------------------------------------------------------------

@dataclass(frozen=True)
class ScaleSchedule:
    """Per-scale M_s, N_s (s = 1..S, stored 0-based) and increments E_s, F_s."""
    r: int
    j: int
    t: int
    epsilon: float
    M: tuple
    N: tuple
    E: tuple
    F: tuple
    log2R: int

    @property
    def S(self):
        return len(self.M)

    @property
    def R(self):
        return 2.0 ** self.log2R

    def lam(self, s):
        v = self.M[s - 1] * self.j + self.N[s - 1] * self.t
        return int(round(v))

    def inc(self, s):
        """(E, F) used by the level structure at scale s (increments to s+1)."""
        return self.E[s], self.F[s]

    def levels(self, s):
        lam, j, t, r = self.lam(s), self.j, self.t, self.r
        lv = {"U": (0, 0, 0), "P2": (0, 0, r), "P1": (0, 0, j), "P": (t, 0, j + t)}
        if s < self.S:
            E, F = self.inc(s)
            Ej, Ft = int(round(E * j)), int(round(F * t))
            lv["P4"] = (Ej + t, Ej, j + t)
            lv["P3"] = (Ej + t, Ej + Ft, j + t)
        return {k: np.array(v, dtype=np.int64) + lam for k, v in lv.items()}

    def violations(self):
        """List of violated schedule invariants (empty when valid)."""
        out = []
        if self.S < 2:
            out.append("S must be at least 2")
        if self.M[0] != 0 or self.N[0] != 0:
            out.append("M_1 = N_1 = 0 required")
        if self.E[0] != 1 or self.F[0] != 1 or self.E[-1] != 1 or self.F[-1] != 1:
            out.append("E_1 = F_1 = E_S = F_S = 1 required")
        lo_m = max(self.epsilon, self.r / self.j)
        for s in range(1, self.S - 1):
            dm, dn = self.M[s] - self.M[s - 1], self.N[s] - self.N[s - 1]
            if not lo_m - 1e-12 <= dm <= 1 + 1e-12:
                out.append(f"M increment {dm:g} at s={s + 1} outside [{lo_m:g}, 1]")
            if not self.epsilon - 1e-12 <= dn <= 1 + 1e-12:
                out.append(f"N increment {dn:g} at s={s + 1} outside [{self.epsilon:g}, 1]")
            if abs(dm - self.E[s]) > 1e-12 or abs(dn - self.F[s]) > 1e-12:
                out.append(f"E/F at s={s + 1} differ from the M/N increments")
        top = self.M[-2] * self.j + self.N[-2] * self.t + self.j + self.t
        if abs(top - self.log2R) > 1e-9:
            out.append("top scale does not reach log2 R")
        for s in range(1, self.S + 1):
            lam = self.M[s - 1] * self.j + self.N[s - 1] * self.t
            if abs(lam - round(lam)) > 1e-9:
                out.append(f"non-integer scale exponent at s={s}")
        return out


def build_schedule(params, R, epsilon=None):
    """Equal-increment schedule reaching log2 R at the top scale.

    M grows by E = max(eps, r/j) and N by F = eps, each rounded up so that
    E*j and F*t are integers.  The top condition
    M_{S-1} j + N_{S-1} t + (j + t) = log2 R is met by rounding R up.
    """
    r, j, t = params.r, params.j, params.t
    eps = params.epsilon if epsilon is None else epsilon
    if j < 1:
        raise ValueError("build_schedule needs j >= 1")
    if not 0 < eps <= 1:
        raise ValueError("epsilon must lie in (0, 1]")
    if R < 2.0 ** (j + t):
        raise ValueError("R must be at least 2^(j+t)")
    E = min(1.0, math.ceil(max(eps, r / j) * j - 1e-9) / j)
    F = min(1.0, math.ceil(eps * t - 1e-9) / t) if t > 0 else eps
    step = round(E * j + F * t)
    span = math.ceil(math.log2(R) - 1e-9) - (j + t)
    k = max(0, -(-span // step))  # number of middle steps
    M = [0.0] + [E * i for i in range(1, k + 1)]
    N = [0.0] + [F * i for i in range(1, k + 1)]
    M.append(M[-1] + 1.0)
    N.append(N[-1] + 1.0)
    Es = [1.0] + [E] * k + [1.0]
    Fs = [1.0] + [F] * k + [1.0]
    log2R = k * step + j + t
    # E[s-1] / F[s-1] hold the increment from scale s-1 to s (E_1 = 1 by
    # convention); the level structure at scale s uses E[s], F[s].
    return ScaleSchedule(r, j, t, eps, tuple(M), tuple(N), tuple(Es), tuple(Fs), int(log2R))


# --- lattice -----------------------------------------------------------------

def pack(keys):
    k = np.asarray(keys, dtype=np.int64) + _B
    return (k[..., 0] << 42) | (k[..., 1] << 21) | k[..., 2]


def unpack(p):
    p = np.asarray(p, dtype=np.int64)
    m = (1 << 21) - 1
    return np.stack([(p >> 42) & m, (p >> 21) & m, p & m], axis=-1) - _B


def shift(packed, de):
    """Packed keys at a level, re-keyed at a level coarser by `de`."""
    return pack(unpack(packed) >> np.asarray(de, dtype=np.int64))


@dataclass(frozen=True)
class CellLattice:
    """Nested dyadic lattice in an (oblique) frame.  A point x has frame
    coordinates c with x = c @ frame; its unit key is floor(c - offset)."""
    frame: np.ndarray
    offset: np.ndarray

    @property
    def finv(self):
        return np.linalg.inv(self.frame)

    def unit_keys(self, p):
        return np.floor(np.atleast_2d(p) @ self.finv - self.offset).astype(np.int64)

    def keys(self, p, exps):
        return self.unit_keys(p) >> np.asarray(exps, dtype=np.int64)

    def centers(self, exps, keys):
        L = 2.0 ** np.asarray(exps, dtype=float)
        c = self.offset + (np.asarray(keys, dtype=float) + 0.5) * L
        return c @ self.frame

    def proto(self, exps):
        return Parallelepiped(self.frame, np.asarray(exps, dtype=float))

    def cell(self, exps, key):
        return Parallelepiped(self.frame, np.asarray(exps, dtype=float),
                              self.centers(exps, np.asarray(key)[None])[0])


def lattice_for(params, schedule):
    """Frame of the arrangement, with the origin offset chosen so the
    coarsest level is centred on the origin (the centre of Q_R)."""
    frame = frame_from(np.asarray(params.w), np.asarray(params.m))
    top = np.max([e for s in range(1, schedule.S + 1) for e in schedule.levels(s).values()], axis=0)
    return CellLattice(frame, -(2.0 ** top) / 2)


class CellRegion:
    """Union of lattice cells at one level, intersected with Q_R."""

    def __init__(self, lattice, exps, packed, box=None):
        self.lattice = lattice
        self.exps = np.asarray(exps, dtype=np.int64)
        self.packed = np.unique(np.asarray(packed, dtype=np.int64))
        self.box = box

    def __len__(self):
        return len(self.packed)

    def contains(self, p):
        p = np.atleast_2d(p)
        inside = np.isin(pack(self.lattice.keys(p, self.exps)), self.packed)
        if self.box is not None:
            c = self.box.local(p) / self.box.lengths
            inside &= np.all((c >= -0.5) & (c < 0.5), axis=-1)
        return inside

    def cells(self):
        keys = unpack(self.packed)
        return [self.lattice.cell(self.exps, k) for k in keys]

    def bounds(self):
        proto = self.lattice.proto(self.exps)
        c = self.lattice.centers(self.exps, unpack(self.packed))
        half = np.abs(proto.frame.T * proto.lengths / 2).sum(axis=1)
        lo, hi = c.min(axis=0) - half, c.max(axis=0) + half
        if self.box is not None:
            blo, bhi = self.box.corners().min(axis=0), self.box.corners().max(axis=0)
            lo, hi = np.maximum(lo, blo), np.minimum(hi, bhi)
        return lo, hi

    @property
    def volume(self):
        return len(self.packed) * self.lattice.proto(self.exps).volume


# --- tube / unit-cell incidences ------------------------------------------------

@dataclass
class UnitHits:
    """Pairs (tube index, packed unit key) with tube ∩ cell ≠ ∅ and cell
    meeting Q_R, one record per family."""
    lattice: CellLattice
    box: Parallelepiped
    tid: tuple
    key: tuple
    sizes: tuple

    def count(self, n, exps, mask=None):
        """Packed keys at level `exps` and the number of distinct family-n
        tubes meeting each (restricted to unit cells where mask holds)."""
        tid, key = self.tid[n], self.key[n]
        if mask is not None:
            tid, key = tid[mask], key[mask]
        lk = shift(key, exps)
        pairs = np.unique(np.stack([lk, tid], axis=1), axis=0) if len(lk) else np.zeros((0, 2), np.int64)
        return np.unique(pairs[:, 0], return_counts=True)

    def all_units(self):
        return np.unique(np.concatenate(self.key))


def unit_hits(f, lattice, box):
    """Exact tube / unit-cell incidences inside the host box Q_R."""
    proto = lattice.proto((0, 0, 0))
    finv = lattice.finv
    reach = np.abs(proto.frame.T * 0.5).sum(axis=1)  # world half-extent of a unit cell
    circ = np.linalg.norm(reach)
    lo, hi = box.corners().min(axis=0), box.corners().max(axis=0)
    tids, keys = [], []
    for n in range(3):
        anchors, dirs, radii = f.arrays(n)
        tl, kl = [], []
        for i in range(len(anchors)):
            a, d, rad = anchors[i], dirs[i], radii[i]
            # parameter range where the axis is near the host box
            pad = rad + circ + 1.0
            with np.errstate(divide="ignore", invalid="ignore"):
                t0 = (lo - pad - a) / d
                t1 = (hi + pad - a) / d
            tmin = np.where(np.abs(d) > 1e-15, np.minimum(t0, t1), -np.inf)
            tmax = np.where(np.abs(d) > 1e-15, np.maximum(t0, t1), np.inf)
            for ax in range(3):
                if abs(d[ax]) <= 1e-15 and not (lo[ax] - pad <= a[ax] <= hi[ax] + pad):
                    tmin[ax], tmax[ax] = 1, 0
            ta, tb = tmin.max(), tmax.min()
            if ta > tb:
                continue
            ts = np.arange(ta, tb + 0.5, 0.5)
            pts = a + np.outer(ts, d)
            base = np.unique(lattice.unit_keys(pts), axis=0)
            K = np.ceil((rad + 0.5) * np.linalg.norm(finv, axis=0)).astype(int) + 1
            nb = np.stack(np.meshgrid(*[np.arange(-k, k + 1) for k in K], indexing="ij"), -1).reshape(-1, 3)
            cand = np.unique(pack((base[:, None, :] + nb[None]).reshape(-1, 3)))
            ck = unpack(cand)
            cen = lattice.centers((0, 0, 0), ck)
            q = cen - a
            dist = np.linalg.norm(q - np.outer(q @ d, d), axis=1)
            near = dist <= rad + circ + 1e-9
            ck, cen, cand = ck[near], cen[near], cand[near]
            if not len(ck):
                continue
            hit = line_box_distance(a, d, proto, centers=cen) <= rad * (1 + 1e-12)
            hit &= boxes_overlap(box, proto, centers_b=cen)
            tl.append(np.full(int(hit.sum()), i, dtype=np.int64))
            kl.append(cand[hit])
        tids.append(np.concatenate(tl) if tl else np.zeros(0, np.int64))
        keys.append(np.concatenate(kl) if kl else np.zeros(0, np.int64))
    return UnitHits(lattice, box, tuple(tids), tuple(keys), f.sizes)


# --- dyadic helpers -------------------------------------------------------------

def dyadic(x):
    """2^floor(log2 x) for x > 0, 0 for x == 0 (elementwise)."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = 2.0 ** np.floor(np.log2(x[pos]) + 1e-12)
    return out


def modal(classes):
    """Most populated class (ties: the larger class); classes is a list of
    hashable values.  Returns (class, members mask)."""
    if not len(classes):
        return None, np.zeros(0, dtype=bool)
    cnt = Counter(classes)
    best = max(cnt.items(), key=lambda kv: (kv[1], kv[0]))[0]
    return best, np.array([c == best for c in classes])


@dataclass
class DyadicBuckets:
    exps: np.ndarray
    packed: np.ndarray
    counts: np.ndarray      # (k, 3) tube counts per cell
    anchors: np.ndarray     # (k, 3) dyadic anchors (0 for empty)

    @property
    def buckets(self):
        out = {}
        for p, a in zip(self.packed, map(tuple, self.anchors)):
            key = a if min(a) > 0 else "empty"
            out.setdefault(key, []).append(int(p))
        return out

    def modal(self, within=None):
        """Modal non-empty anchor triple (optionally among `within` keys)."""
        ok = self.anchors.min(axis=1) > 0
        if within is not None:
            ok &= np.isin(self.packed, within)
        cls = [tuple(a) for a in self.anchors[ok]]
        best, mask = modal(cls)
        return best, self.packed[ok][mask]


def bucket_counts(hits, exps, keys=None):
    """Per-cell tube counts at level exps for all cells met by some tube
    (or for the given packed keys)."""
    per = [hits.count(n, exps) for n in range(3)]
    allk = np.unique(np.concatenate([p[0] for p in per])) if keys is None else np.unique(keys)
    cnt = np.zeros((len(allk), 3), dtype=np.int64)
    for n, (k, c) in enumerate(per):
        pos = np.searchsorted(allk, k)
        ok = (pos < len(allk)) & (allk[np.minimum(pos, len(allk) - 1)] == k)
        cnt[pos[ok], n] = c[ok]
    return DyadicBuckets(np.asarray(exps), allk, cnt, dyadic(cnt))


def bucket_cells(f, tiling):
    """Dyadic buckets of the tiles of a Tiling by |T_n(C)| (exact test)."""
    from .functional import tube_hits
    tiles = tiling.tiles()
    cnt = np.array([[int(tube_hits(f, n, c).sum()) for n in range(3)] for c in tiles],
                   dtype=np.int64).reshape(-1, 3)
    return DyadicBuckets(None, np.arange(len(tiles)), cnt, dyadic(cnt))


# --- census ------------------------------------------------------------------------

def children(packed, de):
    """All keys at a level finer by `de` inside the given cells."""
    de = np.asarray(de, dtype=np.int64)
    k = unpack(packed) << de
    off = np.stack(np.meshgrid(*[np.arange(1 << int(x)) for x in de], indexing="ij"), -1).reshape(-1, 3)
    return pack((k[:, None, :] + off[None]).reshape(-1, 3))


def nested_census(occupied, shifts):
    """Three-level nested census with modal-class selection.

    `occupied` are packed keys of occupied finest cells; `shifts` the
    exponent differences of the successive parent levels.  At each level
    parents are grouped by how many selected children they contain, the
    modal dyadic class is kept, and its anchor recorded.
    Returns (anchors, selected parent keys at each level).
    """
    cur = np.unique(occupied)
    anchors, selected = [], []
    for de in shifts:
        if not len(cur):
            anchors.append(0.0)
            selected.append(cur)
            continue
        par, n = np.unique(shift(cur, de), return_counts=True)
        cls = list(dyadic(n))
        best, mask = modal(cls)
        anchors.append(float(best))
        cur = par[mask]
        selected.append(cur)
    return anchors, selected


def measure_mu(occupied_U, levels, E, F, j, t):
    """(mu1, mu2, mu3) and the selected P cells from occupied U cells."""
    sh = [levels["P2"] - levels["U"], levels["P1"] - levels["P2"], levels["P"] - levels["P1"]]
    (a3, a2, a1), sel = nested_census(occupied_U, sh)
    mu3 = a3
    mu2 = a2 / 2.0 ** (j * (1 - E))
    mu1 = a1 / 2.0 ** (2 * t * (1 - F))
    return (mu1, mu2, mu3), sel[-1]


def measure_beta(f, P, target):
    """Fraction of family-n tubes meeting P that also meet P ∩ target.

    `target` is None (empty), a region with .cells() or a list of boxes
    already clipped to P."""
    from .functional import CellUnion, tube_hits
    out = []
    for n in range(3):
        inP = tube_hits(f, n, P)
        if not inP.any():
            raise ZeroDivisionError(f"no family-{n + 1} tube meets P")
        if target is None:
            out.append(0.0)
            continue
        cells = [c for c in (target.cells() if hasattr(target, "cells") else target)
                 if boxes_overlap(P, c) or np.allclose(c.center, P.center)]
        hit = tube_hits(f, n, CellUnion(cells)) if cells else np.zeros_like(inP)
        out.append(float((hit & inP).sum() / inP.sum()))
    return tuple(out)


def compute_L(count3, R32, upper):
    """L = |T_3(B)| / R_{3,2,s}; returns (L, flagged) with flagged True when
    L falls outside [1, upper]."""
    if R32 <= 0:
        raise ValueError("R_{3,2,s} must be positive")
    L = count3 / R32
    return L, bool(L < 1 or L > upper)


def _ratio_classes(num, den):
    """Dyadic class triples of per-family ratios num/den (rows are cells)."""
    rat = np.where(den > 0, num / np.maximum(den, 1), 0.0)
    return [tuple(r) for r in dyadic(rat)], rat


def _member(packed, keys):
    return np.isin(packed, keys)


# --- profile -------------------------------------------------------------------------

@dataclass
class ScaleRecord:
    s: int
    M: float
    N: float
    E: float
    F: float
    R1: tuple = (0.0, 0.0, 0.0)
    R2: tuple = (0.0, 0.0, 0.0)
    mu: tuple = (0.0, 0.0, 0.0, 0.0, 0.0)
    beta1: tuple = (1.0, 1.0, 1.0)
    beta2: tuple = (1.0, 1.0, 1.0)
    L_hist: dict = field(default_factory=dict)
    L_flagged: int = 0
    sizes: dict = field(default_factory=dict)


@dataclass
class DensityProfile:
    r: int
    j: int
    t: int
    schedule: ScaleSchedule
    records: list
    truncated: str = None

    @property
    def S(self):
        return self.schedule.S

    @property
    def theta_anchor(self):
        return 2.0 ** -(self.j + self.r + self.t)

    @property
    def complete(self):
        return self.truncated is None

    def rec(self, s):
        return self.records[s - 1]

    def beta_bar(self, i, s):
        b = self.rec(s).beta1 if i == 1 else self.rec(s).beta2
        return float(np.prod(b))

    def caps(self, s):
        """Upper bounds for (mu1..mu5) at scale s."""
        E, F = self.schedule.E[s - 1], self.schedule.F[s - 1]
        j, r, t = self.j, self.r, self.t
        return (2.0 ** (2 * F * t), 2.0 ** (E * j - r), 2.0 ** r, 2.0 ** (F * t), 2.0 ** (E * j + r))

    def cap_violations(self):
        out = []
        for rec in self.records:
            for k, (m, c) in enumerate(zip(rec.mu, self.caps(rec.s)), 1):
                if m > c * (1 + 1e-12):
                    out.append(f"mu{k} at s={rec.s}: {m:g} > {c:g}")
            for name in ("beta1", "beta2"):
                for n, b in enumerate(getattr(rec, name), 1):
                    if not 0 <= b <= 1:
                        out.append(f"{name}[{n}] at s={rec.s}: {b:g} outside [0, 1]")
        return out


@dataclass
class BSets:
    """Selected cell sets: A1[s] = (exps, packed keys) of P cells (None at
    s = S, meaning all of Q_R) and A2[s] the same for the A_{2,s} cells."""
    lattice: CellLattice
    box: Parallelepiped
    A1: dict
    A2: dict
    S: int
    s0: int = 1

    def chain(self, s0=None):
        """[(kind, s, exps, keys)] from the A_{2,s0} level upward."""
        s0 = self.s0 if s0 is None else s0
        out = [("A2", s0, *self.A2[s0])]
        for s in range(s0, self.S + 1):
            if s > s0:
                out.append(("A2", s, *self.A2[s]))
            if s < self.S:
                out.append(("A1", s, *self.A1[s]))
        return out

    def region(self, s0=None):
        """B_{s0} as a union of A_{2,s0} cells (clipped to Q_R) whose
        coarser ancestors are selected at every scale s >= s0."""
        s0 = self.s0 if s0 is None else s0
        exps0, keys0 = self.A2[s0]
        keep = np.ones(len(keys0), dtype=bool)
        for _, _, e, k in self.chain(s0)[1:]:
            keep &= np.isin(shift(keys0, e - exps0), k)
        return CellRegion(self.lattice, exps0, keys0[keep], self.box)

    @property
    def B(self):
        return self.region()


def build_Bsets(f, schedule, s0=1, params=None, hits=None):
    """Bottom-up construction of the selected cell sets and the density
    profile (see module docstring for the level structure)."""
    params = params or f.params
    S = schedule.S
    if not 1 <= s0 <= S:
        raise ValueError("s0 must lie in [1, S]")
    lat = lattice_for(params, schedule)
    box = cube(schedule.R)
    hits = hits or unit_hits(f, lat, box)
    j, t, r = schedule.j, schedule.t, schedule.r
    recs = [ScaleRecord(s, schedule.M[s - 1], schedule.N[s - 1], schedule.E[s - 1],
                        schedule.F[s - 1]) for s in range(1, S + 1)]
    prof = DensityProfile(r, j, t, schedule, recs)
    A1, A2 = {}, {}

    def fail(msg):
        prof.truncated = msg
        return None, prof

    # s = 1: A_{2,1} is the modal bucket of unit cells
    lv = schedule.levels(1)
    bk = bucket_counts(hits, lv["U"])
    best, keys = bk.modal()
    if best is None:
        return fail("no unit cell meets all three families")
    recs[0].R1 = tuple(float(x) for x in best)
    recs[0].mu = (0.0, 0.0, 0.0, 1.0, 1.0)
    A2[1] = (lv["U"], keys)
    for s in range(1, S + 1):
        lv = schedule.levels(s)
        rec = recs[s - 1]
        E, F = schedule.E[s - 1], schedule.F[s - 1]
        a2_exps, a2_keys = A2[s]
        # occupied U_s cells: U_s cells inside the selected A_{2,s} cells
        occ = children(a2_keys, a2_exps - lv["U"])
        occ = occ[boxes_overlap(box, lat.proto(lv["U"]), centers_b=lat.centers(lv["U"], unpack(occ)))]
        mu123, selP = measure_mu(occ, lv, E, F, j, t)
        rec.mu = (*mu123, *rec.mu[3:])
        rec.sizes["occupied_U"] = len(occ)
        # unit cells of Q_R lying in A_{2,s}
        in_a2 = [_member(shift(hits.key[n], a2_exps), a2_keys) for n in range(3)]
        if s == S:
            # A_{1,S} = Q_R; beta_{n,1,S} over the whole box
            tot = np.array([len(np.unique(hits.tid[n])) for n in range(3)], float)
            num = np.array([len(np.unique(hits.tid[n][in_a2[n]])) for n in range(3)], float)
            rec.beta1 = tuple(np.where(tot > 0, num / np.maximum(tot, 1), 0.0))
            rec.R2 = tuple(float(x) for x in dyadic(tot))
            A1[S] = None
            break
        if not len(selP):
            return fail(f"empty census at s={s}")
        # beta_{n,1,s} over the census-selected P cells
        den = np.zeros((len(selP), 3))
        num = np.zeros((len(selP), 3))
        for n in range(3):
            k, c = hits.count(n, lv["P"])
            pos = np.searchsorted(selP, k)
            ok = (pos < len(selP)) & (selP[np.minimum(pos, len(selP) - 1)] == k)
            den[pos[ok], n] = c[ok]
            k, c = hits.count(n, lv["P"], mask=in_a2[n])
            pos = np.searchsorted(selP, k)
            ok = (pos < len(selP)) & (selP[np.minimum(pos, len(selP) - 1)] == k)
            num[pos[ok], n] = c[ok]
        cls, _ = _ratio_classes(num, den)
        bbest, mask = modal(cls)
        rec.beta1 = tuple(float(b) for b in bbest)
        cand = selP[mask]
        # P*[s] filter (s >= 2) and R_{n,2,s}
        bP = bucket_counts(hits, lv["P"], keys=cand)
        pbest, pkeys = bP.modal(within=cand)
        if pbest is None:
            return fail(f"no P cell at s={s} meets all three families")
        rec.R2 = tuple(float(x) for x in pbest)
        A1[s] = (lv["P"], pkeys if s >= 2 else cand)
        rec.sizes["A1"] = len(A1[s][1])
        # A_{2,s+1}: L census over P4 slabs inside P3 cells
        nrec = recs[s]
        E1 = schedule.E[s]
        in_a1 = [_member(shift(hits.key[n], lv["P"]), A1[s][1]) for n in range(3)]
        k4, c4 = hits.count(2, lv["P4"], mask=in_a1[2])
        # P4 cells meeting A_{1,s} (even with no family-3 tube): L = 0
        p4 = np.unique(shift(A1[s][1], lv["P4"] - lv["P"]))
        cnt3 = np.zeros(len(p4))
        pos = np.searchsorted(p4, k4)
        cnt3[pos] = c4
        upper = 2.0 ** (E1 * j + r)
        Ls = cnt3 / rec.R2[2]
        nrec.L_flagged = int(np.sum((Ls < 1) | (Ls > upper)))
        Lcls = list(dyadic(Ls))
        nrec.L_hist = dict(Counter(float(x) for x in Lcls))
        mu5, m5 = modal(Lcls)
        n3 = np.unique(shift(p4[m5], lv["P3"] - lv["P4"]), return_counts=True)
        mu4, m4 = modal(list(dyadic(n3[1])))
        cand3 = n3[0][m4]
        nrec.mu = (0.0, 0.0, 0.0, float(mu4), float(mu5))
        # beta_{n,2,s+1}
        den = np.zeros((len(cand3), 3))
        num = np.zeros((len(cand3), 3))
        for n in range(3):
            for arr, msk in ((den, None), (num, in_a1[n])):
                k, c = hits.count(n, lv["P3"], mask=msk)
                pos = np.searchsorted(cand3, k)
                ok = (pos < len(cand3)) & (cand3[np.minimum(pos, len(cand3) - 1)] == k)
                arr[pos[ok], n] = c[ok]
        cls, _ = _ratio_classes(num, den)
        bbest, mask = modal(cls)
        nrec.beta2 = tuple(float(b) for b in bbest)
        cand3 = cand3[mask]
        # A*[s+1]: modal bucket of P3 cells
        b3 = bucket_counts(hits, lv["P3"], keys=cand3)
        abest, akeys = b3.modal(within=cand3)
        if abest is None:
            return fail(f"no P3 cell at s={s} meets all three families")
        nrec.R1 = tuple(float(x) for x in abest)
        A2[s + 1] = (lv["P3"], akeys)
        nrec.sizes["A2"] = len(akeys)
    bs = BSets(lat, box, A1, A2, S, s0)
    return bs, prof


# --- refinement factors -----------------------------------------------------------

def refinement_factor(profile, s):
    S = profile.S
    rec = profile.rec(s)
    mu1, mu2, mu3, mu4, mu5 = rec.mu
    if s == 1:
        return profile.beta_bar(1, 1) ** 0.5 * mu1 ** 0.25 * mu2 ** 0.5 * mu3
    if mu4 <= 0 or mu5 <= 0:
        raise ZeroDivisionError(f"mu4 or mu5 vanishes at s={s}")
    if s == S:
        return profile.beta_bar(2, S) ** 0.5 * mu4 ** -0.5 * mu5 ** -0.5
    raw = (profile.beta_bar(1, s) ** 0.5 * profile.beta_bar(2, s) ** 0.5
           * mu1 ** 0.25 * mu2 ** 0.5 * mu3 * mu4 ** -0.5 * mu5 ** -0.5)
    return min(1.0, raw)


@dataclass(frozen=True)
class RefinementBound:
    S_factors: tuple
    I: tuple
    rhs: float
    C: float


def theorem_rhs(profile, C=4.0):
    S = profile.S
    fac = tuple(refinement_factor(profile, s) for s in range(1, S + 1))
    I = tuple(s for s in range(1, S) if fac[s] <= 1.0 / C) + (S,)
    rhs = C ** len(I) * fac[0]
    for s in I[:-1]:
        rhs *= fac[s]
    return RefinementBound(fac, I, rhs, C)


# --- reports ---------------------------------------------------------------------------

PROFILE_COLUMNS = ("s", "M", "N", "E", "F", "R11", "R21", "R31", "R12", "R22", "R32",
                   "mu1", "mu2", "mu3", "mu4", "mu5",
                   "beta11", "beta21", "beta31", "beta12", "beta22", "beta32", "S_factor")


def profile_rows(profile):
    rows = []
    for rec in profile.records:
        try:
            sf = refinement_factor(profile, rec.s)
        except ZeroDivisionError:
            sf = float("nan")
        rows.append((rec.s, rec.M, rec.N, rec.E, rec.F, *rec.R1, *rec.R2, *rec.mu,
                     *rec.beta1, *rec.beta2, sf))
    return rows


def profile_csv(profile):
    lines = [",".join(PROFILE_COLUMNS)]
    for row in profile_rows(profile):
        lines.append(",".join(f"{v:.10g}" if isinstance(v, float) else str(v) for v in row))
    return "\n".join(lines) + "\n"


def profile_text(profile):
    out = [f"profile r={profile.r} j={profile.j} t={profile.t} S={profile.S}"]
    if profile.truncated:
        out.append(f"warning: truncated ({profile.truncated})")
    for row in profile_rows(profile):
        d = dict(zip(PROFILE_COLUMNS, row))
        out.append(f"scale {d['s']}: M={d['M']:g} N={d['N']:g} E={d['E']:g} F={d['F']:g}")
        out.append("  R1=({R11:g}, {R21:g}, {R31:g}) R2=({R12:g}, {R22:g}, {R32:g})".format(**d))
        out.append("  mu=({mu1:g}, {mu2:g}, {mu3:g}, {mu4:g}, {mu5:g})".format(**d))
        out.append("  beta1=({beta11:g}, {beta21:g}, {beta31:g}) "
                   "beta2=({beta12:g}, {beta22:g}, {beta32:g})".format(**d))
        out.append(f"  S={d['S_factor']:.6g}")
    return "\n".join(out) + "\n"
