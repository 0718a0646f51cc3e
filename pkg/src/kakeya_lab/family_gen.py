"""Transversal tube families whose directions come from paraboloid caps
intersected with thin strips, plus certification and subfamily splitting.

Direction regions (all in the frequency square [0, 2]^2):

    S1: cap of side 2^-j centred at m,            strip of width exp j+t, dir w
    S2: cap of side 2^-j centred at m + G 2^-j w,  same strip
    S3: cap of side 2^-r centred at m - D 2^-r w', strip of width exp r+t, dir w'

with w' = w rotated by 2^-t.  Directions are drawn from a "core" sub-strip
of width exponent +CORE_MARGIN so that sampled triples stay transversal.
"""

from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from itertools import product

import numpy as np

from .geometry import (Cap, Strip, Tube, paraboloid_normal, perp2, rotate2,
                       strip_contains, unit, wedge3)

CORE_MARGIN = 3
PLACEMENT_CONSTANTS = ((1.75, 1.75), (1.5, 1.5), (1.25, 1.25))
WEDGE_FACTOR = 8.0
WEDGE_SPREAD = 64.0


def _clip(poly, n, c):
    """Clip a convex polygon to the half-plane n.x <= c."""
    out = []
    for i in range(len(poly)):
        p, q = poly[i], poly[(i + 1) % len(poly)]
        fp, fq = n @ p - c, n @ q - c
        if fp <= 0:
            out.append(p)
        if fp * fq < 0:
            out.append(p + (q - p) * fp / (fp - fq))
    return out


@dataclass(frozen=True)
class Region:
    """Direction region cap ∩ strip; sampling uses cap ∩ core ∩ [0,2]^2."""
    cap: Cap
    strip: Strip
    core: Strip

    @cached_property
    def polygon(self):
        poly = [np.asarray(v, float) for v in self.cap.vertices()]
        for n, c in (((1, 0), 2), ((0, 1), 2), ((-1, 0), 0), ((0, -1), 0)):
            poly = _clip(poly, np.array(n, float), c)
        nrm = perp2(self.core.w)
        c0 = nrm @ self.core.m
        poly = _clip(poly, nrm, c0 + self.core.half_width)
        poly = _clip(poly, -nrm, -c0 + self.core.half_width)
        return np.array(poly).reshape(-1, 2)

    @property
    def area(self):
        p = self.polygon
        if len(p) < 3:
            return 0.0
        x, y = p[:, 0], p[:, 1]
        return 0.5 * abs(x @ np.roll(y, -1) - y @ np.roll(x, -1))

    def contains(self, xi):
        return self.cap.contains(xi) & strip_contains(self.strip, xi)

    def sample(self, k, rng):
        """Uniform points in the sampling polygon (fan triangulation)."""
        p = self.polygon
        tri = np.stack([np.broadcast_to(p[0], p[1:-1].shape), p[1:-1], p[2:]], axis=1)
        e1, e2 = tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
        areas = np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
        which = rng.choice(len(tri), size=k, p=areas / areas.sum())
        u, v = rng.random(k), rng.random(k)
        flip = u + v > 1
        u, v = np.where(flip, 1 - u, u), np.where(flip, 1 - v, v)
        return tri[which, 0] + u[:, None] * e1[which] + v[:, None] * e2[which]


def _layout(j, r, t, w, m, G, D):
    w = unit(w)
    m = np.asarray(m, float)
    wp = rotate2(w, 2.0 ** -t)
    sj, sr = 2.0 ** -j, 2.0 ** -r
    centers = (m, m + G * sj * w, m - D * sr * wp)
    caps = [Cap(c - s / 2, e) for c, s, e in zip(centers, (sj, sj, sr), (j, j, r))]
    strips = [Strip(j + t, w, m), Strip(j + t, w, m), Strip(r + t, wp, m)]
    cores = [Strip(s.j + CORE_MARGIN, s.w, s.m) for s in strips]
    return tuple(Region(*a) for a in zip(caps, strips, cores))


def _vertex_wedges(regions):
    n = [paraboloid_normal(reg.polygon) for reg in regions]
    return wedge3(n[0][:, None, None], n[1][None, :, None], n[2][None, None, :])


def _problem(regions, theta0):
    """Name of the first violated feasibility constraint, or None."""
    for i, reg in enumerate(regions, 1):
        if len(reg.polygon) < 3 or reg.area <= 0:
            return f"region S{i} has empty intersection with [0,2]^2"
        if np.linalg.norm(reg.polygon, axis=1).max() > 2:
            return f"region S{i} leaves the disc |xi| <= 2"
    wd = _vertex_wedges(regions)
    lo, hi = wd.min(), wd.max()
    if lo <= 0 or hi / lo > WEDGE_SPREAD:
        return f"transversality spread {hi / max(lo, 1e-300):.3g} exceeds {WEDGE_SPREAD:g}"
    theta = np.sqrt(lo * hi)
    if not theta0 / WEDGE_FACTOR <= theta <= theta0 * WEDGE_FACTOR:
        return f"wedge {theta:.3g} not within factor {WEDGE_FACTOR:g} of 2^-(j+r+t)"
    return None


def _score(regions, theta0):
    wd = _vertex_wedges(regions)
    lo, hi = wd.min(), wd.max()
    g = np.sqrt(lo * hi) / theta0
    return max(hi / lo / WEDGE_SPREAD, max(g, 1 / g) / WEDGE_FACTOR)


def _candidates():
    # a short list that works across most of the desk-scale range, then a grid
    short = [(172.5, (0.75, 0.8)), (255.0, (0.6, 0.6)), (67.5, (0.6, 1.5)),
             (202.5, (0.45, 1.2)), (165.0, (0.1, 0.45)), (82.5, (0.05, 1.65))]
    yield from short
    ms = np.arange(0.05, 2.0, 0.1)
    for ang in np.arange(0.0, 360.0, 15.0):
        for mx, my in product(ms, ms):
            yield ang, (mx, my)


@lru_cache(maxsize=None)
def default_placement(j, r, t):
    """Deterministic (w, m, G, D) for which the regions certify.

    Returns None when no candidate is feasible.
    """
    theta0 = 2.0 ** -(j + r + t)
    for G, D in PLACEMENT_CONSTANTS:
        best = None
        for ang, m in _candidates():
            a = np.deg2rad(ang)
            w = np.array([np.cos(a), np.sin(a)])
            regs = _layout(j, r, t, w, m, G, D)
            if _problem(regs, theta0) is not None:
                continue
            sc = _score(regs, theta0)
            if best is None or sc < best[0]:
                best = (sc, tuple(w), tuple(m))
            if sc < 0.35:
                break
        if best is not None:
            return best[1], best[2], G, D
    return None


@dataclass(frozen=True)
class TypeParams:
    """Transversality type (r, j, t, w, m); theta is derived from the regions.

    When w or m is omitted a deterministic certified placement is used.
    """
    r: int
    j: int
    t: int
    w: tuple = None
    m: tuple = None
    epsilon: float = 0.5
    G: float = PLACEMENT_CONSTANTS[0][0]
    D: float = PLACEMENT_CONSTANTS[0][1]

    def __post_init__(self):
        for name in ("r", "j", "t"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValueError(f"{name} must be a non-negative integer")
            object.__setattr__(self, name, int(v))
        if self.r > self.j:
            raise ValueError("r ≤ j violated")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.w is None or self.m is None:
            found = default_placement(self.j, self.r, self.t)
            if found is None:
                raise ValueError(f"infeasible parameters (r={self.r}, j={self.j}, "
                                 f"t={self.t}): no region placement fits [0,2]^2")
            w, m, G, D = found
            object.__setattr__(self, "w", tuple(w) if self.w is None else self.w)
            object.__setattr__(self, "m", tuple(m) if self.m is None else self.m)
            object.__setattr__(self, "G", G)
            object.__setattr__(self, "D", D)
        w = np.asarray(self.w, float)
        if abs(np.linalg.norm(w) - 1) > 1e-12:
            raise ValueError("w must be a unit vector")
        object.__setattr__(self, "w", tuple(float(x) for x in w))
        object.__setattr__(self, "m", tuple(float(x) for x in self.m))

    @property
    def theta_anchor(self):
        return 2.0 ** -(self.j + self.r + self.t)

    @cached_property
    def theta(self):
        return float(np.sqrt(_vertex_wedges(make_regions(self)).min()
                             * _vertex_wedges(make_regions(self)).max()))


def make_regions(params):
    """The three direction regions; raises ValueError naming the failure."""
    regs = _layout(params.j, params.r, params.t, params.w, params.m, params.G, params.D)
    if not regs[0].cap.contains(np.asarray(params.m)):
        raise ValueError("m must lie in the first cap")
    prob = _problem(regs, params.theta_anchor)
    if prob is not None:
        raise ValueError(f"infeasible parameters: {prob}")
    return regs


@dataclass
class TriFamily:
    """Three tube families.  `xis[n]` holds the frequency of each tube of
    family n (None for arrangements built directly from directions)."""
    families: tuple
    params: TypeParams = None
    regions: tuple = None
    xis: tuple = None
    theta: float = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.families = tuple(list(f) for f in self.families)
        if len(self.families) != 3:
            raise ValueError("a TriFamily has exactly three families")
        if self.theta is None and self.params is not None:
            self.theta = self.params.theta

    @property
    def sizes(self):
        return tuple(len(f) for f in self.families)

    def arrays(self, n):
        """(anchors, directions, radii) of family n as arrays."""
        fam = self.families[n]
        if not fam:
            return np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0)
        return (np.array([t.anchor for t in fam]), np.array([t.direction for t in fam]),
                np.array([t.radius for t in fam], dtype=float))

    def rescaled(self, lam):
        """Same tubes with radius multiplied by 2^lam."""
        fams = [[Tube(t.direction, t.anchor, t.radius * 2.0 ** lam) for t in fam]
                for fam in self.families]
        return TriFamily(fams, self.params, self.regions, self.xis, self.theta, dict(self.meta))


def sample_family(params, counts, box_R, seed):
    """Tubes with directions uniform over the regions and anchors uniform in
    the cube [-R, R]^3."""
    if any(c < 1 for c in counts):
        raise ValueError("counts must be at least 1")
    regs = make_regions(params)
    rng = np.random.default_rng(seed)
    fams, xis = [], []
    for reg, k in zip(regs, counts):
        xi = reg.sample(int(k), rng)
        a = rng.uniform(-box_R, box_R, size=(int(k), 3))
        d = paraboloid_normal(xi)
        fams.append([Tube(dd, aa) for dd, aa in zip(d, a)])
        xis.append(xi)
    return TriFamily(fams, params, regs, tuple(xis), meta={"seed": seed, "R": box_R})


@dataclass(frozen=True)
class Certificate:
    min_wedge: float
    max_wedge: float
    sampled_triples: int
    theta: float
    pass_: bool

    @property
    def passed(self):
        return self.pass_


def certify(f, max_triples=10 ** 6, seed=0, theta=None):
    """Wedge statistics over direction triples (all, or a seeded subset)."""
    d = [f.arrays(n)[1] for n in range(3)]
    theta = f.theta if theta is None else theta
    total = int(np.prod([len(x) for x in d]))
    if total == 0:
        return Certificate(0.0, 0.0, 0, theta, False)
    if total <= max_triples:
        lo, hi = np.inf, 0.0
        for v1 in d[0]:
            w = wedge3(v1, d[1][:, None, :], d[2][None, :, :])
            lo, hi = min(lo, w.min()), max(hi, w.max())
        k = total
    else:
        rng = np.random.default_rng(seed)
        idx = [rng.integers(0, len(x), max_triples) for x in d]
        w = wedge3(d[0][idx[0]], d[1][idx[1]], d[2][idx[2]])
        lo, hi, k = w.min(), w.max(), max_triples
    ok = (theta is not None and lo > 0 and hi / lo <= WEDGE_SPREAD
          and theta / WEDGE_FACTOR <= lo and hi <= theta * WEDGE_FACTOR)
    return Certificate(float(lo), float(hi), k, theta, bool(ok))


def subregion_index(reg, xi, lam):
    """Index (a, b) of xi in the 2^lam x 2^lam refinement of a region.

    a: position along the strip direction within the cap, b: sub-strip.
    """
    xi = np.atleast_2d(xi)
    k = 2 ** lam
    s = reg.cap.side
    ext = s * (abs(reg.strip.w[0]) + abs(reg.strip.w[1]))  # cap width along w
    u = (xi - reg.cap.center) @ reg.strip.w / ext + 0.5
    v = reg.strip.offset(xi) / (2 * reg.strip.half_width) + 0.5
    a = np.clip(np.floor(u * k), 0, k - 1).astype(int)
    b = np.clip(np.floor(v * k), 0, k - 1).astype(int)
    return a, b


def decompose_subfamilies(f, lam):
    """Split each family by the refined sub-cap / sub-strip cell of its
    frequency; subfamily i collects cell i of every family (N <= 2^(2 lam))."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if f.regions is None or f.xis is None:
        raise ValueError("decomposition needs recorded frequencies and regions")
    k = 2 ** lam
    labels = []
    for reg, xi in zip(f.regions, f.xis):
        a, b = subregion_index(reg, xi, lam) if len(xi) else (np.zeros(0, int),) * 2
        labels.append(a * k + b)
    used = sorted(set(np.concatenate(labels).tolist()))
    out = []
    for i in used:
        fams = [[t for t, l in zip(fam, lab) if l == i] for fam, lab in zip(f.families, labels)]
        xis = tuple(xi[lab == i] for xi, lab in zip(f.xis, labels))
        out.append(TriFamily(fams, f.params, f.regions, xis, f.theta,
                             {**f.meta, "subfamily": int(i), "lambda": lam}))
    return out


# --- arrangement files -------------------------------------------------------

_HEADER_KEYS = ("r", "j", "t", "w", "m", "epsilon", "seed", "R", "theta")


def _g(x):
    return format(float(x), ".17g")


def write_arrangement(f, path):
    p = f.params
    vals = {
        "r": p.r if p else "-", "j": p.j if p else "-", "t": p.t if p else "-",
        "w": ",".join(map(_g, p.w)) if p else "-",
        "m": ",".join(map(_g, p.m)) if p else "-",
        "epsilon": _g(p.epsilon) if p else "-",
        "seed": f.meta.get("seed", "-"), "R": _g(f.meta["R"]) if "R" in f.meta else "-",
        "theta": _g(f.theta) if f.theta is not None else "-",
    }
    if p is not None:
        vals["G"], vals["D"] = _g(p.G), _g(p.D)
    lines = ["# kakeya-lab arrangement v1",
             "header " + " ".join(f"{k}={v}" for k, v in vals.items())]
    for n, fam in enumerate(f.families):
        xi = f.xis[n] if f.xis is not None else None
        for i, t in enumerate(fam):
            src = xi[i] if xi is not None else (np.nan, np.nan)
            nums = [*t.direction, *t.anchor, t.radius, *src]
            lines.append(f"{n + 1} " + " ".join(map(_g, nums)))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_arrangement(path):
    head, rows = None, []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                if line.startswith("header"):
                    head = dict(tok.split("=", 1) for tok in line.split()[1:])
                    continue
                parts = line.split()
                if len(parts) != 10:
                    raise ValueError(f"expected 10 fields, got {len(parts)}")
                n = int(parts[0])
                if n not in (1, 2, 3):
                    raise ValueError("family index must be 1, 2 or 3")
                rows.append((n - 1, np.array([float(x) for x in parts[1:]])))
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: {e}") from None
    if head is None:
        raise ValueError(f"{path}: missing header record")
    params = None
    if head.get("r", "-") != "-":
        kw = {}
        if "G" in head:
            kw = {"G": float(head["G"]), "D": float(head["D"])}
        params = TypeParams(int(head["r"]), int(head["j"]), int(head["t"]),
                            tuple(float(x) for x in head["w"].split(",")),
                            tuple(float(x) for x in head["m"].split(",")),
                            float(head["epsilon"]), **kw)
    fams, xis = [[], [], []], [[], [], []]
    for n, v in rows:
        fams[n].append(Tube(v[0:3], v[3:6], v[6]))
        xis[n].append(v[7:9])
    have_xi = rows and not any(np.isnan(v[7]) for _, v in rows)
    meta = {}
    if head.get("seed", "-") != "-":
        meta["seed"] = int(head["seed"])
    if head.get("R", "-") != "-":
        meta["R"] = float(head["R"])
    theta = float(head["theta"]) if head.get("theta", "-") != "-" else None
    xis = tuple(np.array(x).reshape(-1, 2) for x in xis) if have_xi else None
    regions = make_regions(params) if params is not None else None
    return TriFamily(fams, params, regions, xis, theta, meta)
