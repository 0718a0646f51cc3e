"""Inequality checks: the Loomis-Whitney base case, the cord lemma's bilinear
chain, the refined multiscale bound, theta-scaling sweeps and the induction
step on scales.

Every check returns a CheckReport with both sides, their ratio (the implied
constant of the corresponding "≲") and pass = implied_constant <= ceiling.
"""

import math
import time
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .family_gen import TriFamily, TypeParams, make_regions, sample_family, subregion_index
from .functional import (DEFAULT_BUDGET, Intersection, bilinear_integral, integrate,
                         rasterize, trilinear_integral, triple_terms)
from .geometry import (Parallelepiped, Tube, cube, line_box_distance, paraboloid_normal,
                       unit, wedge3)
from .multiscale import (CellLattice, build_Bsets, build_schedule, shift, theorem_rhs,
                         unit_hits, unpack)

LEMMA_CEILING = 2.0 ** 6
LW_RADIUS = 0.6


@dataclass
class CheckReport:
    name: str
    lhs: float
    rhs: float
    implied_constant: float
    passed: bool
    grid: dict = field(default_factory=dict)
    seed: int = None
    ceiling: float = LEMMA_CEILING
    details: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    @property
    def pass_(self):
        return self.passed

    def text(self):
        out = [f"check {self.name}: {'PASS' if self.passed else 'FAIL'}",
               f"  lhs={self.lhs:.10g} rhs={self.rhs:.10g} "
               f"implied_constant={self.implied_constant:.6g} ceiling={self.ceiling:g}"]
        if self.seed is not None:
            out.append(f"  seed={self.seed}")
        if self.grid:
            out.append(f"  grid h={self.grid.get('h')} dims={self.grid.get('dims')}")
        for k, v in self.details.items():
            out.append(f"  {k}={_fmt(v)}")
        out += [f"  note: {n}" for n in self.notes]
        return "\n".join(out)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, (tuple, list)):
        return "(" + ", ".join(_fmt(x) for x in v) + ")"
    return str(v)


def _report(name, lhs, rhs, ceiling, **kw):
    if rhs > 0:
        c = lhs / rhs
    else:
        c = 0.0 if lhs == 0 else math.inf
    return CheckReport(name, float(lhs), float(rhs), float(c), bool(c <= ceiling), ceiling=ceiling, **kw)


def _sizes(f, box):
    from .functional import restricted_tube_count
    return restricted_tube_count(f, box)


# --- Loomis-Whitney ------------------------------------------------------------------

def lw_pack(N, directions=None, radius=LW_RADIUS):
    """Three families of N^2 parallel tubes through the half-integer points
    of the cube [-N/2, N/2]^3 (= Q_{N/2}, returned as the region).

    Family n runs along directions[n] (default: the coordinate axes).
    With axis directions, radius 0.6 makes each tube cover exactly the
    voxel column of its unit cell at h = 1/4, so counts are 1 everywhere.
    """
    if directions is None:
        directions = np.eye(3)
    directions = np.array([unit(d) for d in directions])
    region = cube(N / 2)
    fams = [_axis_family(N, n, d, radius) for n, d in enumerate(directions)]
    return TriFamily(fams, theta=float(wedge3(*directions)), meta={"R": N / 2}), region


def _axis_family(N, n, d, radius):
    # anchors on the half-integer lattice of the plane x_n = 0
    others = [k for k in range(3) if k != n]
    g = np.arange(N) + 0.5 - N / 2
    ij = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    a = np.zeros((len(ij), 3))
    a[:, others] = ij
    return [Tube(d, aa, radius) for aa in a]


def sheared_pack(N, theta, radius=LW_RADIUS):
    """LW pack whose third family is tilted towards e1 so that the wedge of
    the three directions equals theta.  Anchors of the tilted family cover
    the whole cube; tubes whose axis misses [0, N]^3 are dropped."""
    if not 0 < theta <= 1:
        raise ValueError("theta must lie in (0, 1]")
    v3 = np.array([math.sqrt(1 - theta ** 2), 0.0, theta])
    region = cube(N / 2)
    fams = [_axis_family(N, n, np.eye(3)[n], radius) for n in range(2)]
    # family 3: anchors in the plane z = 0; an x-step dx moves the tube by
    # theta * dx across its own cross-section, so dx = 1/theta keeps unit
    # spacing
    dx = 1.0 / theta
    reach = N * v3[0] / theta + N
    xs = np.arange(-reach, reach + dx, dx) + 0.5 * dx
    ij = np.stack(np.meshgrid(xs, np.arange(N) + 0.5 - N / 2, indexing="ij"), -1).reshape(-1, 2)
    a = np.column_stack([ij, np.zeros(len(ij))])
    keep = line_box_distance(a, v3, region) <= 1e-9
    fams.append([Tube(v3, aa, radius) for aa in a[keep]])
    theta = float(wedge3(np.eye(3)[0], np.eye(3)[1], v3))
    return TriFamily(fams, theta=theta, meta={"R": N / 2}), region


def _directions(f):
    out = []
    for n in range(3):
        _, d, _ = f.arrays(n)
        if not len(d):
            raise ValueError(f"family {n + 1} is empty")
        if np.abs(np.abs(d @ d[0]) - 1).max() > 1e-9:
            raise ValueError(f"family {n + 1} does not share a single direction")
        out.append(d[0])
    return out


def check_loomis_whitney(f, region, h=0.25, ceiling=LEMMA_CEILING, budget=DEFAULT_BUDGET):
    """lhs = integral over region; rhs = theta^{-1/2} prod |T_n(region)|^{1/2}."""
    v = _directions(f)
    theta = float(wedge3(*v))
    if theta <= 1e-12:
        raise ValueError("zero wedge: directions are coplanar (theta = 0)")
    res = integrate(f, region, h=h, budget=budget)
    sizes = _sizes(f, region)
    rhs = theta ** -0.5 * math.prod(sizes) ** 0.5
    return _report("lw", res.value, rhs, ceiling, grid=res.grid,
                   details={"theta": theta, "sizes": sizes})


# --- cord lemma ------------------------------------------------------------------

def cord_terms(profile, s):
    """A1, A2, A3 and the formula sides of the lemma and of the three pair inequalities."""
    rec = profile.rec(s)
    j, t, r = profile.j, profile.t, profile.r
    E, F = rec.E, rec.F
    mu1, mu2, mu3 = rec.mu[:3]
    A1 = mu1 ** 0.25 * 2.0 ** (t * (1 - F) / 2)
    A2 = mu2 ** 0.5 * 2.0 ** (j * (1 - E) / 2)
    A3 = mu3
    R1, R2, b = rec.R1, rec.R2, rec.beta1
    Q = 2.0 ** (3 * profile.schedule.lam(s))
    main = (A1 ** 3 * A2 * math.prod(R1) ** 0.5, math.prod(b) ** 0.5 * math.prod(R2) ** 0.5)
    p13 = (Q * A1 ** 4 * A2 ** 2 * A3 * R1[0] * R1[2], Q * A3 * b[0] * b[2] * R2[0] * R2[2])
    p23 = (A1 ** 4 * A2 ** 2 * R1[1] * R1[2], 2.0 ** r * b[1] * b[2] * R2[1] * R2[2])
    p12 = (Q * A1 ** 4 * A2 ** 2 * A3 * R1[0] * R1[1], Q * A2 ** 2 * A3 * b[0] * b[1] * R2[0] * R2[1])
    return {"A": (A1, A2, A3), "Q": Q, "main": main, "pair13": p13, "pair23": p23, "pair12": p12}


def _ratio(pair):
    lhs, rhs = pair
    if rhs > 0:
        return lhs / rhs
    return 0.0 if lhs == 0 else math.inf


def measured_bilinear(f, bsets, profile, s, h=0.5, max_cells=4, budget=DEFAULT_BUDGET):
    """max over (up to max_cells) P in A_{1,s} of the bilinear integrals
    over P ∩ B_s for the family pairs (1,3) and (1,2), with tubes at the
    scale-s radius and the grid spacing scaled with them."""
    lam = profile.schedule.lam(s)
    exps, keys = bsets.A1[s]
    B = bsets.region(s)
    if not len(B) or not len(keys):
        return {"pair13": 0.0, "pair12": 0.0, "cells": 0}
    # load of each P: number of B_s cells inside
    par = shift(B.packed, exps - B.exps)
    load = {k: int((par == k).sum()) for k in keys}
    order = sorted(keys.tolist(), key=lambda k: (-load[k], k))[:max_cells]
    fs = f.rescaled(lam)
    hs = h * 2.0 ** lam
    best = {"pair13": 0.0, "pair12": 0.0}
    for k in order:
        P = bsets.lattice.cell(exps, unpack(np.array([k]))[0])
        cf = rasterize(fs, Intersection(P, bsets.box), h=hs, budget=budget)
        best["pair13"] = max(best["pair13"], bilinear_integral(cf, 0, 2, B))
        best["pair12"] = max(best["pair12"], bilinear_integral(cf, 0, 1, B))
    best["cells"] = len(order)
    best["grid_h"] = hs
    return best


def check_cord(profile, s, f=None, bsets=None, h=0.5, ceiling=LEMMA_CEILING, max_cells=4):
    """Lemma inequality A1^3 A2 prod R1^{1/2} vs betā^{1/2} prod R2^{1/2} at
    scale s (1 <= s < S), the formula sides of the three pair inequalities, their product
    identity, and (when f and bsets are given) the measured bilinear
    integrals behind the (1,3) and (1,2) pair inequalities."""
    if not 1 <= s < profile.S:
        raise ValueError("check_cord needs 1 <= s < S")
    if not profile.complete:
        raise ValueError(f"profile truncated: {profile.truncated}")
    T = cord_terms(profile, s)
    ratios = {k: _ratio(T[k]) for k in ("main", "pair13", "pair23", "pair12")}
    # product identity: (pair13 pair23 pair12 / (Q^2 A3^2 A2^2))^(1/4) on either side
    A1, A2, A3 = T["A"]
    norm = T["Q"] ** 2 * A3 ** 2 * A2 ** 2
    lhs_id = (T["pair13"][0] * T["pair23"][0] * T["pair12"][0] / norm) ** 0.25 if norm > 0 else 0.0
    rhs_id = (T["pair13"][1] * T["pair23"][1] * T["pair12"][1] / norm) ** 0.25 if norm > 0 else 0.0
    r4 = 2.0 ** (profile.r / 4)
    identity_ok = (math.isclose(lhs_id, T["main"][0], rel_tol=1e-9, abs_tol=1e-300)
                   and math.isclose(rhs_id, r4 * T["main"][1], rel_tol=1e-9, abs_tol=1e-300))
    details = {"A": T["A"], **{f"{k}_constant": v for k, v in ratios.items()},
               "identity": identity_ok}
    worst = max(ratios.values())
    rep_notes = []
    if f is not None and bsets is not None:
        m = measured_bilinear(f, bsets, profile, s, h=h, max_cells=max_cells)
        for key in ("pair13", "pair12"):
            rhs = T[key][1]
            c = _ratio((m[key], rhs))
            details[f"{key}_measured"] = m[key]
            details[f"{key}_measured_constant"] = c
            worst = max(worst, c)
        details["measured_cells"] = m["cells"]
    else:
        rep_notes.append("bilinear integrals not measured (no arrangement given)")
    rep = _report("cord", T["main"][0], T["main"][1], ceiling, seed=None, details=details,
                  notes=rep_notes)
    rep.implied_constant = float(worst)
    rep.passed = bool(worst <= ceiling and identity_ok)
    return rep


# --- refined bound -----------------------------------------------------------------

def check_gtem(f, schedule, C=4.0, h=0.25, ceiling=1.0, params=None, budget=DEFAULT_BUDGET,
               bsets=None, profile=None):
    """Normalized integral over B_1 against the refined bound.

    lhs = integral over B_1 ∩ Q_R / prod |T_n(Q_R)|^{1/2}; rhs = theorem_rhs.
    Reports the baseline theta^{-1/2} and the gain baseline/rhs.
    """
    params = params or f.params
    if bsets is None or profile is None:
        bsets, profile = build_Bsets(f, schedule, params=params)
    theta = f.theta if f.theta is not None else params.theta
    base = theta ** -0.5
    if bsets is None:
        rep = _report("gtem", 0.0, 0.0, ceiling, notes=[f"vacuous: {profile.truncated}"])
        rep.passed = True
        return rep
    bound = theorem_rhs(profile, C)
    B = bsets.region(1)
    sizes = _sizes(f, bsets.box)
    norm = math.prod(sizes) ** 0.5
    if not len(B) or norm == 0:
        rep = _report("gtem", 0.0, bound.rhs, ceiling, notes=["vacuous: empty B_1"])
        rep.passed = True
        return rep
    res = integrate(f, B, h=h, budget=budget)
    lhs = res.value / norm
    details = {"theta": theta, "baseline": base, "baseline_ratio": lhs / base,
               "gain": base / bound.rhs, "S_factors": bound.S_factors, "I": bound.I,
               "C": C, "B1_cells": len(B), "sizes": sizes,
               "B1_fraction": B.volume / bsets.box.volume}
    return _report("gtem", lhs, bound.rhs, ceiling, grid=res.grid, details=details)


def remark_product(profile):
    """S(1) * S(S) and the bound 2 theta^{-1/2} (anchor theta)."""
    from .multiscale import refinement_factor
    return (refinement_factor(profile, 1) * refinement_factor(profile, profile.S),
            2.0 * profile.theta_anchor ** -0.5)


# --- theta sweep ----------------------------------------------------------------------

SWEEP_COLUMNS = ("r", "j", "t", "R", "theta", "seed", "lhs", "normalizer", "ratio",
                 "grid_h", "runtime_ms")


def structured_pack(params, seed, c=2.0, radius=1.0):
    """Concentrated arrangement near the extremal configuration.

    One direction per family is drawn from its region.  X is the
    parallelepiped spanned by l_n v_n with l_1 = l_2 = c 2^(j+t),
    l_3 = c 2^(r+t), whose widths in the dual directions are ~c; each
    family is a square lattice of parallel tubes (spacing sqrt(pi) radius)
    restricted to the tubes meeting X.  Returns (family, X, Xe) where Xe
    contains every point lying in tubes of all three families.
    """
    rng = np.random.default_rng(seed)
    regs = make_regions(params)
    xi = np.array([reg.sample(1, rng)[0] for reg in regs])
    v = paraboloid_normal(xi)
    j, r, t = params.j, params.r, params.t
    ell = c * 2.0 ** np.array([j + t, j + t, r + t])
    X = Parallelepiped(v, np.log2(ell))
    dual = np.linalg.norm(np.linalg.inv(v), axis=0)
    spacing = math.sqrt(math.pi) * radius
    fams = []
    for n in range(3):
        d = v[n]
        p = unit(np.cross(d, [0.0, 0.0, 1.0] if abs(d[2]) < 0.9 else [1.0, 0.0, 0.0]))
        q = np.cross(d, p)
        ang = rng.uniform(0, 2 * math.pi)
        p, q = math.cos(ang) * p + math.sin(ang) * q, -math.sin(ang) * p + math.cos(ang) * q
        cp = X.corners() @ np.stack([p, q], axis=1)
        lo, hi = cp.min(axis=0) - radius, cp.max(axis=0) + radius
        off = rng.uniform(0, spacing, size=2)
        a_ = np.arange(math.floor((lo[0] - off[0]) / spacing), math.ceil((hi[0] - off[0]) / spacing) + 1)
        b_ = np.arange(math.floor((lo[1] - off[1]) / spacing), math.ceil((hi[1] - off[1]) / spacing) + 1)
        A, B = np.meshgrid(a_ * spacing + off[0], b_ * spacing + off[1], indexing="ij")
        anchors = np.outer(A.ravel(), p) + np.outer(B.ravel(), q)
        keep = line_box_distance(anchors, d, X) <= radius
        fams.append([Tube(d, a, radius) for a in anchors[keep]])
    theta = float(wedge3(*v))
    xis = tuple(np.repeat(x[None], len(fam), axis=0) for x, fam in zip(xi, fams))
    f = TriFamily(fams, params, regs, xis, theta, meta={"seed": seed, "kind": "structured"})
    grow = ell + 2 * (2 * radius * dual)
    Xe = Parallelepiped(v, np.log2(grow))
    return f, X, Xe


@dataclass
class SweepResult:
    rows: list
    slope: float
    intercept: float
    residual: float
    kappa: float
    gaps: list = field(default_factory=list)

    def csv(self):
        lines = [",".join(SWEEP_COLUMNS)]
        for row in self.rows:
            lines.append(",".join(_csv(row[k]) for k in SWEEP_COLUMNS))
        return "\n".join(lines) + "\n"

    def fit_line(self):
        return (f"# fit slope={self.slope:.6g} intercept={self.intercept:.6g} "
                f"residual={self.residual:.6g} kappa={self.kappa:.6g} gaps={len(self.gaps)}")


def _csv(v):
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def sweep_cell(r, j, t, trial_seed, h=0.25, budget=DEFAULT_BUDGET, c=2.0, R=None, coarse=4):
    """One structured trial: returns a sweep row."""
    t0 = time.perf_counter()
    params = TypeParams(r, j, t)
    f, X, Xe = structured_pack(params, trial_seed, c=c)
    R = R if R is not None else 2.0 ** (j + t + 2)
    box = cube(R)
    res = integrate(f, Intersection(Xe, box), h=h, budget=budget, coarse=coarse)
    sizes = _sizes(f, box)
    norm = math.prod(sizes) ** 0.5
    ratio = res.value / norm if norm > 0 else 0.0
    return {"r": r, "j": j, "t": t, "R": float(R), "theta": f.theta, "seed": trial_seed,
            "lhs": res.value, "normalizer": norm, "ratio": ratio, "grid_h": h,
            "runtime_ms": int(round((time.perf_counter() - t0) * 1000))}


def fit_slope(rows):
    """Fit log2(max ratio per anchor class) against log2(anchor theta)."""
    groups = {}
    for row in rows:
        k = row["j"] + row["r"] + row["t"]
        groups[k] = max(groups.get(k, 0.0), row["ratio"])
    ks = sorted(k for k in groups if groups[k] > 0)
    if len(ks) < 2:
        return float("nan"), float("nan"), float("nan")
    x = -np.array(ks, dtype=float)
    y = np.log2([groups[k] for k in ks])
    (slope, icpt), res, *_ = np.polyfit(x, y, 1, full=True)
    resid = float(np.sqrt(res[0] / len(x))) if len(res) else 0.0
    return float(slope), float(icpt), resid


def trial_seed(seed, r, j, t, trial):
    """Per-trial seed keyed by the job, independent of execution order."""
    return int(np.random.SeedSequence([seed, r, j, t, trial]).generate_state(1)[0])


def _sweep_job(job):
    r, j, t, k, seed, h, budget, c = job
    try:
        return sweep_cell(r, j, t, trial_seed(seed, r, j, t, k), h=h, budget=budget, c=c)
    except MemoryError as e:
        return {"gap": {"r": r, "j": j, "t": t, "trial": k, "reason": str(e)}}


def sweep_theta(j_range, r_range, t_range, trials, seed, h=0.25, budget=DEFAULT_BUDGET,
                c=2.0, progress=None, workers=1):
    """Structured trials over all (r, j, t) with r <= j; per-row theta is the
    actual wedge of the trial's directions.  Cells exceeding the voxel
    budget are skipped and recorded as gaps.  Output does not depend on
    `workers`."""
    jobs = [(r, j, t, k, seed, h, budget, c) for j in j_range for r in r_range if r <= j
            for t in t_range for k in range(trials)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_sweep_job, jobs))
    else:
        results = []
        for job in jobs:
            results.append(_sweep_job(job))
            if progress and "gap" not in results[-1]:
                progress(results[-1])
    rows = [x for x in results if "gap" not in x]
    gaps = [x["gap"] for x in results if "gap" in x]
    slope, icpt, resid = fit_slope(rows)
    kappa = max((row["ratio"] * row["theta"] ** 0.5 for row in rows), default=0.0)
    return SweepResult(rows, slope, icpt, resid, kappa, gaps)


# --- constructed arrangements -------------------------------------------------------

def hotspot_family(params, K, R, seed, spread=None):
    """Sparse arrangement: K well separated hotspots; each family has one
    tube through every hotspot with a direction drawn from its region."""
    rng = np.random.default_rng(seed)
    regs = make_regions(params)
    spread = 0.8 * R if spread is None else spread
    # hotspots on a jittered coarse grid so that they stay far apart
    k = math.ceil(K ** (1 / 3))
    cells = np.array(list(product(range(k), repeat=3)))[rng.permutation(k ** 3)[:K]]
    pts = (-spread + (cells + 0.5) * (2 * spread / k)
           + rng.uniform(-0.25, 0.25, size=(K, 3)) * (2 * spread / k))
    fams, xis = [], []
    for reg in regs:
        xi = reg.sample(K, rng)
        d = paraboloid_normal(xi)
        fams.append([Tube(dd, p) for dd, p in zip(d, pts)])
        xis.append(xi)
    return TriFamily(fams, params, regs, tuple(xis), meta={"seed": seed, "R": R, "kind": "hotspot"})


def dense_family(params, counts, R, seed, frac=0.5):
    """Anchors uniform in a sub-cube of side frac * 2R."""
    f = sample_family(params, counts, R * frac, seed)
    f.meta.update({"R": R, "kind": "dense"})
    return f


CORPUS_TYPES = ((0, 1, 0), (1, 1, 0), (0, 1, 1), (1, 1, 1), (1, 2, 0), (1, 2, 1), (2, 2, 1), (1, 3, 0))


def corpus(n_seeds=9, types=CORPUS_TYPES, counts=40):
    """Deterministic acceptance corpus: for every type (r, j, t), uniform,
    dense-sub-box and hotspot arrangements over n_seeds seeds each, in the
    box Q_R analysed by the schedule.  Yields (name, family, R)."""
    for r, j, t in types:
        params = TypeParams(r, j, t)
        # the smallest box above 2^(j+t+1) that a schedule realizes exactly
        R = build_schedule(params, 2.0 ** (j + t + 1)).R
        for seed in range(n_seeds):
            yield (f"uniform-{r}{j}{t}-{seed}", sample_family(params, (counts,) * 3, R, seed), R)
            yield (f"dense-{r}{j}{t}-{seed}", dense_family(params, (counts,) * 3, R, seed), R)
            yield (f"hotspot-{r}{j}{t}-{seed}", hotspot_family(params, 8, R, seed), R)


# --- induction step ------------------------------------------------------------------

@dataclass
class ScaleTiles:
    """Per-tile integrals and tube counts of the P_s tiles of Q_R."""
    lattice: CellLattice
    box: Parallelepiped
    exps: dict
    keys: dict
    integral: dict
    counts: dict


def _tile_data(f, params, R, scales, h, budget):
    from .geometry import frame_from
    j, t = params.j, params.t
    frame = frame_from(np.asarray(params.w), np.asarray(params.m))
    top = np.array([t, 0, j + t]) + max(scales)
    lat = CellLattice(frame, -(2.0 ** top) / 2)
    box = cube(R)
    hits = unit_hits(f, lat, box)
    cf = rasterize(f, box, h=h, budget=budget)
    centers, terms = triple_terms(cf)
    ukeys = lat.unit_keys(centers) if len(centers) else np.zeros((0, 3), np.int64)
    exps, keys, integ, counts = {}, {}, {}, {}
    from .multiscale import pack
    for s in scales:
        e = np.array([t, 0, j + t], dtype=np.int64) + s
        exps[s] = e
        c = []
        for n in range(3):
            k, cnt = hits.count(n, e)
            c.append(dict(zip(k.tolist(), cnt.tolist())))
        common = sorted(set(c[0]) & set(c[1]) & set(c[2]))
        keys[s] = np.array(common, dtype=np.int64)
        counts[s] = {k: (c[0][k], c[1][k], c[2][k]) for k in common}
        tk = pack(ukeys >> e) if len(ukeys) else np.zeros(0, np.int64)
        acc = {}
        for key, val in zip(tk.tolist(), terms.tolist()):
            acc.setdefault(key, []).append(val)
        integ[s] = {k: math.fsum(acc.get(k, [])) * cf.grid.h ** 3 for k in common}
    return ScaleTiles(lat, box, exps, keys, integ, counts), hits, cf.grid.describe()


def M_value(tiles, s, params):
    """max over tiles met by all families of the normalized integral."""
    j, t, r = params.j, params.t, params.r
    best, arg = 0.0, None
    for k in tiles.keys[s].tolist():
        val = tiles.integral[s][k] / (2.0 ** ((j + t + r) / 2) * math.prod(tiles.counts[s][k]) ** 0.5)
        if val > best:
            best, arg = val, k
    return best, arg


def _proj_area(cell, d):
    g = cell.frame * cell.lengths[:, None]
    return sum(abs(np.linalg.det(np.stack([g[a], g[b], d]))) for a, b in ((0, 1), (0, 2), (1, 2)))


def tube_count_ratio(f, lattice, box, s, lam, big_key, params, den=None):
    """prod_n |T_n[s](A(Q_R, P[s]), P_{s+lam})|^{1/2} / prod_n |T_n(P_{s+lam})|^{1/2}.

    For every P_s tile C of the P_{s+lam} cell and every family-n tube T'
    whose 2^s-thickening meets C, the tubes of radius 2^s parallel to T'
    meeting C are counted in the covering-density sense, as
    (projected area of C along T') / (pi 4^s).  `den` (the tube counts of
    P_{s+lam} ∩ Q_R) defaults to the exact test against the whole cell."""
    j, t = params.j, params.t
    e_small = np.array([t, 0, j + t], dtype=np.int64) + s
    e_big = e_small + lam
    big = lattice.cell(e_big, unpack(np.array([big_key]))[0])
    sub = np.array(list(product(*[range(2 ** lam)] * 3)), dtype=np.int64)
    small_keys = (unpack(np.array([big_key]))[0] << lam) + sub
    from .geometry import boxes_overlap
    cen = lattice.centers(e_small, small_keys)
    inside = boxes_overlap(box, lattice.proto(e_small), centers_b=cen)
    rad = 2.0 ** s
    num, given = [], den
    den = []
    for n in range(3):
        anchors, dirs, radii = f.arrays(n)
        if given is None:
            meets_big = line_box_distance(anchors, dirs, big) <= radii * (1 + 1e-12) if len(anchors) else []
            den.append(int(np.sum(meets_big)))
        else:
            den.append(int(given[n]))
        tot = 0.0
        for c in cen[inside]:
            C = lattice.proto(e_small).translated(c)
            hit = line_box_distance(anchors, dirs, C) <= rad * (1 + 1e-12) if len(anchors) else []
            for d in dirs[np.asarray(hit, dtype=bool)]:
                tot += _proj_area(C, d) / (math.pi * rad ** 2)
        num.append(tot)
    pred = 2.0 ** (j / 2 - params.r / 2 + 3 * t / 2)
    if min(den) == 0:
        return None, pred, num, den
    return (math.prod(num) / math.prod(den)) ** 0.5, pred, num, den


def translate_cover(f, lattice, s, lam, big_key, params, n_points=1500, seed=0, max_pairs=3):
    """Translate covering: for pairs T, T' of one subfamily (lambda
    refinement) whose 2^s-thickenings meet a common P_s tile C inside the
    P_{s+lam} cell, cover Z(T) = {p in P_{s+lam}: the line p + R d_T meets
    the 2^s-neighbourhood of C} by translates of Z(T') along the 27
    lattice neighbours of C (greedy set cover on sampled points).
    Returns the largest |A| found (inf if some Z(T) is not covered)."""
    j, t = params.j, params.t
    rng = np.random.default_rng(seed)
    e_small = np.array([t, 0, j + t], dtype=np.int64) + s
    e_big = e_small + lam
    big_idx = unpack(np.array([big_key]))[0]
    big = lattice.cell(e_big, big_idx)
    proto = lattice.proto(e_small)
    rad = 2.0 ** s
    sub = np.array(list(product(*[range(2 ** lam)] * 3)), dtype=np.int64)
    small_keys = (big_idx << lam) + sub
    shifts = np.array(list(product((-1, 0, 1), repeat=3)), dtype=float)
    moves = (shifts * proto.lengths) @ proto.frame
    pts = big.center + (rng.uniform(-0.5, 0.5, size=(n_points, 3)) * big.lengths) @ big.frame
    worst, pairs = 0, 0
    for n in range(3):
        anchors, dirs, radii = f.arrays(n)
        if len(anchors) < 2 or f.xis is None:
            continue
        a, b = subregion_index(f.regions[n], f.xis[n], lam)
        lab = a * 2 ** lam + b
        done = 0
        for key in small_keys:
            if done >= max_pairs:
                break
            C = proto.translated(lattice.centers(e_small, key[None])[0])
            hit = np.flatnonzero(line_box_distance(anchors, dirs, C) <= rad * (1 + 1e-12))
            for i, k in ((i, k) for i in hit for k in hit if k > i and lab[i] == lab[k]):
                if done >= max_pairs:
                    break
                done += 1
                pairs += 1
                target = pts[line_box_distance(pts, dirs[i], C) <= rad]
                if not len(target):
                    continue
                m = len(target)
                cen = np.repeat(C.center + moves, m, axis=0)
                cover = (line_box_distance(np.tile(target, (len(moves), 1)), dirs[k], C,
                                           centers=cen) <= rad).reshape(len(moves), m)
                left = np.ones(m, dtype=bool)
                used = 0
                while left.any():
                    gain = (cover & left).sum(axis=1)
                    if gain.max() == 0:
                        used = math.inf
                        break
                    left &= ~cover[int(np.argmax(gain))]
                    used += 1
                worst = max(worst, used)
    return worst, pairs


def check_induction_step(f, s, lam, h=0.5, ceiling=4.0, R=None, params=None,
                         budget=DEFAULT_BUDGET, count_factor=8.0, cover_ceiling=27, tiles=None):
    """M(s+lam) <= ceiling * M(s), the tube-count relation within
    count_factor and the translate covering with |A| <= cover_ceiling."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    params = params or f.params
    R = R if R is not None else f.meta.get("R")
    if tiles is None:
        tiles, _, grid = _tile_data(f, params, R, sorted({s, s + lam}), h, budget)
    else:
        grid = {}
    Ms, _ = M_value(tiles, s, params)
    Ml, arg = M_value(tiles, s + lam, params)
    if Ms == 0 and Ml == 0:
        rep = _report("induction", 0.0, 0.0, ceiling, grid=grid, notes=["vacuous: no tile meets all families"])
        rep.passed = True
        return rep
    rep = _report("induction", Ml, Ms, ceiling, grid=grid, details={"s": s, "lambda": lam})
    if lam == 0:
        return rep
    ok = rep.passed
    ratio, pred, num, den = tube_count_ratio(f, tiles.lattice, tiles.box, s, lam, arg, params,
                                        den=tiles.counts[s + lam][arg])
    if ratio is not None:
        dev = max(ratio / pred, pred / ratio)
        rep.details.update({"count_ratio": ratio, "count_predicted": pred, "count_deviation": dev})
        ok &= dev <= count_factor
    A, pairs = translate_cover(f, tiles.lattice, s, lam, arg, params)
    rep.details.update({"cover_size": A, "re_pairs": pairs})
    ok &= A <= cover_ceiling
    rep.passed = bool(ok)
    return rep
