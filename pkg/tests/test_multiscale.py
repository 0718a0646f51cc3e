import math

import numpy as np
import pytest

from kakeya_lab.family_gen import TypeParams, sample_family
from kakeya_lab.geometry import boxes_overlap, cube, line_box_distance
from kakeya_lab.multiscale import (CellLattice, DensityProfile, ScaleRecord, build_Bsets,
                                   build_schedule, children, compute_L, dyadic, lattice_for, modal,
                                   nested_census, pack, refinement_factor, shift, theorem_rhs,
                                   unit_hits, unpack)

TYPES = [(0, 1, 0), (1, 1, 1), (1, 2, 0), (1, 3, 2), (2, 4, 1), (2, 5, 3)]


@pytest.mark.parametrize("r,j,t", TYPES)
@pytest.mark.parametrize("R", [2.0 ** 5, 2.0 ** 7, 1000.0])
def test_schedule_is_valid(r, j, t, R):
    if R < 2 ** (j + t):
        pytest.skip("R below the first scale")
    sch = build_schedule(TypeParams(r, j, t), R)
    assert sch.violations() == []
    assert sch.R >= R
    # rounding R up costs less than one step
    step = round(sch.E[1] * j + sch.F[1] * t) if sch.S > 2 else 1
    assert math.ceil(math.log2(R)) <= sch.log2R < math.ceil(math.log2(R)) + step
    lv = [sch.levels(s) for s in range(1, sch.S + 1)]
    for s in range(sch.S - 1):
        # levels nest within a scale, and P3 at s nests in P at s+1
        order = ["U", "P2", "P1", "P", "P4", "P3"]
        e = [lv[s][k] for k in order]
        assert all(np.all(a <= b) for a, b in zip(e, e[1:]))
        assert np.all(lv[s]["P3"] <= lv[s + 1]["P"])


def test_schedule_rejects_small_R():
    with pytest.raises(ValueError):
        build_schedule(TypeParams(1, 3, 2), 16.0)


def test_pack_round_trip_and_shift():
    rng = np.random.default_rng(0)
    k = rng.integers(-5000, 5000, (200, 3))
    np.testing.assert_array_equal(unpack(pack(k)), k)
    de = np.array([1, 0, 3])
    np.testing.assert_array_equal(unpack(shift(pack(k), de)), np.floor_divide(k, 2 ** de))


def test_children_of_cells():
    keys = pack(np.array([[0, 0, 0], [-1, 2, 3]]))
    ch = children(keys, (1, 2, 0))
    assert len(ch) == 2 * 2 * 4
    np.testing.assert_array_equal(np.unique(shift(ch, (1, 2, 0))), np.sort(keys))


def test_lattice_keys_match_local_coordinates():
    p = TypeParams(1, 2, 1)
    lat = lattice_for(p, build_schedule(p, 64.0))
    rng = np.random.default_rng(1)
    pts = rng.uniform(-40, 40, (500, 3))
    for e in ([0, 0, 0], [1, 0, 3], [3, 2, 4]):
        keys = lat.keys(pts, e)
        # the cell with that key contains the point (half-open)
        for x, k in zip(pts[:50], keys[:50]):
            c = lat.cell(e, k)
            loc = c.local(x) / c.lengths
            assert np.all((loc >= -0.5 - 1e-12) & (loc < 0.5 + 1e-12))


def test_lattice_top_cell_centred():
    p = TypeParams(1, 2, 1)
    sch = build_schedule(p, 64.0)
    lat = lattice_for(p, sch)
    top = sch.levels(sch.S)["P"]
    np.testing.assert_allclose(lat.centers(top, np.zeros((1, 3))), 0.0, atol=1e-9)


def test_unit_hits_match_bruteforce():
    p = TypeParams(1, 2, 1)
    f = sample_family(p, (8, 8, 8), 8.0, seed=2)
    sch = build_schedule(p, 8.0)
    lat = lattice_for(p, sch)
    box = cube(8.0)
    hits = unit_hits(f, lat, box)
    proto = lat.proto((0, 0, 0))
    # every unit cell whose key range reaches the padded box
    k = lat.unit_keys(cube(12.0).corners())
    axes = [np.arange(a, b + 1) for a, b in zip(k.min(axis=0), k.max(axis=0))]
    g = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    cen = lat.centers((0, 0, 0), g)
    near = np.all(np.abs(cen) < 12, axis=1)
    g, cen = g[near], cen[near]
    inbox = boxes_overlap(box, proto, centers_b=cen)
    for n in range(3):
        anchors, dirs, radii = f.arrays(n)
        want = set()
        for i in range(len(anchors)):
            hit = (line_box_distance(anchors[i], dirs[i], proto, centers=cen) <= radii[i]) & inbox
            want |= {(i, int(k)) for k in pack(g[hit])}
        got = set(zip(hits.tid[n].tolist(), hits.key[n].tolist()))
        assert got == want


def test_dyadic_and_modal():
    np.testing.assert_array_equal(dyadic([0, 1, 3, 4, 7.9, 8]), [0, 1, 2, 4, 4, 8])
    best, mask = modal([2, 4, 4, 2, 8])
    assert best == 4  # tie between 2 and 4 goes to the larger class
    np.testing.assert_array_equal(mask, [False, True, True, False, False])


def test_nested_census_selects_modal_class():
    # parents along axis 2 (shift 1): two parents hold 2 children, one holds 1
    occ = pack(np.array([[0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 0, 3], [0, 0, 4]]))
    anchors, sel = nested_census(occ, [np.array([0, 0, 1])])
    assert anchors == [2.0]
    np.testing.assert_array_equal(unpack(sel[0]), [[0, 0, 0], [0, 0, 1]])


def test_compute_L_flags():
    assert compute_L(8, 4, 4) == (2.0, False)
    assert compute_L(2, 4, 4)[1]
    with pytest.raises(ValueError):
        compute_L(1, 0, 4)


@pytest.mark.parametrize("seed", range(3))
def test_profile_respects_caps(seed):
    p = TypeParams(1, 2, 1)
    f = sample_family(p, (40, 40, 40), 16.0, seed)
    sch = build_schedule(p, 16.0)
    bs, prof = build_Bsets(f, sch)
    assert prof.complete
    assert prof.cap_violations() == []
    B = bs.region(1)
    assert len(B) > 0
    # every B_1 cell sits inside a selected P cell at every scale below S
    for s in range(1, sch.S):
        e, keys = bs.A1[s]
        assert np.all(np.isin(shift(B.packed, e - B.exps), keys))


def test_refinement_factors_by_hand():
    sch = build_schedule(TypeParams(1, 2, 1), 64.0)
    recs = [ScaleRecord(s, sch.M[s - 1], sch.N[s - 1], sch.E[s - 1], sch.F[s - 1]) for s in range(1, sch.S + 1)]
    recs[0].mu = (1.0, 2.0, 2.0, 1.0, 1.0)
    recs[0].beta1 = (0.5, 1.0, 1.0)
    for r in recs[1:]:
        r.mu = (1.0, 1.0, 1.0, 2.0, 8.0)
        r.beta1 = (1.0, 1.0, 1.0)
        r.beta2 = (1.0, 0.5, 1.0)
    prof = DensityProfile(1, 2, 1, sch, recs)
    S = prof.S
    assert refinement_factor(prof, 1) == pytest.approx(0.5 ** 0.5 * 2 ** 0.5 * 2)
    assert refinement_factor(prof, S) == pytest.approx(0.5 ** 0.5 / 4)
    if S > 2:
        assert refinement_factor(prof, 2) == pytest.approx(0.5 ** 0.5 / 4)
    b = theorem_rhs(prof, C=4.0)
    # S(s+1) = 0.177 <= 1/4 for every s < S, so I = {1, ..., S}
    assert b.I == tuple(range(1, S + 1))
    assert b.rhs == pytest.approx(4.0 ** S * 2 * (0.5 ** 0.5 / 4) ** (S - 1))
