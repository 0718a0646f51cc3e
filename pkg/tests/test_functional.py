import math

import numpy as np
import pytest

from kakeya_lab.family_gen import TriFamily, TypeParams, sample_family
from kakeya_lab.functional import (CellUnion, Grid, Intersection, bilinear_integral, integral_over_Bsets,
                                   integrate, load_counts, rasterize, rasterize_naive,
                                   restricted_tube_count, trilinear_integral)
from kakeya_lab.geometry import Parallelepiped, Tube, cube, unit


def oracle_counts(f, g):
    # per voxel, per tube: distance from the centre to the axis via |(p - a) x d|
    idx = np.stack(np.meshgrid(*[np.arange(d) for d in g.dims], indexing="ij"), -1).reshape(-1, 3)
    p = g.origin + (idx + 0.5) * g.h
    out = np.zeros((3, len(p)), dtype=np.int64)
    for n, fam in enumerate(f.families):
        for t in fam:
            dist = np.linalg.norm(np.cross(p - t.anchor, t.direction), axis=1)
            out[n] += dist <= t.radius
    return out.reshape((3,) + g.dims)


def small_family(seed, counts=(10, 10, 10), R=4.0):
    return sample_family(TypeParams(1, 2, 1), counts, R, seed)


def test_grid_covering_alignment():
    g = Grid.covering(cube(2.0), 0.25)
    np.testing.assert_allclose(g.origin, -2.0)
    assert g.dims == (16, 16, 16)
    with pytest.raises(MemoryError):
        Grid.covering(cube(2.0), 0.25, budget=100)


@pytest.mark.parametrize("seed", range(4))
def test_rasterize_matches_oracle(seed):
    f = small_family(seed)
    box = cube(4.0)
    cf = rasterize(f, box, h=0.5)
    np.testing.assert_array_equal(cf.dense(), oracle_counts(f, cf.grid))
    np.testing.assert_array_equal(cf.dense(), rasterize_naive(f, cf.grid, box))


def test_trilinear_integral_matches_oracle():
    f = small_family(7, (20, 20, 20))
    box = cube(4.0)
    cf = rasterize(f, box, h=0.5)
    c = oracle_counts(f, cf.grid).astype(float)
    want = math.fsum(np.sqrt(c[0] * c[1] * c[2]).ravel().tolist()) * 0.5 ** 3
    assert trilinear_integral(cf, box).value == pytest.approx(want, rel=1e-12)


def test_single_tube_volume_converges():
    # chi_T^(1/2) cubed for three copies of the same tube is chi_T
    t = Tube(unit([1, 2, 3]), [0.1, -0.2, 0.3], 1.0)
    f = TriFamily([[t], [t], [t]])
    box = cube(3.0)
    exact = None
    errs = []
    for h in (0.25, 0.125):
        val = integrate(f, box, h=h).value
        # tube volume inside the cube, by fine Monte Carlo
        if exact is None:
            rng = np.random.default_rng(0)
            p = rng.uniform(-3, 3, (2_000_000, 3))
            exact = 216 * np.mean(np.linalg.norm(np.cross(p - t.anchor, t.direction), axis=1) <= 1)
        errs.append(abs(val - exact) / exact)
    assert errs[-1] < 0.02


def test_coarse_pass_keeps_integral():
    f = small_family(3, (30, 30, 30), R=6.0)
    box = cube(6.0)
    fine = integrate(f, box, h=0.25).value
    assert integrate(f, box, h=0.25, coarse=4).value == pytest.approx(fine, rel=1e-12)


def test_empty_family_integral_zero():
    f = TriFamily([[], [Tube([0, 0, 1], [0, 0, 0])], [Tube([1, 0, 0], [0, 0, 0])]])
    assert integrate(f, cube(2.0), h=0.5).value == 0.0
    assert restricted_tube_count(f, cube(2.0)) == (0, 1, 1)


def test_halfopen_union_counts_shared_face_once():
    a = cube(0.5, (0.5, 0.5, 0.5))
    b = cube(0.5, (1.5, 0.5, 0.5))
    u = CellUnion([a, b])
    assert u.contains([[1.0, 0.5, 0.5]]).sum() == 1
    assert a.contains([1.0, 0.5, 0.5]) and b.contains([1.0, 0.5, 0.5])
    assert u.volume == pytest.approx(2.0)


def test_integral_over_cells_adds_up():
    f = small_family(2, (25, 25, 25))
    cells = [cube(1.0, c) for c in [(-1, -1, -1), (1, -1, -1), (1, 1, 1), (-1, 1, -1)]]
    g = Grid(np.full(3, -2.0), 0.25, (16, 16, 16))
    whole = integral_over_Bsets(f, cells, g=g)
    parts = [integrate(f, c, h=0.25).value for c in cells]
    assert whole.value == pytest.approx(sum(parts), rel=1e-12)
    assert whole.region_volume == pytest.approx(32.0)
    with pytest.raises(ValueError, match="overlap"):
        integral_over_Bsets(f, [cells[0], cube(1.0, (-0.5, -1, -1))], g=g)


def test_intersection_region():
    a, b = cube(2.0), cube(1.0, (1.5, 0, 0))
    x = Intersection(a, b)
    lo, hi = x.bounds()
    np.testing.assert_allclose(lo, [0.5, -1, -1])
    np.testing.assert_allclose(hi, [2.0, 1, 1])
    np.testing.assert_array_equal(x.contains([[1.0, 0, 0], [2.2, 0, 0], [0.2, 0, 0]]), [True, False, False])


def test_bilinear_integral_oracle():
    f = small_family(9, (15, 15, 15))
    cf = rasterize(f, cube(4.0), h=0.5)
    c = oracle_counts(f, cf.grid).astype(float)
    for a, b in ((0, 1), (0, 2), (1, 2)):
        want = (c[a] * c[b]).sum() * 0.5 ** 3
        assert bilinear_integral(cf, a, b) == pytest.approx(want, rel=1e-12)


def test_restricted_counts_oriented_box():
    frame = np.array([unit([1, 1, 0]), unit([-1, 1, 0]), [0, 0, 1.0]])
    box = Parallelepiped(frame, np.array([1.0, 1.0, 1.0]))
    tubes = [Tube([0, 0, 1], [1.4, 0, 0], 0.1), Tube([0, 0, 1], [1.6, 0, 0], 0.1)]
    # the box reaches sqrt(2) along x; the second tube stops 0.086 short
    f = TriFamily([tubes, [], []])
    assert restricted_tube_count(f, box) == (1, 0, 0)


def test_dump_round_trip(tmp_path):
    f = small_family(1)
    cf = rasterize(f, cube(4.0), h=0.5)
    cf.dump(tmp_path / "c.bin")
    g, data = load_counts(tmp_path / "c.bin")
    assert g.dims == cf.grid.dims and g.h == cf.grid.h
    np.testing.assert_array_equal(data, cf.dense())
