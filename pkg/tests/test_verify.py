import math

import numpy as np
import pytest

from kakeya_lab.family_gen import TriFamily, TypeParams, sample_family
from kakeya_lab.geometry import Tube, cube, wedge3
from kakeya_lab.multiscale import build_Bsets, build_schedule, refinement_factor
from kakeya_lab.verify import (check_cord, check_gtem, check_induction_step, check_loomis_whitney,
                               cord_terms, fit_slope, hotspot_family, lw_pack, remark_product,
                               sheared_pack, structured_pack, sweep_cell, sweep_theta, trial_seed)


def test_lw_pack_counts_are_one():
    f, region = lw_pack(4)
    assert f.sizes == (16, 16, 16)
    rep = check_loomis_whitney(f, region, h=0.25)
    # every voxel of the cube is in exactly one tube per family
    assert rep.lhs == pytest.approx(4.0 ** 3, rel=1e-12)
    assert rep.rhs == pytest.approx(16.0 ** 1.5)
    assert rep.implied_constant == pytest.approx(1.0)


@pytest.mark.parametrize("theta", [1.0, 0.5, 0.25])
def test_sheared_pack_wedge(theta):
    f, region = sheared_pack(4, theta)
    assert f.theta == pytest.approx(theta)
    d = [f.arrays(n)[1][0] for n in range(3)]
    assert wedge3(*d) == pytest.approx(theta)
    # every tilted tube axis meets the cube
    rep = check_loomis_whitney(f, region)
    assert rep.passed and rep.implied_constant <= 2


def test_lw_rejects_coplanar():
    t = [Tube([1, 0, 0], [0, 0, 0])], [Tube([0, 1, 0], [0, 0, 0])], [Tube([1, 1, 0], [0, 0, 0])]
    with pytest.raises(ValueError, match="theta = 0"):
        check_loomis_whitney(TriFamily(t), cube(2.0))


def test_lw_single_tubes_by_hand():
    # three orthogonal unit-radius tubes through the origin: the integral is
    # the Steinmetz tricylinder volume 8(2 - sqrt 2)
    t = [Tube(e, [0, 0, 0]) for e in np.eye(3)]
    rep = check_loomis_whitney(TriFamily([[t[0]], [t[1]], [t[2]]]), cube(2.0), h=1 / 32)
    assert rep.lhs == pytest.approx(8 * (2 - math.sqrt(2)), rel=0.01)
    assert rep.rhs == 1.0


def uniform_profile(seed=0, params=(1, 2, 1), R=16.0):
    p = TypeParams(*params)
    f = sample_family(p, (40, 40, 40), R, seed)
    sch = build_schedule(p, R)
    bs, prof = build_Bsets(f, sch)
    return f, sch, bs, prof


def test_cord_product_identity_and_pass():
    f, sch, bs, prof = uniform_profile()
    for s in range(1, prof.S):
        rep = check_cord(prof, s, f, bs)
        assert rep.details["identity"]
        assert rep.passed, rep.text()
        assert "pair13_measured" in rep.details


def test_cord_terms_formula():
    _, _, _, prof = uniform_profile()
    T = cord_terms(prof, 1)
    rec = prof.rec(1)
    A1, A2, A3 = T["A"]
    assert A3 == rec.mu[2]
    assert A1 == pytest.approx(rec.mu[0] ** 0.25 * 2 ** (prof.t * (1 - rec.F) / 2))
    lhs = A1 ** 3 * A2 * math.prod(rec.R1) ** 0.5
    assert T["main"][0] == pytest.approx(lhs)


def test_cord_needs_inner_scale():
    _, _, _, prof = uniform_profile()
    with pytest.raises(ValueError):
        check_cord(prof, prof.S)


def test_remark_product_bound():
    for seed in range(3):
        _, _, _, prof = uniform_profile(seed)
        lhs, rhs = remark_product(prof)
        assert lhs == pytest.approx(refinement_factor(prof, 1) * refinement_factor(prof, prof.S))
        assert lhs <= rhs


def test_gtem_uniform():
    f, sch, bs, prof = uniform_profile(1)
    rep = check_gtem(f, sch, C=4.0, h=0.5, bsets=bs, profile=prof)
    assert rep.passed, rep.text()
    assert rep.details["gain"] == pytest.approx(rep.details["baseline"] / rep.rhs)


def test_gtem_lhs_monotone_in_cells():
    # enlarging B_1 by the cells of a second selection cannot shrink lhs
    from kakeya_lab.functional import CellUnion, integrate
    f, sch, bs, prof = uniform_profile(2)
    B = bs.region(1)
    cells = B.cells()
    small = integrate(f, CellUnion(cells[: len(cells) // 2]), h=0.5).value
    big = integrate(f, CellUnion(cells), h=0.5).value
    assert big >= small


def test_hotspot_family_is_sparse():
    f = hotspot_family(TypeParams(1, 2, 1), 8, 16.0, seed=0)
    assert f.sizes == (8, 8, 8)
    a = [f.arrays(n)[0] for n in range(3)]
    np.testing.assert_array_equal(a[0], a[1])


def test_induction_lambda_zero_is_equality():
    f, *_ = uniform_profile(0)
    rep = check_induction_step(f, 1, 0, R=16.0)
    assert rep.lhs == rep.rhs and rep.implied_constant == 1.0


def test_induction_uniform_step():
    f, *_ = uniform_profile(0)
    rep = check_induction_step(f, 0, 1, R=16.0)
    assert rep.implied_constant <= 4
    assert rep.details["cover_size"] <= 27


def test_structured_pack_extended_region_holds_triple_points():
    p = TypeParams(1, 2, 1)
    f, X, Xe = structured_pack(p, seed=3)
    from kakeya_lab.functional import Grid, integrate, rasterize
    g = Grid.covering(cube(2.0 ** (p.j + p.t + 2)), 0.5)
    cf = rasterize(f, None, g=g)
    from kakeya_lab.functional import triple_terms
    pts, terms = triple_terms(cf)
    assert len(pts) and np.all(Xe.contains(pts))


def test_sweep_cell_theta_one():
    row = sweep_cell(0, 0, 0, trial_seed(1, 0, 0, 0, 0), h=0.5)
    assert row["theta"] > 0.1
    assert 0 < row["ratio"] * row["theta"] ** 0.5 < 16


def test_trial_seed_keyed():
    assert trial_seed(1, 0, 2, 1, 0) == trial_seed(1, 0, 2, 1, 0)
    assert trial_seed(1, 0, 2, 1, 0) != trial_seed(1, 0, 2, 1, 1)


def test_sweep_rows_and_determinism():
    a = sweep_theta([0, 1], [0, 1], [0], 2, seed=5, h=0.5)
    assert len(a.rows) == 3 * 2  # (r, j) in {(0,0), (0,1), (1,1)}
    b = sweep_theta([0, 1], [0, 1], [0], 2, seed=5, h=0.5, workers=2)
    assert [r["lhs"] for r in a.rows] == [r["lhs"] for r in b.rows]
    assert a.csv().splitlines()[0].startswith("r,j,t,R,theta,seed")


def test_fit_slope_recovers_exponent():
    rows = [{"j": k, "r": 0, "t": 0, "ratio": 3.0 * 2.0 ** (0.5 * k)} for k in range(6)]
    slope, icpt, resid = fit_slope(rows)
    assert slope == pytest.approx(-0.5)
    assert icpt == pytest.approx(math.log2(3.0))
    assert resid == pytest.approx(0.0, abs=1e-9)
