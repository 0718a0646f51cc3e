import numpy as np
import pytest

from kakeya_lab.family_gen import (TriFamily, TypeParams, certify, decompose_subfamilies,
                                   make_regions, read_arrangement, sample_family, subregion_index,
                                   write_arrangement)
from kakeya_lab.geometry import Tube, paraboloid_normal, wedge3

TYPES = [(0, 0, 0), (0, 1, 0), (1, 1, 1), (1, 2, 0), (2, 3, 1), (1, 4, 2), (2, 5, 3)]


def test_r_above_j_rejected():
    with pytest.raises(ValueError, match="r ≤ j violated"):
        TypeParams(3, 1, 0)


def test_bad_parameters_rejected():
    with pytest.raises(ValueError):
        TypeParams(0, -1, 0)
    with pytest.raises(ValueError):
        TypeParams(0, 1, 0, epsilon=1.5)
    with pytest.raises(ValueError, match="unit vector"):
        TypeParams(0, 1, 0, w=(1.0, 1.0), m=(0.5, 0.5))


@pytest.mark.parametrize("r,j,t", TYPES)
def test_theta_tracks_anchor(r, j, t):
    p = TypeParams(r, j, t)
    assert p.theta_anchor / 8 <= p.theta <= p.theta_anchor * 8


@pytest.mark.parametrize("r,j,t", TYPES)
def test_samples_lie_in_regions(r, j, t):
    p = TypeParams(r, j, t)
    f = sample_family(p, (30, 20, 10), 8.0, seed=3)
    assert f.sizes == (30, 20, 10)
    for reg, xi, n in zip(f.regions, f.xis, range(3)):
        assert np.all(reg.contains(xi))
        assert np.all(np.linalg.norm(xi, axis=1) <= 2)
        np.testing.assert_allclose(f.arrays(n)[1], paraboloid_normal(xi))
        assert np.all(np.abs(f.arrays(n)[0]) <= 8.0)


@pytest.mark.parametrize("r,j,t", TYPES)
def test_certificate_against_bruteforce_wedges(r, j, t):
    f = sample_family(TypeParams(r, j, t), (12, 12, 12), 4.0, seed=0)
    c = certify(f)
    d = [f.arrays(n)[1] for n in range(3)]
    w = wedge3(d[0][:, None, None], d[1][None, :, None], d[2][None, None, :])
    assert c.sampled_triples == 12 ** 3
    assert c.min_wedge == pytest.approx(w.min(), rel=1e-12)
    assert c.max_wedge == pytest.approx(w.max(), rel=1e-12)
    assert c.passed


def test_sampling_is_seeded():
    p = TypeParams(1, 2, 1)
    a = sample_family(p, (5, 5, 5), 4.0, seed=11)
    b = sample_family(p, (5, 5, 5), 4.0, seed=11)
    c = sample_family(p, (5, 5, 5), 4.0, seed=12)
    np.testing.assert_array_equal(a.arrays(0)[0], b.arrays(0)[0])
    assert not np.array_equal(a.arrays(0)[0], c.arrays(0)[0])


def test_round_trip_is_exact(tmp_path):
    f = sample_family(TypeParams(1, 3, 2), (7, 5, 3), 32.0, seed=4)
    path = tmp_path / "a.tubes"
    write_arrangement(f, path)
    g = read_arrangement(path)
    assert g.params == f.params
    assert g.meta == f.meta
    assert g.theta == f.theta
    for n in range(3):
        for x, y in zip(f.arrays(n), g.arrays(n)):
            np.testing.assert_array_equal(x, y)
        np.testing.assert_array_equal(f.xis[n], g.xis[n])


def test_round_trip_without_params(tmp_path):
    f = TriFamily([[Tube([0, 0, 1], [0.1, 0.2, 0.3], 0.5)], [], [Tube([1, 0, 0], [0, 0, 0])]])
    path = tmp_path / "b.tubes"
    write_arrangement(f, path)
    g = read_arrangement(path)
    assert g.params is None and g.sizes == (1, 0, 1)
    np.testing.assert_array_equal(g.arrays(0)[0], f.arrays(0)[0])
    assert g.arrays(0)[2][0] == 0.5


def test_parse_error_names_line(tmp_path):
    path = tmp_path / "bad.tubes"
    path.write_text("header r=- j=- t=- w=- m=- epsilon=- seed=- R=- theta=-\n1 0 0 1 0 0\n")
    with pytest.raises(ValueError, match=":2:"):
        read_arrangement(path)


@pytest.mark.parametrize("lam", [0, 1, 2])
def test_subfamily_partition(lam):
    f = sample_family(TypeParams(1, 2, 1), (60, 60, 60), 8.0, seed=5)
    parts = decompose_subfamilies(f, lam)
    assert len(parts) <= 4 ** lam
    for n in range(3):
        got = np.concatenate([p.xis[n] for p in parts])
        assert len(got) == f.sizes[n]
        # the pieces partition the family (no tube lost or repeated)
        want = f.xis[n][np.lexsort(f.xis[n].T)]
        np.testing.assert_array_equal(got[np.lexsort(got.T)], want)


def test_subregion_index_refines():
    p = TypeParams(1, 2, 1)
    reg = make_regions(p)[0]
    xi = reg.sample(500, np.random.default_rng(0))
    a1, b1 = subregion_index(reg, xi, 1)
    a2, b2 = subregion_index(reg, xi, 2)
    # a level-2 cell lies inside the level-1 cell of half its index
    np.testing.assert_array_equal(a2 // 2, a1)
    np.testing.assert_array_equal(b2 // 2, b1)
