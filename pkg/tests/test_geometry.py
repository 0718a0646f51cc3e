import numpy as np
import pytest

from kakeya_lab.geometry import (Cap, Parallelepiped, Strip, Tube, axis_distance, boxes_overlap,
                                 cube, frame_from, line_box_distance, make_parallelepiped,
                                 paraboloid_normal, rotate2, strip_contains, tile, tube_meets_box,
                                 unit, wedge3)


def random_box(rng):
    frame = rng.normal(size=(3, 3))
    frame /= np.linalg.norm(frame, axis=1)[:, None]
    return Parallelepiped(frame, rng.uniform(-1, 2, 3), rng.normal(size=3))


def sampled_box_distance(a, d, box, k=24):
    # oracle: distance from the line to a dense lattice of points of the box
    s = np.linspace(-0.5, 0.5, k)
    c = np.stack(np.meshgrid(s, s, s, indexing="ij"), -1).reshape(-1, 3)
    pts = box.center + (c * box.lengths) @ box.frame
    return axis_distance(a, d, pts).min(), np.linalg.norm(box.lengths) / (k - 1)


def test_paraboloid_normal_is_unit_and_parallel():
    xi = np.array([[0.3, 1.2], [0.0, 0.0], [1.9, 0.4]])
    n = paraboloid_normal(xi)
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0, rtol=1e-15)
    raw = np.column_stack([xi, -np.ones(3)])
    np.testing.assert_allclose(np.cross(n, raw), 0.0, atol=1e-15)


def test_wedge3_matches_triple_product():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(50, 3, 3))
    expect = np.abs(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])))
    np.testing.assert_allclose(wedge3(v[:, 0], v[:, 1], v[:, 2]), expect, rtol=1e-12)
    assert wedge3(*np.eye(3)) == pytest.approx(1.0)


def test_rotate_and_unit():
    np.testing.assert_allclose(rotate2([1, 0], np.pi / 2), [0, 1], atol=1e-15)
    with pytest.raises(ValueError):
        unit([0, 0, 0])


def test_cap_and_strip_membership():
    cap = Cap(np.array([0.5, 0.5]), 1)
    assert cap.contains([0.75, 0.99])
    assert not cap.contains([1.01, 0.6])
    s = Strip(2, np.array([1.0, 0.0]), np.array([0.0, 0.0]))
    assert strip_contains(s, [5.0, 0.25])
    assert not strip_contains(s, [0.0, 0.26])


def test_frame_rows():
    w, m = unit([1.0, 2.0]), np.array([0.3, 0.7])
    f = frame_from(w, m)
    np.testing.assert_allclose(np.linalg.norm(f, axis=1), 1.0)
    np.testing.assert_allclose(f[0], [*w, 0.0])
    np.testing.assert_allclose(f[2], unit([*m, -1.0]))
    np.testing.assert_allclose([f[1] @ f[0], f[1] @ f[2]], 0.0, atol=1e-15)


def test_parallelepiped_exponents_and_volume():
    w, m = unit([1.0, 1.0]), np.array([0.2, 0.4])
    P = make_parallelepiped(3, 2, w, m, 0.5, 0.5, lam=1)
    np.testing.assert_allclose(P.exponents, [0.5 * 3 + 2 + 1, 1.5 + 1 + 1, 5 + 1])
    corners = P.corners()
    # volume of the box spanned by its edge vectors
    edges = P.frame * P.lengths[:, None]
    assert P.volume == pytest.approx(abs(np.linalg.det(edges)))
    assert np.all(P.contains(corners))
    with pytest.raises(ValueError):
        make_parallelepiped(1, 1, w, m, 1.5, 0.5)


def test_line_box_distance_against_sampling():
    rng = np.random.default_rng(1)
    for _ in range(40):
        box = random_box(rng)
        a = rng.normal(size=(6, 3)) * 4
        d = np.array([unit(x) for x in rng.normal(size=(6, 3))])
        exact = line_box_distance(a, d, box)
        for i in range(6):
            approx, step = sampled_box_distance(a[i], d[i], box)
            assert exact[i] <= approx + 1e-9
            assert exact[i] >= approx - step


def test_line_box_distance_shared_direction_matches_general():
    rng = np.random.default_rng(2)
    for k in range(30):
        box = random_box(rng)
        d = box.frame[k % 3] if k % 2 else unit(rng.normal(size=3))
        a = rng.normal(size=(40, 3)) * 3
        fast = line_box_distance(a, d, box)
        dirs = np.tile(d, (41, 1))
        dirs[-1] = unit(rng.normal(size=3))
        general = line_box_distance(np.vstack([a, a[:1]]), dirs, box)[:40]
        np.testing.assert_allclose(fast, general, atol=1e-12)


def test_line_box_distance_translates():
    rng = np.random.default_rng(3)
    box = random_box(rng)
    cen = rng.normal(size=(10, 3)) * 3
    a, d = rng.normal(size=3), unit(rng.normal(size=3))
    got = line_box_distance(a, d, box, centers=cen)
    want = [line_box_distance(a, d, box.translated(c))[0] for c in cen]
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_tube_meets_box_axis_cases():
    box = cube(1.0)
    tubes = [Tube([0, 0, 1], [0, 0, 0]), Tube([0, 0, 1], [1.99, 0, 0]), Tube([0, 0, 1], [2.01, 0, 0]),
             Tube([0, 0, 1], [1.7, 1.7, 0])]
    # the last tube is 0.7 * sqrt(2) ~ 0.99 from the box edge
    np.testing.assert_array_equal(tube_meets_box(tubes, box), [True, True, False, True])


def test_boxes_overlap_faces_do_not_count():
    a = cube(1.0)
    assert not boxes_overlap(a, a.translated([2.0, 0, 0]))
    assert boxes_overlap(a, a.translated([1.999, 0, 0]))
    rot = Parallelepiped(np.array([unit([1, 1, 0]), unit([-1, 1, 0]), [0, 0, 1]]), np.ones(3))
    assert not boxes_overlap(a, rot.translated([1 + np.sqrt(2) + 1e-6, 0, 0]))
    assert boxes_overlap(a, rot.translated([1 + np.sqrt(2) - 1e-3, 0, 0]))


def test_tiling_double_host_has_27_tiles():
    proto = cube(0.5)
    t = tile(cube(1.0), proto)
    assert len(t) == 27
    t = tile(cube(4.0), proto)
    assert len(t) == 9 ** 3


@pytest.mark.parametrize("seed", range(5))
def test_tiling_disjoint_cover_anchored(seed):
    rng = np.random.default_rng(seed)
    host = random_box(rng)
    proto = Parallelepiped(frame_from(unit(rng.normal(size=2)), rng.uniform(0, 1, 2)),
                           host.exponents.max() - rng.uniform(1.5, 2.5, 3))
    t = tile(host, proto)
    # centre anchoring: the lattice contains the host centre as a tile centre
    k0 = np.all(t.indices == 0, axis=1)
    assert k0.sum() == 1
    np.testing.assert_allclose(t.centers[k0][0], host.center)
    # coverage: every host point lies in the tile its lattice index names
    pts = host.center + (rng.uniform(-0.5, 0.5, (2000, 3)) * host.lengths) @ host.frame
    idx = t.locate(pts)
    listed = {tuple(k) for k in t.indices}
    assert all(tuple(k) in listed for k in idx)
    c = proto.translated(host.center).local(pts) / proto.lengths
    np.testing.assert_array_equal(np.floor(c + 0.5), idx)
    # disjointness: distinct lattice translates share no interior
    cen = t.centers[:20]
    for i in range(len(cen)):
        others = np.delete(cen, i, axis=0)
        assert not boxes_overlap(proto.translated(cen[i]), proto, centers_b=others).any()
