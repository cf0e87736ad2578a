import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from premap.geometry import (Box, EmptyPreimageError, HalfSpace, Mode, Polytope,
                             PolytopeUnion, coverage_ratio, derive_rng, estimate_volume,
                             exact_volume, membership, polygon_area_2d, sample_box)

UNIT2 = Box([0, 0], [1, 1])


def test_membership_examples():
    assert membership(Polytope(UNIT2), np.array([0.5, 0.5]))
    p = Polytope(UNIT2, (HalfSpace([1, 0], -0.5),))
    assert not membership(p, np.array([0.25, 0.9]))
    assert membership(p, np.array([0.5, 0.9]))  # on the face
    assert membership(Polytope(UNIT2), np.array([1.0, 0.0]))  # box corner


def test_membership_dimension_mismatch():
    with pytest.raises(ValueError):
        membership(Polytope(UNIT2), np.zeros(3))


def test_box_invariants():
    with pytest.raises(ValueError):
        Box([1.0], [0.0])
    with pytest.raises(ValueError):
        Box([0.0, 0.0], [1.0])
    assert Box([0, 1], [2, 4]).volume == 6.0


def test_bisect():
    left, right = Box([0, 0], [2, 2]).bisect(0)
    assert left == Box([0, 0], [1, 2]) and right == Box([1, 0], [2, 2])


def test_sample_box_determinism_and_range():
    box = Box([0.0], [1.0])
    a = sample_box(box, 3, 42)
    assert a.shape == (3, 1)
    assert np.all((a >= 0) & (a <= 1))
    assert np.array_equal(a, sample_box(box, 3, 42))


def test_sample_degenerate_box():
    x = sample_box(Box([2, 0], [2, 1]), 100, 0)
    assert np.all(x[:, 0] == 2.0)


def test_sample_mean():
    x = sample_box(Box([0.0], [2.0]), 100_000, 1)
    assert abs(x.mean() - 1.0) < 0.01


def test_sample_needs_points():
    with pytest.raises(ValueError):
        sample_box(UNIT2, 0, 0)


def test_derive_rng_streams():
    a = derive_rng(3, "node", "root.0").random(5)
    assert np.array_equal(a, derive_rng(3, "node", "root.0").random(5))
    assert not np.array_equal(a, derive_rng(3, "node", "root.1").random(5))
    assert not np.array_equal(a, derive_rng(4, "node", "root.0").random(5))


def test_estimate_volume():
    box = Box([0, 0], [2, 3])
    x = sample_box(box, 1000, 0)
    assert estimate_volume(lambda p: np.ones(len(p), bool), box, x) == 6.0
    assert estimate_volume(lambda p: np.zeros(len(p), bool), box, x) == 0.0
    with pytest.raises(ValueError):
        estimate_volume(lambda p: p, box, np.zeros((0, 2)))


def test_estimate_half_volume():
    h = HalfSpace([1, 1], -1.0)
    x = sample_box(UNIT2, 100_000, 2)
    assert abs(estimate_volume(h.contains, UNIT2, x) - 0.5) < 0.01


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1), st.floats(0, 1))
def test_nested_predicates(a0, a1, b, shift):
    x = sample_box(UNIT2, 500, 3)
    p = HalfSpace([a0, a1], b)
    q = HalfSpace([a0, a1], b + shift)
    vp = estimate_volume(p.contains, UNIT2, x)
    vq = estimate_volume(q.contains, UNIT2, x)
    assert 0 <= vp <= vq <= UNIT2.volume


def test_coverage_ratio_counts():
    x = sample_box(UNIT2, 960, 5)
    pre = lambda p: p[:, 0] >= 0.5  # noqa: E731
    full = PolytopeUnion((Polytope(UNIT2, (HalfSpace([1, 0], -0.5),)),), Mode.UNDER)
    assert coverage_ratio(full, pre, UNIT2, x) == 1.0
    empty = PolytopeUnion((), Mode.UNDER)
    assert coverage_ratio(empty, pre, UNIT2, x) == 0.0
    inner = PolytopeUnion((Polytope(UNIT2, (HalfSpace([1, 0], -0.75),)),), Mode.UNDER)
    expected = np.count_nonzero(x[:, 0] >= 0.75) / np.count_nonzero(x[:, 0] >= 0.5)
    assert coverage_ratio(inner, pre, UNIT2, x) == expected


def test_coverage_ratio_empty_preimage():
    x = sample_box(UNIT2, 100, 5)
    with pytest.raises(EmptyPreimageError):
        coverage_ratio(PolytopeUnion((), Mode.UNDER), lambda p: np.zeros(len(p), bool),
                       UNIT2, x)


def test_union_counts_overlap_once():
    a = Polytope(UNIT2, (HalfSpace([1, 0], -0.25),))
    b = Polytope(UNIT2, (HalfSpace([-1, 0], 0.75),))
    u = PolytopeUnion((a, b), Mode.OVER)
    x = sample_box(UNIT2, 2000, 1)
    assert np.all(u.contains(x))
    counts = u.membership_counts(x)
    assert counts.max() == 2 and counts.min() == 1


def test_polygon_area_examples():
    assert polygon_area_2d(UNIT2, []) == 1.0
    assert polygon_area_2d(UNIT2, [HalfSpace([-1, -1], 1.0)]) == pytest.approx(0.5, abs=1e-15)
    assert polygon_area_2d(UNIT2, [HalfSpace([1, 0], -2.0)]) == 0.0
    with pytest.raises(ValueError):
        polygon_area_2d(Box([0], [1]), [])


def test_polygon_area_matches_monte_carlo():
    rng = np.random.default_rng(9)
    box = Box([0, 0], [2, 2])
    # planes through points near the centre so the intersection stays non-trivial
    hs = []
    for _ in range(20):
        a = rng.normal(size=2)
        p = rng.uniform(0.6, 1.4, 2)
        hs.append(HalfSpace(a, -a @ p + 0.8 * np.linalg.norm(a)))
    area = polygon_area_2d(box, hs)
    x = sample_box(box, 1_000_000, 10)
    mc = estimate_volume(Polytope(box, tuple(hs)).contains, box, x)
    assert area > 0.05
    assert abs(area - mc) < 0.005


def test_polygon_area_order_independent():
    rng = np.random.default_rng(4)
    hs = [HalfSpace(rng.normal(size=2), 0.4) for _ in range(6)]
    ref = polygon_area_2d(UNIT2, hs)
    for perm in itertools.islice(itertools.permutations(hs), 50):
        assert abs(polygon_area_2d(UNIT2, list(perm)) - ref) < 1e-9


def test_exact_volume_1d():
    p = Polytope(Box([0], [2]), (HalfSpace([1], -0.5), HalfSpace([-2], 3.0)))
    assert exact_volume(p) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        exact_volume(Polytope(Box([0, 0, 0], [1, 1, 1])))


def test_union_json_round_trip():
    u = PolytopeUnion((Polytope(UNIT2, (HalfSpace([1, -1], 0.25),)), Polytope(UNIT2)),
                      Mode.OVER)
    d = u.to_dict()
    assert d["mode"] == "over"
    assert d["polytopes"][0] == {"box": {"lower": [0.0, 0.0], "upper": [1.0, 1.0]},
                                 "halfspaces": [{"a": [1.0, -1.0], "b": 0.25}]}
    back = PolytopeUnion.from_dict(d)
    x = sample_box(UNIT2, 500, 0)
    assert np.array_equal(back.contains(x), u.contains(x))


def test_halfspace_constant_flag():
    assert HalfSpace([0, 0], 1.0).is_constant
    assert not HalfSpace([0, 1e-3], 1.0).is_constant
    with pytest.raises(ValueError):
        HalfSpace([np.inf, 0], 0.0)
