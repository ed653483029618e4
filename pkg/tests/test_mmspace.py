import numpy as np
import pytest

from rcdlab.mmspace import (
    FiniteMMSpace,
    SpaceError,
    check_growth_condition,
    graph_shortest_paths,
    make_model_space,
    product_space,
    space_from_json,
    space_to_json,
    validate_space,
)


def floyd_warshall(n, edges):
    # independent shortest-path oracle
    d = np.full((n, n), np.inf)
    np.fill_diagonal(d, 0.0)
    for i, j, w in edges:
        d[i, j] = min(d[i, j], w)
        d[j, i] = min(d[j, i], w)
    for k in range(n):
        for i in range(n):
            for j in range(n):
                if d[i, k] + d[k, j] < d[i, j]:
                    d[i, j] = d[i, k] + d[k, j]
    return d


def test_one_point_space_passes():
    s = FiniteMMSpace(("a",), np.zeros((1, 1)), np.array([1.0]))
    assert validate_space(s).passed


def test_triangle_violation_witnessed():
    d = np.array([[0.0, 1.0, 5.0], [1.0, 0.0, 1.0], [5.0, 1.0, 0.0]])
    s = FiniteMMSpace(("a", "b", "c"), d, np.ones(3))
    rep = validate_space(s)
    assert not rep.passed
    tri = [v for v in rep.violations if v[0] == "triangle"]
    assert tri and tri[0][2] == pytest.approx(3.0)


def test_random_graph_space_matches_floyd_warshall():
    s = make_model_space("random_metric", 20, {"seed": 3})
    assert validate_space(s).passed
    oracle = floyd_warshall(s.n, s.graph)
    assert np.abs(oracle - s.metric).max() < 1e-12


def test_shortest_path_closure_idempotent():
    s = make_model_space("random_metric", 15, {"seed": 7})
    edges = [(i, j, s.metric[i, j]) for i, j, _ in s.graph]
    again = graph_shortest_paths(s.n, edges)
    assert np.abs(again - s.metric).max() < 1e-12


def test_segment_two_points():
    s = make_model_space("segment", 2)
    assert np.allclose(s.metric, [[0, 1], [1, 0]])
    assert np.allclose(s.ref_measure, [0.5, 0.5])


def test_cycle_four_distances():
    s = make_model_space("cycle", 4)
    assert s.metric[0, 2] == pytest.approx(0.5)
    assert s.metric[0, 1] == pytest.approx(0.25)


def test_gaussian_profile_decreasing_from_base():
    s = make_model_space("segment", 64, {"measure": {"gaussian": 2.0}})
    x0 = s.base_point
    V = s.metric[:, x0]
    expected = np.exp(-2.0 * V**2)
    expected /= expected.sum()
    assert np.allclose(s.ref_measure, expected, atol=1e-15)
    left = s.ref_measure[: x0 + 1]
    assert np.all(np.diff(left) >= -1e-18)  # increasing toward the peak


def test_model_spaces_validate():
    for kind, n in (("segment", 9), ("cycle", 8), ("two_point", 2), ("grid", 3)):
        assert validate_space(make_model_space(kind, n)).passed, kind


def test_dimension_mismatch_is_structural_error():
    with pytest.raises(SpaceError):
        FiniteMMSpace(("a", "b"), np.zeros((3, 3)), np.ones(2))


def test_product_of_points_is_point():
    p = make_model_space("two_point", 2)
    one = FiniteMMSpace((0,), np.zeros((1, 1)), np.array([1.0]))
    prod = product_space(one, one)
    assert prod.n == 1


def test_product_metric_pythagoras():
    s = make_model_space("segment", 2)
    prod = product_space(s, s)
    # diagonal pair ((0,0),(1,1))
    i = 0
    j = prod.points.index((1, 1))
    assert prod.metric[i, j] == pytest.approx(np.sqrt(2.0))
    d2 = prod.metric**2
    for a, (xa, ya) in enumerate(prod.points):
        for b, (xb, yb) in enumerate(prod.points):
            assert d2[a, b] == pytest.approx(s.metric[xa, xb] ** 2 + s.metric[ya, yb] ** 2, abs=1e-12)
    assert validate_space(prod).passed


def test_growth_condition_values():
    one = FiniteMMSpace((0,), np.zeros((1, 1)), np.array([2.5]), base_point=0)
    assert check_growth_condition(one, 3.0) == pytest.approx(2.5)
    tp = make_model_space("two_point", 2)
    assert check_growth_condition(tp, np.log(2.0), 0) == pytest.approx(0.75)
    seg = make_model_space("segment", 64)
    z = check_growth_condition(seg, 1.0, 0)
    V = seg.metric[:, 0]
    assert z == pytest.approx(float(np.sum(np.exp(-(V**2)) * seg.ref_measure)))
    assert 0 < z < 1


def test_triangle_exhaustive_on_generated_spaces():
    for kind, n in (("segment", 30), ("cycle", 24), ("random_metric", 25)):
        s = make_model_space(kind, n, {"seed": 1})
        d = s.metric
        worst = max(
            d[i, j] - d[i, k] - d[k, j]
            for i in range(s.n) for j in range(s.n) for k in range(s.n)
        )
        assert worst <= 1e-12


def test_json_roundtrip_and_validation():
    s = make_model_space("cycle", 6, {"measure": {"gaussian": 1.0}})
    obj = space_to_json(s)
    s2 = space_from_json(obj)
    assert np.allclose(s2.metric, s.metric)
    assert np.allclose(s2.ref_measure, s.ref_measure)
    obj["measure"][0] = -1.0
    with pytest.raises(SpaceError):
        space_from_json(obj)
