import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from topoguard.camera_graph import (CameraPose, build_adjacency, lipschitz_perturbation_bound,
                                    load_graph, neighborhoods, perturbation_bound, row_normalize)
from topoguard.errors import InvalidParameter, InvalidPose


def cams(*positions, rotations=None):
    rotations = rotations or [None] * len(positions)
    return [CameraPose(f"c{i}", p, r) for i, (p, r) in enumerate(zip(positions, rotations))]


def rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


def test_coincident_cameras_have_unit_affinity():
    g = build_adjacency(cams([1, 2, 3], [1, 2, 3]), 5.0)
    assert g.affinity[0, 1] == 1.0


def test_distance_sigma_sqrt2_gives_exp_minus_one():
    s = 3.0
    g = build_adjacency(cams([0, 0, 0], [s * math.sqrt(2), 0, 0]), s)
    assert g.affinity[0, 1] == pytest.approx(math.exp(-1), abs=1e-15)
    assert g.affinity[0, 1] == pytest.approx(0.36788, abs=1e-5)


def test_three_collinear_cameras():
    s = 2.0
    g = build_adjacency(cams([0, 0, 0], [s, 0, 0], [2 * s, 0, 0]), s)
    A = g.affinity
    assert A[0, 1] == pytest.approx(0.60653, abs=1e-5)
    assert A[1, 2] == pytest.approx(math.exp(-0.5), abs=1e-15)
    assert A[0, 2] == pytest.approx(0.13534, abs=1e-5)


def test_relative_rotation_enters_kernel():
    # R_ij = R_j^T R_i; a camera rotated by pi about z maps p_i to -p_i
    R0, R1 = np.eye(3), rot_z(math.pi)
    g = build_adjacency(cams([1, 0, 0], [-1, 0, 0], rotations=[R0, R1]), 1.0)
    # R_01 = R1^T R0 rotates (1,0,0) to (-1,0,0) = p_1
    assert g.affinity[0, 1] == pytest.approx(1.0, abs=1e-12)


def test_invalid_sigma_and_pose():
    with pytest.raises(InvalidParameter):
        build_adjacency(cams([0, 0, 0]), 0.0)
    with pytest.raises(InvalidPose):
        CameraPose("x", [0, 0, 0], np.diag([1.0, 1.0, 2.0]))
    with pytest.raises(InvalidPose):
        CameraPose("x", [0, 0, np.nan])


def test_nearly_orthonormal_rotation_is_repaired():
    R = rot_z(0.3) + 1e-5
    p = CameraPose("x", [0, 0, 0], R)
    assert np.allclose(p.rotation @ p.rotation.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(p.rotation) == pytest.approx(1.0, abs=1e-12)


def test_affinity_is_read_only_and_bitwise_symmetric():
    rng = np.random.default_rng(0)
    g = build_adjacency(cams(*rng.uniform(0, 40, (12, 3))), 7.0)
    assert np.array_equal(g.affinity, g.affinity.T)
    assert np.all(g.affinity > 0) and np.all(g.affinity <= 1)
    with pytest.raises(ValueError):
        g.affinity[0, 0] = 2.0


def test_far_cameras_stay_strictly_positive():
    g = build_adjacency(cams([0, 0, 0], [1e6, 0, 0]), 1.0)
    assert g.affinity[0, 1] > 0


def test_perturbation_bound_values():
    assert perturbation_bound(0.0, 3.0) == 0.0
    assert perturbation_bound(2.0, 2.0) == pytest.approx(1 - math.exp(-0.5), abs=1e-15)
    assert perturbation_bound(2.0, 2.0) == pytest.approx(0.39347, abs=1e-5)
    assert perturbation_bound(0.5, 5.0) == pytest.approx(0.004988, abs=1e-6)
    with pytest.raises(InvalidParameter):
        perturbation_bound(-1.0, 1.0)


@given(st.floats(0, 0.1), st.floats(0.1, 100))
def test_perturbation_bound_is_second_order_for_small_shifts(ratio, sigma):
    dp = ratio * sigma
    assert perturbation_bound(dp, sigma) <= dp * dp / (2 * sigma * sigma) * (1 + 1e-2) + 1e-300


def test_perturbation_bound_holds_for_coincident_cameras():
    rng = np.random.default_rng(1)
    for _ in range(200):
        sigma = rng.uniform(1, 10)
        p = rng.uniform(-5, 5, 3)
        dp = rng.normal(size=3) * rng.uniform(0, 5)
        a0 = build_adjacency(cams(p, p), sigma).affinity[0, 1]
        a1 = build_adjacency(cams(p + dp, p), sigma).affinity[0, 1]
        assert abs(a1 - a0) <= perturbation_bound(np.linalg.norm(dp), sigma) + 1e-12


def test_lipschitz_bound_holds_for_every_pair():
    rng = np.random.default_rng(2)
    for _ in range(300):
        sigma = rng.uniform(1, 10)
        P = rng.uniform(0, 20, (4, 3))
        dp = rng.normal(size=3) * rng.uniform(0, 3)
        A0 = build_adjacency(cams(*P), sigma).affinity
        P2 = P.copy()
        P2[0] += dp
        A1 = build_adjacency(cams(*P2), sigma).affinity
        bound = lipschitz_perturbation_bound(np.linalg.norm(dp), sigma)
        assert np.abs(A1 - A0).max() <= bound + 1e-12


def test_lipschitz_bound_is_sharp_for_small_shift():
    # first-order slope of the kernel peaks at r = sigma with value exp(-1/2)/sigma
    t, s = 1e-4, 1.0
    assert lipschitz_perturbation_bound(t, s) == pytest.approx(t * math.exp(-0.5), rel=1e-3)


def test_row_normalize_examples():
    assert np.array_equal(row_normalize(np.array([[1.0]])), [[1.0]])
    assert np.allclose(row_normalize(np.ones((2, 2))), 0.5)
    e = math.exp(-1)
    R = row_normalize(np.array([[1, e], [e, 1]]))
    assert R[0] == pytest.approx([0.7311, 0.2689], abs=1e-4)
    assert R[1] == pytest.approx([0.2689, 0.7311], abs=1e-4)


def test_neighborhoods_include_self_and_threshold():
    s = 1.0
    g = build_adjacency(cams([0, 0, 0], [s, 0, 0], [10 * s, 0, 0]), s)
    nb = neighborhoods(g)
    assert list(nb[0]) == [0, 1]
    assert list(nb[2]) == [2]


def test_layout_round_trip(tmp_path):
    doc = {"sigma_meters": 4.0, "cameras": [
        {"id": "a", "position": [0, 0, 0]},
        {"id": "b", "position": [4, 0, 0], "rotation": rot_z(0.2).reshape(-1).tolist()}]}
    path = tmp_path / "layout.json"
    path.write_text(json.dumps(doc))
    g = load_graph(path)
    g.save(tmp_path / "g.json")
    g2 = load_graph(tmp_path / "g.json")
    assert g2.ids == ["a", "b"]
    assert np.array_equal(g.affinity, g2.affinity)
