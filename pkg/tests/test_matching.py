import itertools

import numpy as np
import pytest

from bubblestereo.imaging import BubbleDetection
from bubblestereo.matching import Assignment, MatchCandidate, build_candidates, solve_assignment
from bubblestereo.quadrics import Conic2D, Ellipsoid, project_ellipsoid

from conftest import make_rig


def brute_force_assignment(candidates, n1, n2):
    """Exhaustive oracle: enumerate all injective pairings of gated edges.

    Returns (best cardinality, best total cost at that cardinality).
    """
    edges = {}
    for c in candidates:
        key = (c.index1, c.index2)
        edges[key] = min(edges.get(key, np.inf), c.cost)
    best_k = 0
    best_cost = 0.0
    items = list(edges.items())

    def recurse(i, used1, used2, k, cost):
        nonlocal best_k, best_cost
        if k > best_k or (k == best_k and cost < best_cost):
            best_k, best_cost = k, cost
        if i == len(items):
            return
        (a, b), w = items[i]
        if a not in used1 and b not in used2:
            recurse(i + 1, used1 | {a}, used2 | {b}, k + 1, cost + w)
        recurse(i + 1, used1, used2, k, cost)

    recurse(0, frozenset(), frozenset(), 0, 0.0)
    return best_k, best_cost


def detection_at(conic: Conic2D, camera_id=1) -> BubbleDetection:
    r = conic.semi_axes[0]
    bbox = np.array(
        [conic.center[0] - r, conic.center[1] - r, conic.center[0] + r, conic.center[1] + r]
    )
    contour = np.column_stack(
        [
            conic.center[0] + r * np.cos(np.linspace(0, 2 * np.pi, 40)),
            conic.center[1] + r * np.sin(np.linspace(0, 2 * np.pi, 40)),
        ]
    )
    return BubbleDetection(
        contour=contour,
        ellipse=conic,
        bbox=bbox,
        frame_index=0,
        camera_id=camera_id,
        contour_len=40,
    )


def stereo_detections(rig, ellipsoids):
    d1, d2 = [], []
    for e in ellipsoids:
        d1.append(detection_at(project_ellipsoid(rig.cam1, rig.pose1, e), 1))
        d2.append(detection_at(project_ellipsoid(rig.cam2, rig.pose2, e), 2))
    return d1, d2


class TestBuildCandidates:
    def test_single_bubble_single_candidate(self, rig):
        e = Ellipsoid(center=[5.0, -8.0, 300.0], rotation=np.eye(3), semi_axes=[3.0] * 3)
        d1, d2 = stereo_detections(rig, [e])
        cands = build_candidates(rig, d1, d2, gate_px=5.0)
        assert len(cands) == 1
        assert cands[0].epi_dist < 0.5

    def test_empty_detections(self, rig):
        assert build_candidates(rig, [], [], 5.0) == []

    def test_equal_height_bubbles_resolved_globally(self, rig):
        # the hard case: two bubbles at (nearly) the same height gate all
        # 4 cross pairs, but the globally optimal assignment still pairs
        # them correctly
        ea = Ellipsoid(center=[-15.0, 0.0, 290.0], rotation=np.eye(3), semi_axes=[3.0] * 3)
        eb = Ellipsoid(center=[15.0, 0.5, 315.0], rotation=np.eye(3), semi_axes=[2.5] * 3)
        d1, d2 = stereo_detections(rig, [ea, eb])
        cands = build_candidates(rig, d1, d2, gate_px=5.0)
        assert len(cands) == 4
        assignment = solve_assignment(cands, 2, 2)
        assert sorted(assignment.pairs) == [(0, 0), (1, 1)]

    def test_gate_excludes(self, rig):
        ea = Ellipsoid(center=[0.0, -30.0, 300.0], rotation=np.eye(3), semi_axes=[3.0] * 3)
        eb = Ellipsoid(center=[0.0, 30.0, 300.0], rotation=np.eye(3), semi_axes=[3.0] * 3)
        d1, _ = stereo_detections(rig, [ea])
        _, d2 = stereo_detections(rig, [eb])
        assert build_candidates(rig, d1, d2, gate_px=5.0) == []


class TestSolveAssignment:
    def test_single_candidate(self):
        a = solve_assignment([MatchCandidate(0, 0, 0.3, 0.3)], 1, 1)
        assert a.pairs == [(0, 0)]
        assert a.unmatched1 == [] and a.unmatched2 == []
        assert a.total_cost == pytest.approx(0.3)

    def test_three_by_three_diagonal(self):
        cands = []
        for i in range(3):
            for j in range(3):
                cands.append(MatchCandidate(i, j, 0.0, 1.0 if i == j else 100.0))
        a = solve_assignment(cands, 3, 3)
        assert sorted(a.pairs) == [(0, 0), (1, 1), (2, 2)]
        assert a.total_cost == pytest.approx(3.0)

    def test_forbidden_edges_do_not_leak(self):
        # only (0,1) and (1,0) are allowed; a dummy-cost implementation
        # could wrongly match (0,0)+(1,1)
        cands = [MatchCandidate(0, 1, 0.0, 1.0), MatchCandidate(1, 0, 0.0, 1.0)]
        a = solve_assignment(cands, 2, 2)
        assert sorted(a.pairs) == [(0, 1), (1, 0)]

    def test_unbalanced(self):
        cands = [MatchCandidate(0, 2, 0.0, 0.5)]
        a = solve_assignment(cands, 1, 4)
        assert a.pairs == [(0, 2)]
        assert a.unmatched2 == [0, 1, 3]

    def test_200_random_instances_match_bruteforce(self, rng):
        for trial in range(200):
            n1 = int(rng.integers(1, 9))
            n2 = int(rng.integers(1, 9))
            cands = []
            for i in range(n1):
                for j in range(n2):
                    if rng.random() < 0.55:  # sparse gating
                        cands.append(MatchCandidate(i, j, 0.0, float(rng.uniform(0, 10))))
            a = solve_assignment(cands, n1, n2)
            k_star, cost_star = brute_force_assignment(cands, n1, n2)
            assert len(a.pairs) == k_star, f"trial {trial}"
            assert a.total_cost == pytest.approx(cost_star, abs=1e-9), f"trial {trial}"

    def test_gate_monotonicity(self, rig, rng):
        # enlarging the gate never increases the optimal cost at equal
        # matched-pair count
        es = [
            Ellipsoid(
                center=[rng.uniform(-20, 20), rng.uniform(-30, 30), 300 + rng.uniform(-20, 20)],
                rotation=np.eye(3),
                semi_axes=[rng.uniform(2, 4)] * 3,
            )
            for _ in range(4)
        ]
        d1, d2 = stereo_detections(rig, es)
        prev = None
        for gate in (1.0, 2.0, 5.0, 10.0):
            a = solve_assignment(build_candidates(rig, d1, d2, gate), len(d1), len(d2))
            if prev is not None and len(a.pairs) == len(prev.pairs):
                assert a.total_cost <= prev.total_cost + 1e-12
            prev = a

    def test_swap_symmetry(self, rig, rng):
        es = [
            Ellipsoid(
                center=[rng.uniform(-20, 20), rng.uniform(-30, 30), 300 + rng.uniform(-20, 20)],
                rotation=np.eye(3),
                semi_axes=[rng.uniform(2, 4)] * 3,
            )
            for _ in range(5)
        ]
        d1, d2 = stereo_detections(rig, es)
        cands = build_candidates(rig, d1, d2, 5.0)
        a12 = solve_assignment(cands, len(d1), len(d2))
        swapped = [MatchCandidate(c.index2, c.index1, c.epi_dist, c.cost) for c in cands]
        a21 = solve_assignment(swapped, len(d2), len(d1))
        assert sorted((j, i) for i, j in a21.pairs) == sorted(a12.pairs)
