"""Stereo correspondence of bubble detections as a bipartite assignment.

At 90 degrees of viewing separation no photometric cue survives, so
candidate matches are gated purely by the epipolar constraint on the
detected ellipse centers and the whole image pair is resolved at once as
a minimum-cost maximum matching. Forbidden (un-gated) pairs are excluded
from the optimum rather than being given large finite costs that could
leak into it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import StereoRig, epipolar_distance
from .imaging import BubbleDetection

__all__ = ["Assignment", "MatchCandidate", "build_candidates", "solve_assignment"]


@dataclass(frozen=True)
class MatchCandidate:
    """A gated candidate pair of detections (indices into the two lists)."""

    index1: int
    index2: int
    epi_dist: float
    cost: float


@dataclass
class Assignment:
    """Result of a bipartite assignment over two detection lists."""

    pairs: list[tuple[int, int]]
    unmatched1: list[int] = field(default_factory=list)
    unmatched2: list[int] = field(default_factory=list)
    total_cost: float = 0.0


def build_candidates(
    rig: StereoRig,
    dets1: Sequence[BubbleDetection],
    dets2: Sequence[BubbleDetection],
    gate_px: float = 5.0,
    area_weight: float = 0.0,
) -> list[MatchCandidate]:
    """All cross pairs whose symmetric epipolar distance passes the gate.

    The cost is the epipolar distance of the ellipse centers; an optional
    area term ``area_weight * |log(area1/area2)|`` can be added, but the
    far view's outline size is only a weak hint, so it defaults to off.
    """
    candidates = []
    for i, d1 in enumerate(dets1):
        for j, d2 in enumerate(dets2):
            epi = epipolar_distance(rig, d1.center, d2.center)
            if epi >= gate_px:
                continue
            cost = epi
            if area_weight > 0:
                cost += area_weight * abs(np.log(d1.ellipse.area / d2.ellipse.area))
            candidates.append(MatchCandidate(i, j, float(epi), float(cost)))
    return candidates


def solve_assignment(
    candidates: Sequence[MatchCandidate], n1: int, n2: int
) -> Assignment:
    """Minimum-total-cost maximum matching over the gated candidates.

    Pairs without a candidate edge are forbidden. Implemented by solving
    the rectangular assignment problem with a sentinel cost larger than
    any achievable real total, then discarding sentinel pairs, which
    yields the maximum-cardinality matching of least cost.
    """
    if n1 == 0 or n2 == 0 or not candidates:
        return Assignment(pairs=[], unmatched1=list(range(n1)), unmatched2=list(range(n2)))

    big = sum(max(c.cost, 0.0) for c in candidates) + 1.0
    cost = np.full((n1, n2), big)
    for c in candidates:
        cost[c.index1, c.index2] = min(cost[c.index1, c.index2], c.cost)
    rows, cols = linear_sum_assignment(cost)

    pairs = []
    total = 0.0
    for r, c in zip(rows, cols):
        if cost[r, c] < big:
            pairs.append((int(r), int(c)))
            total += float(cost[r, c])
    matched1 = {r for r, _ in pairs}
    matched2 = {c for _, c in pairs}
    return Assignment(
        pairs=pairs,
        unmatched1=[i for i in range(n1) if i not in matched1],
        unmatched2=[j for j in range(n2) if j not in matched2],
        total_cost=total,
    )
