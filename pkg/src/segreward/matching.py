"""One-to-one matching of ground-truth and predicted objects by total IoU.

Both the Hungarian route and the brute-force oracle return, among all
optimal assignments, the one whose sorted ``(gt, pred)`` pair list is
lexicographically smallest. Totals within ``TIE_TOL`` of the optimum count as
optimal.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import iou_matrix

TIE_TOL = 1e-9
BRUTE_FORCE_LIMIT = 8


class TooLarge(ValueError):
    pass


@dataclass(frozen=True)
class Matching:
    pairs: tuple[tuple[int, int], ...]
    unmatched_gt: tuple[int, ...]
    unmatched_pred: tuple[int, ...]
    total_iou: float

    @classmethod
    def from_pairs(cls, pairs, n_gt: int, n_pred: int, ious: np.ndarray) -> "Matching":
        pairs = tuple(sorted((int(i), int(j)) for i, j in pairs))
        gi = {i for i, _ in pairs}
        pj = {j for _, j in pairs}
        total = float(sum(ious[i, j] for i, j in pairs))
        return cls(
            pairs,
            tuple(i for i in range(n_gt) if i not in gi),
            tuple(j for j in range(n_pred) if j not in pj),
            total,
        )


def _boxes(objs) -> np.ndarray:
    return np.array([o.bbox if hasattr(o, "bbox") else o for o in objs], dtype=float).reshape(-1, 4)


def _best(ious: np.ndarray, rows: list[int], cols: list[int]) -> float:
    if not rows or not cols:
        return 0.0
    sub = ious[np.ix_(rows, cols)]
    r, c = linear_sum_assignment(sub, maximize=True)
    return float(sub[r, c].sum())


def assign_max_iou(ious: np.ndarray) -> tuple[tuple[int, int], ...]:
    """Lexicographically smallest optimal assignment of ``min(N, K)`` pairs.

    Pairs are committed greedily in lexicographic order; a candidate pair is
    kept only if the remaining rows/columns can still reach the optimum.
    Skipped rows are left unmatched, which is only allowed while enough rows
    remain to fill ``min(N, K)`` pairs.
    """
    ious = np.asarray(ious, dtype=float)
    n, k = ious.shape
    need = min(n, k)
    if need == 0:
        return ()
    rows = list(range(n))
    cols = list(range(k))
    target = _best(ious, rows, cols)
    pairs: list[tuple[int, int]] = []
    got = 0.0
    i = 0
    while len(pairs) < need:
        remaining_rows = [r for r in range(i + 1, n)]
        committed = False
        if n - i >= need - len(pairs):
            for j in cols:
                rest_cols = [c for c in cols if c != j]
                want = need - len(pairs) - 1
                if len(remaining_rows) < want or len(rest_cols) < want:
                    continue
                value = got + ious[i, j] + _best(ious, remaining_rows, rest_cols)
                if value >= target - TIE_TOL:
                    pairs.append((i, j))
                    got += ious[i, j]
                    cols = rest_cols
                    committed = True
                    break
        if not committed and n - i - 1 < need - len(pairs):
            # cannot happen for a consistent optimum; guards against drift
            raise AssertionError("matching search failed to reach the optimum")
        i += 1
    return tuple(pairs)


def assign_max_iou_preferring(ious: np.ndarray, preference: np.ndarray) -> tuple[tuple[int, int], ...]:
    """Optimal-IoU assignment that, among tied optima, maximizes total ``preference``.

    A pair is eligible when it belongs to at least one optimal assignment; the
    preference is then maximized over eligible pairs. If that combination
    falls short of the optimum, the lexicographic assignment is returned.
    """
    ious = np.asarray(ious, dtype=float)
    n, k = ious.shape
    need = min(n, k)
    if need == 0:
        return ()
    target = _best(ious, list(range(n)), list(range(k)))
    eligible = np.zeros((n, k), dtype=bool)
    for i in range(n):
        rest_rows = [r for r in range(n) if r != i]
        for j in range(k):
            rest_cols = [c for c in range(k) if c != j]
            eligible[i, j] = ious[i, j] + _best(ious, rest_rows, rest_cols) >= target - TIE_TOL
    weights = np.where(eligible, np.asarray(preference, dtype=float), -1e12)
    rows, cols = linear_sum_assignment(weights, maximize=True)
    pairs = tuple(sorted(zip(rows.tolist(), cols.tolist())))
    ok = len(pairs) == need and all(eligible[i, j] for i, j in pairs)
    if not ok or sum(ious[i, j] for i, j in pairs) < target - TIE_TOL * need:
        return assign_max_iou(ious)
    return pairs


def match_objects(gt: Sequence, pred: Sequence) -> Matching:
    """Optimal one-to-one matching maximizing total box IoU.

    Accepts ``ObjectAnswer``-like objects (with ``.bbox``) or raw boxes. Pairs
    with zero IoU may be part of the result; thresholds are applied later.
    """
    g, p = _boxes(gt), _boxes(pred)
    ious = iou_matrix(g, p)
    pairs = assign_max_iou(ious)
    return Matching.from_pairs(pairs, len(g), len(p), ious)


def brute_force_match(gt: Sequence, pred: Sequence) -> Matching:
    """Exhaustive search over injective assignments (test oracle)."""
    n, k = len(gt), len(pred)
    if max(n, k) > BRUTE_FORCE_LIMIT:
        raise TooLarge(f"brute force limited to {BRUTE_FORCE_LIMIT} objects per side")
    g, p = _boxes(gt), _boxes(pred)
    # independent of iou_matrix: scalar IoU per pair
    ious = np.zeros((n, k))
    for i in range(n):
        for j in range(k):
            ious[i, j] = _scalar_iou(g[i], p[j])
    best_total, best_pairs = -1.0, None
    need = min(n, k)
    for rows in itertools.combinations(range(n), need):
        for cols in itertools.permutations(range(k), need):
            pairs = tuple(zip(rows, cols))
            total = sum(ious[i, j] for i, j in pairs)
            if best_pairs is None or total > best_total + TIE_TOL:
                best_total, best_pairs = total, pairs
            elif total >= best_total - TIE_TOL and pairs < best_pairs:
                best_total, best_pairs = max(total, best_total), pairs
    return Matching.from_pairs(best_pairs or (), n, k, ious)


def _scalar_iou(a, b) -> float:
    w = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    h = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = w * h
    if inter == 0:
        return 0.0
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)
