"""Exhaustive k-center solver for small pools (tests and debugging only)."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import StructuralError
from .memory_core import Prototype, distance_matrix, stack_units

MAX_POOL = 15


@dataclass
class OracleResult:
    selection: tuple[int, ...]  # ids, ascending
    objective: float
    enumerated: int


def objective_of(dist: np.ndarray, rows: Sequence[int]) -> float:
    return float(dist[:, list(rows)].min(axis=1).max())


def exact_k_center(
    pool: Sequence[tuple[int, Prototype]], k: int, pinned: int | None = None
) -> OracleResult:
    """Minimize max-min distance over all size-``k`` subsets of ``pool``.

    With ``pinned`` only subsets containing that id are feasible. Ties go to
    the lexicographically smallest id tuple.
    """
    n = len(pool)
    if n > MAX_POOL:
        raise StructuralError(f"oracle pool of {n} exceeds the enumeration guard ({MAX_POOL})")
    if not 1 <= k <= n:
        raise StructuralError(f"k must satisfy 1 <= k <= {n}, got {k}")
    ordered = sorted(pool, key=lambda item: item[0])
    ids = [fid for fid, _ in ordered]
    if len(set(ids)) != n:
        raise StructuralError("oracle pool has duplicate ids")
    units, deg = stack_units([p for _, p in ordered])
    dist = distance_matrix(units, deg, units, deg)

    if pinned is None:
        candidates = itertools.combinations(range(n), k)
        total = math.comb(n, k)
    else:
        try:
            p = ids.index(pinned)
        except ValueError:
            raise StructuralError(f"pinned id {pinned} is not in the pool") from None
        rest = [i for i in range(n) if i != p]
        candidates = (tuple(sorted((p, *c))) for c in itertools.combinations(rest, k - 1))
        total = math.comb(n - 1, k - 1)

    best_rows, best = None, math.inf
    count = 0
    for rows in candidates:
        count += 1
        val = objective_of(dist, rows)
        if val < best or (val == best and rows < best_rows):
            best, best_rows = val, rows
    assert count == total
    return OracleResult(tuple(ids[i] for i in best_rows), best, count)
