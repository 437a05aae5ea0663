"""Fixed-capacity mid-term bank maintained by greedy farthest-first k-center.

On each ingest the candidate pool is the retained set plus the new block. When
the pool exceeds capacity, a fresh farthest-first pass seeded at the new block
picks the survivors; coverage scores live only for the duration of that pass.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import StructuralError
from .memory_core import Prototype, distance_matrix, stack_units

logger = logging.getLogger(__name__)

FULL_MATRIX_LIMIT = 4096


@dataclass
class KCenterSelection:
    order: list[int]  # picked ids, seed first
    radius: float  # max over the pool of the final coverage score
    coverage: dict[int, float]  # final m(B) per pool id
    degenerate_pairs: int = 0
    history: list[np.ndarray] | None = None  # m snapshot after every pick, pool sorted by id


def farthest_first(
    units: np.ndarray,
    degenerate: np.ndarray,
    seed: int,
    k: int,
    record: bool = False,
) -> tuple[list[int], np.ndarray, int, list[np.ndarray] | None]:
    """Index-level farthest-first traversal.

    Rows are assumed sorted by the caller's tie-break key: ``np.argmax`` returns
    the first maximum, so equal scores resolve to the lowest row. Returns the
    picked rows, the final coverage vector, the number of distance evaluations
    that involved a degenerate prototype, and optionally the per-pick history.
    """
    n = units.shape[0]
    k = min(k, n)
    n_degenerate = int(degenerate.sum())

    if k * 4 >= n and n <= FULL_MATRIX_LIMIT:
        # most rows will be visited anyway; one matrix product beats k small ones
        full = distance_matrix(units, degenerate, units, degenerate)
        row = full.__getitem__
    else:
        def row(j: int) -> np.ndarray:
            return distance_matrix(units[j : j + 1], degenerate[j : j + 1], units, degenerate)[0]

    def degenerate_evals(j: int) -> int:
        return n if degenerate[j] else n_degenerate

    picks = [seed]
    cover = row(seed).copy()
    deg_pairs = degenerate_evals(seed)
    history = [cover.copy()] if record else None
    # coverage with picked entries pinned at -inf, so argmax only sees candidates
    score = cover.copy()
    score[seed] = -np.inf
    while len(picks) < k:
        j = int(np.argmax(score))
        picks.append(j)
        r = row(j)
        np.minimum(cover, r, out=cover)
        np.minimum(score, r, out=score)
        score[j] = -np.inf
        deg_pairs += degenerate_evals(j)
        if record:
            history.append(cover.copy())
    return picks, cover, deg_pairs, history


def _check_pool(pool: Sequence[tuple[int, Prototype]]) -> None:
    if not pool:
        raise StructuralError("k-center pool is empty")
    ids = [fid for fid, _ in pool]
    if len(set(ids)) != len(ids):
        raise StructuralError("k-center pool has duplicate ids")


def select_k_center(
    pool: Sequence[tuple[int, Prototype]],
    capacity: int,
    seed_id: int,
    record: bool = False,
) -> KCenterSelection:
    """Greedy farthest-first selection of ``min(capacity, len(pool))`` ids.

    The first pick is ``seed_id``; each later pick maximizes the distance to
    the current selection, ties going to the smallest id.
    """
    _check_pool(pool)
    if capacity < 1:
        raise StructuralError(f"capacity must be >= 1, got {capacity}")
    ordered = sorted(pool, key=lambda item: item[0])
    ids = [fid for fid, _ in ordered]
    try:
        seed = ids.index(seed_id)
    except ValueError:
        raise StructuralError(f"seed {seed_id} is not in the pool") from None
    units, degenerate = stack_units([p for _, p in ordered])
    picks, cover, deg_pairs, history = farthest_first(units, degenerate, seed, capacity, record)
    return KCenterSelection(
        order=[ids[j] for j in picks],
        radius=float(cover.max()),
        coverage={fid: float(c) for fid, c in zip(ids, cover)},
        degenerate_pairs=deg_pairs,
        history=history,
    )


def k_center_objective(centers: Sequence[Prototype], pool: Sequence[Prototype]) -> float:
    """max over ``pool`` of the distance to the nearest of ``centers``."""
    if not pool:
        return 0.0
    if not centers:
        raise StructuralError("objective needs at least one center")
    cu, cd = stack_units(centers)
    pu, pd = stack_units(pool)
    return float(distance_matrix(pu, pd, cu, cd).min(axis=1).max())


@dataclass
class IngestResult:
    evicted: list[int]
    selection: KCenterSelection | None = None


@dataclass
class MidBank:
    """Retained (frame_id, prototype) pairs for one layer, ascending by id."""

    capacity: int
    layer: int = 0
    retained: list[tuple[int, Prototype]] = field(default_factory=list)
    last_selection: KCenterSelection | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.capacity < 1:
            raise StructuralError(f"mid bank capacity must be >= 1, got {self.capacity}")

    def __len__(self) -> int:
        return len(self.retained)

    def __contains__(self, frame_id: int) -> bool:
        return any(fid == frame_id for fid, _ in self.retained)

    @property
    def ids(self) -> list[int]:
        return [fid for fid, _ in self.retained]

    @property
    def prototypes(self) -> list[Prototype]:
        return [p for _, p in self.retained]

    def ingest(self, block_id: int, proto: Prototype) -> IngestResult:
        if block_id in self:
            raise StructuralError(f"frame {block_id} already in mid bank (layer {self.layer})")
        pool = self.retained + [(block_id, proto)]
        if len(pool) <= self.capacity:
            self.retained = sorted(pool, key=lambda item: item[0])
            self.last_selection = None
            return IngestResult(evicted=[])
        selection = select_k_center(pool, self.capacity, seed_id=block_id)
        keep = set(selection.order)
        evicted = sorted(fid for fid, _ in pool if fid not in keep)
        self.retained = sorted((item for item in pool if item[0] in keep), key=lambda item: item[0])
        self.last_selection = selection
        return IngestResult(evicted=evicted, selection=selection)

    def coverage_radius(self, pool: Sequence[Prototype]) -> float:
        """k-center objective of the retained set against ``pool``."""
        if not self.retained:
            raise StructuralError("coverage radius of an empty bank")
        if not pool:
            logger.warning("coverage_radius called with an empty pool; returning 0")
            return 0.0
        return k_center_objective(self.prototypes, pool)


def ingest_block(bank: MidBank, block_id: int, proto: Prototype) -> MidBank:
    """Functional wrapper around :meth:`MidBank.ingest`."""
    bank.ingest(block_id, proto)
    return bank


def coverage_radius(bank: MidBank, pool: Sequence[Prototype]) -> float:
    return bank.coverage_radius(pool)
