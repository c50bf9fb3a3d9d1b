"""Disjoint spatial blocks over the observation sites."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_BLOCK_SIZE = 25
SMALL_BLOCK_WARNING = 10


@dataclass(frozen=True)
class Partition:
    """Assignment of ``d`` sites to ``K`` disjoint blocks.

    Blocks are indexed ``0..K-1``; ``labels`` keeps user-facing names (region
    codes for custom partitions, ``"0"``, ``"1"``, ... for grid partitions).
    Sites inside a block are listed in increasing index order.
    """

    assignment: np.ndarray
    labels: tuple = field(default=())

    def __post_init__(self):
        assignment = np.asarray(self.assignment, dtype=np.int64)
        if assignment.ndim != 1 or assignment.size < 2:
            raise ConfigError("a partition needs at least two sites")
        K = int(assignment.max()) + 1 if assignment.size else 0
        if assignment.min() < 0 or np.unique(assignment).size != K:
            raise ConfigError("block ids must be dense integers 0..K-1")
        sizes = np.bincount(assignment, minlength=K)
        labels = tuple(str(x) for x in self.labels) if self.labels else tuple(str(k) for k in range(K))
        if len(labels) != K:
            raise ConfigError(f"got {len(labels)} labels for {K} blocks")
        for k in np.flatnonzero(sizes < 2):
            raise ConfigError(f"block {labels[k]!r} has a single site; pairs need at least two")
        for k in np.flatnonzero(sizes < SMALL_BLOCK_WARNING):
            logger.warning("block %r has only %d sites", labels[k], sizes[k])
        assignment.setflags(write=False)
        object.__setattr__(self, "assignment", assignment)
        object.__setattr__(self, "labels", labels)

    @property
    def K(self) -> int:
        return len(self.labels)

    @property
    def blocks(self) -> tuple[np.ndarray, ...]:
        return tuple(np.flatnonzero(self.assignment == k) for k in range(self.K))

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.K)

    def flatten(self) -> dict:
        return {"assignment": self.assignment.tolist(), "labels": list(self.labels)}

    @classmethod
    def from_flat(cls, flat: dict) -> "Partition":
        return cls(np.asarray(flat["assignment"]), tuple(flat["labels"]))

    def __eq__(self, other):
        if not isinstance(other, Partition):
            return NotImplemented
        return self.labels == other.labels and np.array_equal(self.assignment, other.assignment)

    def __hash__(self):
        return hash((self.labels, self.assignment.tobytes()))


def _check_sites(sites) -> np.ndarray:
    sites = np.asarray(sites, dtype=float)
    if sites.ndim != 2 or sites.shape[1] != 2:
        raise ConfigError("sites must be an array of shape (d, 2)")
    if sites.shape[0] < 2:
        raise ConfigError("need at least two sites")
    return sites


def partition_grid(sites, target_block_size: int = DEFAULT_BLOCK_SIZE) -> Partition:
    """Split sites into contiguous, near-square blocks of similar size.

    ``K = round(d / target_block_size)`` cells are laid out in
    ``ceil(sqrt(K))`` strips along the first coordinate, each split along the
    second. Cut points are count quantiles, so irregular site clouds still
    give balanced blocks. Ties are broken by the other coordinate, which makes
    the result independent of the order the sites are listed in.
    """
    sites = _check_sites(sites)
    if target_block_size < 2:
        raise ConfigError("target_block_size must be at least 2")
    d = sites.shape[0]
    K = max(1, int(round(d / target_block_size)))
    K = min(K, d // 2)
    nx = math.ceil(math.sqrt(K))
    # cells per strip; strips get sites in proportion to their cell count
    per_strip = np.array([c.size for c in np.array_split(np.arange(K), nx)])
    cuts = np.round(np.cumsum(per_strip)[:-1] * d / K).astype(int)
    assignment = np.empty(d, dtype=np.int64)
    by_x = np.lexsort((sites[:, 1], sites[:, 0]))
    block = 0
    for strip, ny in zip(np.split(by_x, cuts), per_strip):
        local = strip[np.lexsort((sites[strip, 0], sites[strip, 1]))]
        for cell in np.array_split(local, ny):
            assignment[cell] = block
            block += 1
    return Partition(assignment)


def partition_custom(sites, labels) -> Partition:
    """Blocks given by a label per site (e.g. watershed regions).

    Blocks are ordered by sorted label.
    """
    sites = _check_sites(sites)
    labels = np.asarray(labels)
    if labels.shape != (sites.shape[0],):
        raise ConfigError("need exactly one label per site")
    names, assignment = np.unique(labels.astype(str), return_inverse=True)
    return Partition(assignment, tuple(names))
