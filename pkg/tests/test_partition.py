import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import grid
from distextremes.errors import ConfigError
from distextremes.partition import Partition, partition_custom, partition_grid


def as_sets(part, order=None):
    blocks = part.blocks
    if order is not None:
        blocks = [order[b] for b in blocks]
    return sorted(tuple(sorted(b.tolist())) for b in blocks)


@pytest.mark.parametrize("side,target,K,size", [(20, 25, 16, 25), (30, 30, 30, 30),
                                                (30, 25, 36, 25), (10, 25, 4, 25)])
def test_square_grids(side, target, K, size):
    part = partition_grid(grid(side), target)
    assert part.K == K
    assert set(part.sizes.tolist()) == {size}


def test_whole_domain():
    part = partition_grid(grid(10), 100)
    assert part.K == 1
    assert partition_grid(grid(10), 1000).K == 1


def test_blocks_are_contiguous_squares():
    sites = grid(20)
    for idx in partition_grid(sites, 25).blocks:
        span = sites[idx].max(0) - sites[idx].min(0)
        assert np.all(span == 4)


@given(st.integers(2, 400), st.integers(2, 60), st.integers(0, 2 ** 31))
def test_invariants(d, target, seed):
    rng = np.random.default_rng(seed)
    sites = rng.uniform(0, 100, (d, 2))
    part = partition_grid(sites, target)
    K = min(max(1, round(d / target)), d // 2)
    assert part.K == K
    assert part.sizes.sum() == d
    assert np.array_equal(np.sort(np.concatenate(part.blocks)), np.arange(d))
    assert part.sizes.max() - part.sizes.min() <= 2


@given(st.integers(0, 2 ** 31))
def test_order_independent(seed):
    rng = np.random.default_rng(seed)
    sites = rng.uniform(0, 10, (60, 2))
    perm = rng.permutation(60)
    a = partition_grid(sites, 12)
    b = partition_grid(sites[perm], 12)
    assert as_sets(a) == as_sets(b, order=perm)


def test_custom():
    sites = grid(4)
    assert partition_custom(sites, ["a"] * 16).K == 1
    labels = np.repeat(["north", "south"], 8)
    part = partition_custom(sites, labels)
    assert part.labels == ("north", "south")
    assert part.sizes.tolist() == [8, 8]


def test_custom_702_sites_12_regions():
    rng = np.random.default_rng(0)
    sites = rng.uniform(0, 50, (702, 2))
    labels = rng.permutation(np.repeat([f"HUC{k:02d}" for k in range(1, 13)], 59)[:702])
    part = partition_custom(sites, labels)
    assert part.K == 12 and part.sizes.sum() == 702


def test_singleton_block_rejected():
    with pytest.raises(ConfigError):
        partition_custom(grid(2), ["a", "a", "a", "b"])


def test_label_count_mismatch():
    with pytest.raises(ConfigError):
        partition_custom(grid(2), ["a", "b"])
    with pytest.raises(ConfigError):
        Partition(np.array([0, 0, 1, 1]), ("x",))


def test_round_trip_and_hash():
    part = partition_grid(grid(6), 9)
    again = Partition.from_flat(part.flatten())
    assert again == part and hash(again) == hash(part)
    assert part.assignment.flags.writeable is False


def test_bad_sites():
    with pytest.raises(ConfigError):
        partition_grid(np.zeros((5, 3)), 2)
    with pytest.raises(ConfigError):
        partition_grid(grid(3), 1)
