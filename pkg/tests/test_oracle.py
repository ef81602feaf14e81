import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psrotsp.errors import InvalidOracleValue, TooLarge
from psrotsp.oracle import (
    brute_force,
    held_karp,
    held_karp_batch,
    is_two_opt_stable,
    local_search_2opt,
    oracle_for,
    oracle_lengths,
    optimality_gap,
)
from psrotsp.tsp_core import Instance, bundled_path, generate_uniform, load_tsplib, tour_length
from reference import exhaustive_tsp

SQUARE = Instance([[0, 0], [1, 0], [1, 1], [0, 1]])
TRIANGLE = Instance([[0, 0], [3, 0], [0, 4]])


@pytest.mark.parametrize("solve", [brute_force, held_karp, local_search_2opt])
def test_square(solve):
    assert solve(SQUARE).length == 4.0


def test_triangle():
    assert brute_force(TRIANGLE).length == 12.0
    assert held_karp(TRIANGLE).length == 12.0


def test_brute_force_matches_held_karp_at_eight():
    inst = generate_uniform(8, 123)
    assert brute_force(inst).length == held_karp(inst).length


def test_size_limits():
    with pytest.raises(TooLarge):
        brute_force(generate_uniform(11, 0))
    with pytest.raises(TooLarge):
        held_karp(generate_uniform(19, 0))


@pytest.mark.parametrize("seed", range(50))
def test_held_karp_equals_brute_force(seed):
    n = 5 + seed % 4
    inst = generate_uniform(n, seed)
    assert held_karp(inst).length == brute_force(inst).length


@given(st.integers(4, 7), st.integers(0, 2**32 - 1))
@settings(max_examples=25)
def test_held_karp_against_exhaustive_reference(n, seed):
    inst = generate_uniform(n, seed)
    assert held_karp(inst).length == pytest.approx(exhaustive_tsp(inst.points.tolist()), rel=1e-12)


def test_batch_matches_single():
    coords = np.random.default_rng(4).random((6, 9, 2))
    lengths, tours = held_karp_batch(coords)
    for c, length, tour in zip(coords, lengths, tours):
        single = held_karp(Instance(c))
        assert single.length == length
        assert np.array_equal(single.tour, tour)


def test_exact_beats_local_search_at_fifteen():
    inst = generate_uniform(15, 8)
    assert held_karp(inst).length <= local_search_2opt(inst, restarts=10, rng=1).length + 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_local_search_dominated(seed):
    inst = generate_uniform(6 + seed, seed)
    ls = local_search_2opt(inst, restarts=3, rng=seed)
    assert ls.length >= held_karp(inst).length - 1e-12
    assert not ls.exact
    assert is_two_opt_stable(inst.points, ls.tour)


@pytest.mark.parametrize("solve", [brute_force, held_karp, local_search_2opt])
def test_reported_length_matches_tour(solve):
    inst = generate_uniform(9, 31)
    res = solve(inst)
    assert abs(res.length - tour_length(inst, res.tour)) < 1e-9
    assert sorted(res.tour.tolist()) == list(range(9))


def test_berlin52_local_search():
    inst = load_tsplib(bundled_path("berlin52.tsp"))
    res = local_search_2opt(inst, restarts=10, rng=0)
    assert res.length <= 1.10 * 7542
    assert res.length >= 7542 - 1  # real Euclidean optimum lies just under the rounded one


def test_gap_examples():
    assert optimality_gap(4.0, 4.0) == 0.0
    assert optimality_gap(5.0, 4.0) == 0.25
    assert optimality_gap(3.8, 4.0) == pytest.approx(-0.05)


@pytest.mark.parametrize("bad", [0.0, -1.0])
def test_gap_rejects_nonpositive_oracle(bad):
    with pytest.raises(InvalidOracleValue):
        optimality_gap(1.0, bad)


def test_dispatch():
    assert oracle_for(generate_uniform(10, 0)).exact
    assert not oracle_for(generate_uniform(52, 0)).exact
    assert not oracle_for(generate_uniform(18, 0), threshold=16).exact
    assert oracle_for(generate_uniform(18, 0), threshold=18).exact


def test_oracle_lengths_flags():
    coords = np.random.default_rng(0).random((3, 12, 2))
    lengths, exact = oracle_lengths(coords, threshold=18)
    assert exact
    heur, exact2 = oracle_lengths(coords, threshold=10)
    assert not exact2
    assert np.all(heur >= lengths - 1e-12)


@given(st.integers(5, 9), st.integers(0, 10_000))
@settings(max_examples=20)
def test_exact_gap_nonnegative(n, seed):
    inst = generate_uniform(n, seed)
    opt = oracle_for(inst)
    rng = np.random.default_rng(seed)
    tour = rng.permutation(n)
    assert optimality_gap(tour_length(inst, tour), opt.length) >= -1e-12
