from math import comb

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rtrg.fock import (
    FockBasis,
    annihilator,
    basis_size,
    creator,
    embed_system,
    project_slot,
    vacuum_project,
)


@given(d=st.integers(1, 3), modes=st.integers(1, 4), n_max=st.integers(0, 4))
@settings(max_examples=30, deadline=None)
def test_dimension_formula(d, modes, n_max):
    b = FockBasis(d, modes, n_max)
    assert b.dim == basis_size(d, modes, n_max) == d * comb(modes + n_max, modes)
    assert b.total_occupation.max() == n_max


def test_labels_round_trip_and_vacuum_first():
    b = FockBasis(2, 3, 2)
    for i in range(b.dim):
        assert b.index(b.label(i)) == i
    assert b.label(0) == (0, 0, 0, 0) and b.label(1) == (1, 0, 0, 0)
    np.testing.assert_array_equal(b.vacuum_indices, [0, 1])


def test_commutator_below_cutoff():
    b = FockBasis(2, 3, 3)
    a1, a1d, a2 = annihilator(b, 1), creator(b, 1), annihilator(b, 2)
    comm = (a1 @ a1d - a1d @ a1).toarray()
    below = b.total_occupation < b.n_max
    np.testing.assert_allclose(comm[np.ix_(below, below)], np.eye(below.sum()), atol=1e-14)
    np.testing.assert_allclose((a1 @ a2 - a2 @ a1).toarray(), 0, atol=1e-14)


def test_number_operator_matches_occupation():
    b = FockBasis(1, 3, 4)
    for slot in range(3):
        n_op = (b.raise_(slot) @ b.lower(slot)).toarray()
        np.testing.assert_allclose(np.diag(n_op), b.occupation(slot))
        np.testing.assert_allclose(n_op, np.diag(np.diag(n_op)), atol=1e-14)


def test_quadratic_matches_sum_of_products():
    rng = np.random.default_rng(3)
    b = FockBasis(2, 3, 2)
    h = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    ref = sum(h[k, l] * (b.raise_(k) @ b.lower(l)) for k in range(3) for l in range(3))
    np.testing.assert_allclose(b.quadratic(h).toarray(), ref.toarray(), atol=1e-14)


def test_embed_acts_on_system_index():
    b = FockBasis(2, 2, 1)
    sx = np.array([[0, 1], [1, 0]])
    E = embed_system(b, sx).toarray()
    v = np.zeros(b.dim)
    v[b.index((0, 1, 0))] = 1
    assert (E @ v)[b.index((1, 1, 0))] == 1
    with pytest.raises(ValueError):
        b.embed(np.eye(3))


def test_vacuum_projection():
    b = FockBasis(1, 2, 2)
    x = np.ones(b.dim)
    y = vacuum_project(b, x, 2)
    np.testing.assert_array_equal(y != 0, b.occupation(1) == 0)
    rho = np.ones((b.dim, b.dim))
    r = project_slot(b, rho, 0)
    keep = b.occupation(0) == 0
    assert r[np.ix_(~keep, keep)].sum() == 0 and r[np.ix_(keep, keep)].all()


def test_bad_mode_numbers_and_budget():
    b = FockBasis(2, 2, 1)
    with pytest.raises(IndexError):
        annihilator(b, 0)
    with pytest.raises(IndexError):
        creator(b, 3)
    with pytest.raises(MemoryError):
        FockBasis(2, 20, 10, max_dim=1000)
    with pytest.raises(ValueError):
        FockBasis(0, 1, 1)
