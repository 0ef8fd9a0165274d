"""Finite element core: assembly oracles, interpolation identities, solvers."""

import numpy as np
import pytest
import scipy.sparse as sp

from rblod.errors import InvalidArgumentError, SingularMatrixError, ZeroReferenceError
from rblod.fem import (
    assemble_load,
    assemble_mass,
    assemble_stiffness,
    fem_reference_solve,
    h1_seminorm,
    l2_norm,
    l2_projection_to_coarse,
    energy_norm,
    prolongation_matrix,
    quasi_interpolation_matrix,
    relative_error,
    solve_general,
    solve_spd,
)
from rblod.grid import build_unit_square_mesh, refine_uniform


def stiffness_oracle(mesh, field):
    """Reference assembly: per-element loops, gradients via linear solves."""
    A = np.zeros((mesh.n_nodes, mesh.n_nodes))
    for e in range(mesh.n_elements):
        conn = mesh.elements[e]
        pts = mesh.nodes[conn]
        # basis i has value delta_ij at vertex j: solve for affine coefficients
        V = np.column_stack([np.ones(3), pts])
        coef = np.linalg.solve(V, np.eye(3))  # columns: (c, gx, gy) per basis
        grads = coef[1:, :].T
        area = 0.5 * abs(np.linalg.det(pts[1:] - pts[0]))
        mat = field[e] if field is not None else np.eye(2)
        for i in range(3):
            for j in range(3):
                A[conn[i], conn[j]] += area * grads[i] @ mat @ grads[j]
    return A


def load_oracle(mesh, nodal_values_fn):
    """Exact load of an affine source via barycentric moment formulas."""
    out = np.zeros(mesh.n_nodes)
    for e in range(mesh.n_elements):
        conn = mesh.elements[e]
        pts = mesh.nodes[conn]
        area = 0.5 * abs(np.linalg.det(pts[1:] - pts[0]))
        fvals = nodal_values_fn(pts)
        # int_T lambda_i lambda_j = area/12 (1 + delta_ij)
        for i in range(3):
            acc = 0.0
            for j in range(3):
                acc += fvals[j] * (2.0 if i == j else 1.0)
            out[conn[i]] += area * acc / 12.0
    return out


def test_stiffness_matches_oracle():
    mesh = build_unit_square_mesh(3)
    rng = np.random.default_rng(0)
    raw = rng.normal(size=(mesh.n_elements, 2, 2))
    field = np.einsum("mab,mcb->mac", raw, raw) + 0.1 * np.eye(2)[None]
    A = assemble_stiffness(mesh, field)
    np.testing.assert_allclose(A.toarray(), stiffness_oracle(mesh, field), atol=1e-13)


def test_stiffness_identity_and_scalar():
    mesh = build_unit_square_mesh(4)
    A_id = assemble_stiffness(mesh)
    np.testing.assert_allclose(A_id.toarray(), stiffness_oracle(mesh, None), atol=1e-13)
    c = np.full(mesh.n_elements, 2.5)
    np.testing.assert_allclose(
        assemble_stiffness(mesh, c).toarray(), 2.5 * A_id.toarray(), atol=1e-13
    )


def test_stiffness_row_sums_vanish():
    mesh = build_unit_square_mesh(6)
    rng = np.random.default_rng(1)
    field = rng.uniform(0.5, 2.0, mesh.n_elements)
    A = assemble_stiffness(mesh, field)
    np.testing.assert_allclose(A @ np.ones(mesh.n_nodes), 0.0, atol=1e-12)


def test_stiffness_rejects_nonsymmetric():
    mesh = build_unit_square_mesh(2)
    field = np.broadcast_to(np.array([[1.0, 0.3], [0.0, 1.0]]), (mesh.n_elements, 2, 2))
    with pytest.raises(InvalidArgumentError):
        assemble_stiffness(mesh, field)
    with pytest.raises(InvalidArgumentError):
        assemble_stiffness(mesh, np.ones(5))


def test_stiffness_element_subset():
    mesh = build_unit_square_mesh(3)
    subset = np.array([0, 1, 7])
    A_sub = assemble_stiffness(mesh, None, elements=subset)
    expected = np.zeros((mesh.n_nodes, mesh.n_nodes))
    oracle_full = None
    for e in subset:
        single = build_single_element_contribution(mesh, e)
        expected += single
    np.testing.assert_allclose(A_sub.toarray(), expected, atol=1e-13)


def build_single_element_contribution(mesh, e):
    out = np.zeros((mesh.n_nodes, mesh.n_nodes))
    conn = mesh.elements[e]
    pts = mesh.nodes[conn]
    V = np.column_stack([np.ones(3), pts])
    coef = np.linalg.solve(V, np.eye(3))
    grads = coef[1:, :].T
    area = 0.5 * abs(np.linalg.det(pts[1:] - pts[0]))
    for i in range(3):
        for j in range(3):
            out[conn[i], conn[j]] += area * grads[i] @ grads[j]
    return out


def test_mass_partition_of_unity():
    mesh = build_unit_square_mesh(5)
    M = assemble_mass(mesh)
    ones = np.ones(mesh.n_nodes)
    assert ones @ M @ ones == pytest.approx(1.0)  # total area
    # row sum = integral of the hat function = |support| / 3
    h2 = (1.0 / 5) ** 2
    row_sums = np.asarray(M.sum(axis=1)).ravel()
    interior = mesh.interior_nodes
    np.testing.assert_allclose(row_sums[interior], 6 * (h2 / 2) / 3.0)


def test_load_constant_source():
    mesh = build_unit_square_mesh(4)
    b = assemble_load(mesh, lambda x: np.ones(x.shape[0]))
    h2 = (1.0 / 4) ** 2
    np.testing.assert_allclose(b[mesh.interior_nodes], h2)
    assert b.sum() == pytest.approx(1.0)


def test_load_affine_source_exact():
    mesh = build_unit_square_mesh(3)

    def f(x):
        return 2.0 * x[:, 0] - 0.7 * x[:, 1] + 0.3

    def nodal(pts):
        return 2.0 * pts[:, 0] - 0.7 * pts[:, 1] + 0.3

    np.testing.assert_allclose(assemble_load(mesh, f), load_oracle(mesh, nodal), atol=1e-14)


def test_prolongation_reproduces_hats():
    hier = refine_uniform(build_unit_square_mesh(3), 2)
    P = prolongation_matrix(hier)
    assert P.shape == (hier.fine.n_nodes, hier.coarse.n_nodes)
    # hat values at the coarse nodes themselves form the identity
    sub = P[hier.coarse_node_in_fine].toarray()
    np.testing.assert_allclose(sub, np.eye(hier.coarse.n_nodes), atol=1e-14)
    # partition of unity at every fine node
    np.testing.assert_allclose(np.asarray(P.sum(axis=1)).ravel(), 1.0)
    # affine functions are prolonged exactly
    affine = lambda pts: 0.3 * pts[:, 0] + 1.7 * pts[:, 1] - 0.4
    np.testing.assert_allclose(P @ affine(hier.coarse.nodes), affine(hier.fine.nodes), atol=1e-14)


def quasi_interp_oracle(hier):
    """Reference weights by exact per-fine-element integration."""
    P = prolongation_matrix(hier).toarray()
    fine = hier.fine
    n_int = hier.coarse.interior_nodes.size
    num = np.zeros((hier.coarse.n_nodes, fine.n_nodes))
    for e in range(fine.n_elements):
        conn = fine.elements[e]
        pts = fine.nodes[conn]
        area = 0.5 * abs(np.linalg.det(pts[1:] - pts[0]))
        for z in range(hier.coarse.n_nodes):
            hat = P[conn, z]
            if not hat.any():
                continue
            for i_loc in range(3):
                acc = sum(
                    hat[j] * (2.0 if i_loc == j else 1.0) for j in range(3)
                )
                num[z, conn[i_loc]] += area * acc / 12.0
    weights = num.sum(axis=1)
    rows = num / weights[:, None]
    return rows[hier.coarse.interior_nodes]


def test_quasi_interpolation_matches_oracle():
    hier = refine_uniform(build_unit_square_mesh(3), 1)
    C = quasi_interpolation_matrix(hier)
    assert C.shape == (hier.coarse.interior_nodes.size, hier.fine.n_nodes)
    np.testing.assert_allclose(C.toarray(), quasi_interp_oracle(hier), atol=1e-13)


def test_quasi_interpolation_weights_positive_inside():
    hier = refine_uniform(build_unit_square_mesh(4), 2)
    C = quasi_interpolation_matrix(hier)
    assert np.all(C.data > 0)  # mass-average weights are positive where defined


def test_inverse_restriction_identity_is_l2_projection():
    # applying the interpolation and inverting it on the coarse space is the
    # same map as the L2 projection onto interior coarse hats
    hier = refine_uniform(build_unit_square_mesh(4), 2)
    rng = np.random.default_rng(8)
    v = rng.normal(size=hier.fine.n_nodes)
    v[hier.fine.boundary_nodes] = 0.0

    proj = l2_projection_to_coarse(hier, v)

    M = assemble_mass(hier.fine)
    P = prolongation_matrix(hier)
    interior = hier.coarse.interior_nodes
    C = quasi_interpolation_matrix(hier)
    d = np.asarray((M @ P).sum(axis=0)).ravel()[interior]  # (1, Phi_z)
    MH = (P.T @ M @ P).toarray()[np.ix_(interior, interior)]
    recovered = np.linalg.solve(MH, d * (C @ v))
    np.testing.assert_allclose(proj[interior], recovered, atol=1e-12)


def test_l2_projection_reproduces_coarse_functions():
    hier = refine_uniform(build_unit_square_mesh(4), 2)
    rng = np.random.default_rng(3)
    c = np.zeros(hier.coarse.n_nodes)
    c[hier.coarse.interior_nodes] = rng.normal(size=hier.coarse.interior_nodes.size)
    v = prolongation_matrix(hier) @ c
    np.testing.assert_allclose(l2_projection_to_coarse(hier, v), c, atol=1e-12)


def test_norms_on_interpolants():
    mesh = build_unit_square_mesh(8)
    ones = np.ones(mesh.n_nodes)
    assert l2_norm(mesh, ones) == pytest.approx(1.0)
    linear = mesh.nodes[:, 0]
    assert h1_seminorm(mesh, linear) == pytest.approx(1.0)
    assert energy_norm(mesh, np.full(mesh.n_elements, 4.0), linear) == pytest.approx(2.0)
    # region restriction: left half of the square carries half the energy
    bary = mesh.element_barycenters()
    left = np.flatnonzero(bary[:, 0] < 0.5)
    assert h1_seminorm(mesh, linear, elements=left) == pytest.approx(np.sqrt(0.5))


def test_relative_error_zero_reference():
    assert relative_error(1.0, 2.0) == 0.5
    with pytest.raises(ZeroReferenceError):
        relative_error(1.0, 0.0)


def test_solve_spd_dense_oracle():
    rng = np.random.default_rng(12)
    B = rng.normal(size=(50, 50))
    A = B @ B.T + 50 * np.eye(50)
    b = rng.normal(size=50)
    np.testing.assert_allclose(solve_spd(A, b), np.linalg.solve(A, b), atol=1e-10)


def test_solve_spd_sparse_multi_rhs():
    mesh = build_unit_square_mesh(6)
    A = assemble_stiffness(mesh)
    interior = mesh.interior_nodes
    Ai = A[interior][:, interior].tocsc()
    rng = np.random.default_rng(4)
    B = rng.normal(size=(interior.size, 3))
    X = solve_spd(Ai, B)
    np.testing.assert_allclose(Ai @ X, B, atol=1e-10)


def test_solve_singular_raises_with_diagnostics():
    A = sp.csr_matrix(np.array([[1.0, 0.0], [0.0, 0.0]]))
    with pytest.raises(SingularMatrixError) as err:
        solve_general(A, np.array([1.0, 1.0]))
    assert err.value.diagnostics
    with pytest.raises(SingularMatrixError):
        solve_spd(np.array([[1.0, 2.0], [2.0, 4.0]]), np.array([1.0, 1.0]))


def test_fem_reference_zero_source():
    mesh = build_unit_square_mesh(4)
    u = fem_reference_solve(mesh, None, lambda x: np.zeros(x.shape[0]))
    np.testing.assert_array_equal(u, 0.0)


def test_fem_reference_symmetry_under_transposition():
    # swap-symmetric data: solution values are equal at mirrored nodes
    mesh = build_unit_square_mesh(8)
    u = fem_reference_solve(mesh, None, lambda x: np.ones(x.shape[0]))
    n = mesh.n
    ids = np.arange(mesh.n_nodes)
    gi, gj = ids % (n + 1), ids // (n + 1)
    mirrored = gi * (n + 1) + gj
    np.testing.assert_allclose(u, u[mirrored], atol=1e-10)
    assert u.max() > 0


def test_fem_reference_affine_exactness():
    # interpolants of affine functions are discrete-harmonic for the Laplacian
    mesh = build_unit_square_mesh(5)
    A = assemble_stiffness(mesh)
    linear = 1.3 * mesh.nodes[:, 0] - 0.2 * mesh.nodes[:, 1]
    resid = (A @ linear)[mesh.interior_nodes]
    np.testing.assert_allclose(resid, 0.0, atol=1e-13)
