"""Newton solves for the nonlinear stationary pressure equation.

The permeability depends on the pressure itself, so each Newton step
linearizes around the current iterate: the system combines the
pressure-dependent stiffness with a nonsymmetric term from the
permeability derivative.  The reduced driver rebuilds the node-varying
online basis every iteration (each node's parameter is its current
pressure coefficient, clamped to the training range); the fine-grid
driver runs the same iteration in the full fine space and serves as the
reference.

Two reduced assembly variants exist: ``full`` integrates the Newton
system on the fine grid against the fine representation of the current
basis, while ``precomputed`` combines the stored reduced blocks with
per-node parameter weights and never touches the fine grid for the
system matrix.  Both variants use the fully integrated residual as the
right-hand side, so they converge to the same discrete solution.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .errors import InvalidArgumentError, NonconvergenceError
from .fem import assemble_load, assemble_stiffness, p1_gradients, solve_general
from .online import OnlineSolution, build_online_basis, pair_blocks

__all__ = [
    "DEFAULT_INITIAL_PRESSURE",
    "newton_richards",
    "fine_newton_reference",
]

# constant initial pressure head: zero pressure (full saturation), the
# hydrostatic equilibrium with the homogeneous Dirichlet boundary.  A
# deeply unsaturated constant start is incompatible with the saturated
# boundary strip that the fixed boundary condition imposes, and defeats
# the undamped iteration for every quadrature variant.
DEFAULT_INITIAL_PRESSURE = 0.0


def _element_operators(mesh):
    """Sparse element-wise averaging and gradient-component operators.

    Returns
    -------
    (areas, avg, gx, gy)
        ``avg @ v`` is the vertex mean per element, ``gx @ v`` and
        ``gy @ v`` the components of the elementwise gradient of the
        P1 function with nodal values ``v``.
    """
    areas, grads = p1_gradients(mesh)
    n_el = mesh.n_elements
    rows = np.repeat(np.arange(n_el), 3)
    cols = mesh.elements.ravel()
    shape = (n_el, mesh.n_nodes)
    avg = sp.csr_matrix((np.full(rows.size, 1.0 / 3.0), (rows, cols)), shape=shape)
    gx = sp.csr_matrix((grads[:, :, 0].ravel(), (rows, cols)), shape=shape)
    gy = sp.csr_matrix((grads[:, :, 1].ravel(), (rows, cols)), shape=shape)
    return areas, avg, gx, gy


def _combine_fields(weights, fields):
    """Elementwise 2x2 coefficient from per-term weights (Q, M)."""
    return np.einsum("qm,qmab->mab", weights, fields)


def _derivative_term(coeff, fields, ops, p_fine, pbar, basis_matrix):
    """Nonsymmetric Newton block from the permeability derivative.

    Entry (y, z) integrates (dA/dp grad p . grad v_y) w_z with the
    elementwise vertex mean standing in for the trial factor w_z,
    matching the quadrature of the pressure-dependent coefficient.
    """
    areas, avg, gx, gy = ops
    fprime = _combine_fields(coeff.theta_prime(pbar), fields)
    px = gx @ p_fine
    py = gy @ p_fine
    wx = fprime[:, 0, 0] * px + fprime[:, 0, 1] * py
    wy = fprime[:, 1, 0] * px + fprime[:, 1, 1] * py
    Gm = sp.diags(areas * wx) @ (gx @ basis_matrix) + sp.diags(areas * wy) @ (
        gy @ basis_matrix
    )
    return (Gm.T @ (avg @ basis_matrix)).toarray()


def _require_nonlinear(coeff):
    if coeff.theta_prime(-1.0) is None:
        raise InvalidArgumentError(
            f"problem {coeff.name!r} has no parameter derivative; "
            "Newton iteration needs a pressure-dependent coefficient"
        )


def newton_richards(
    db,
    p0=None,
    newton_tol=1e-5,
    max_iter=25,
    variant="full",
    f=None,
):
    """Newton iteration in the reduced multiscale space.

    Parameters
    ----------
    db : OfflineDB
        Offline data for the nonlinear problem.
    p0 : float or (N,) array, optional
        Initial coarse pressure coefficients (default: constant
        ``DEFAULT_INITIAL_PRESSURE``).
    newton_tol : float
        Stop once the relative Euclidean update of the coarse
        coefficients drops to this value.
    max_iter : int
        Iteration cap; exceeding it raises a nonconvergence error
        carrying the trace.
    variant : {"full", "precomputed"}
        System assembly: fine-grid quadrature against the current basis,
        or summation of stored reduced blocks with the permeability
        weight frozen per column node plus a diagonal derivative
        correction from the stored-block contraction with the current
        coefficients.  The right-hand side (the residual) is fully
        integrated in both variants, so they share the same fixed
        point.
    f : callable, optional
        Source term override (default: the problem's source).

    Returns
    -------
    (OnlineSolution, trace)
        The solution at the final iterate and one trace row per
        iteration with the iteration number, relative update, residual
        norm, and how many node parameters were clamped.
    """
    ws = db.workspace
    coeff = ws.coeff
    _require_nonlinear(coeff)
    if variant not in ("full", "precomputed"):
        raise InvalidArgumentError(f"unknown Newton variant {variant!r}")
    fine = ws.hier.fine
    n_nodes = db.node_ids.size
    if p0 is None:
        p = np.full(n_nodes, DEFAULT_INITIAL_PRESSURE)
    else:
        p = np.broadcast_to(np.asarray(p0, dtype=np.float64), (n_nodes,)).copy()
    load = ws.load if f is None else assemble_load(fine, f)
    ops = _element_operators(fine)
    avg = ops[1]
    trace = []
    for iteration in range(1, max_iter + 1):
        basis = build_online_basis(db, p)
        Psi = basis.fine_matrix()
        p_fine = Psi @ p
        pbar = avg @ p_fine
        A = assemble_stiffness(fine, _combine_fields(coeff.theta(pbar), ws.fields))
        residual = Psi.T @ (load - A @ p_fine)
        if variant == "full":
            system = (Psi.T @ (A @ Psi)).toarray()
            system += _derivative_term(coeff, ws.fields, ops, p_fine, pbar, Psi)
        else:
            blocks = pair_blocks(db, basis)
            th = np.atleast_2d(coeff.theta(basis.mu_nodes))
            thp = np.atleast_2d(coeff.theta_prime(basis.mu_nodes))
            # stiffness part: the permeability weight of each stored
            # block is frozen at the trial node of its column
            system = sum(
                blocks[q] * th[q][None, :] for q in range(db.n_terms)
            )
            # derivative part: grad p enters exactly through the stored
            # block contraction (blocks[q] @ p)[y]; the remaining slowly
            # varying scalar factor (derivative weight times trial
            # value) is frozen at the test node of each row, leaving a
            # diagonal correction.  The entry is zero wherever clamping
            # deactivates the parameter dependence, and in the fully
            # saturated regime the whole correction vanishes.
            flux = np.stack([blocks[q] @ p for q in range(db.n_terms)])
            diag = np.where(
                basis.mu_raw == basis.mu_nodes,
                np.einsum("qn,qn->n", thp, flux),
                0.0,
            )
            system = system + np.diag(diag)
        delta = solve_general(system, residual)
        denom = float(np.linalg.norm(p))
        rel_update = float(np.linalg.norm(delta)) / (denom if denom > 0.0 else 1.0)
        p = p + delta
        trace.append(
            {
                "iteration": iteration,
                "rel_update": rel_update,
                "residual_norm": float(np.linalg.norm(residual)),
                "clamped": basis.n_clamped,
            }
        )
        if rel_update <= newton_tol:
            break
    else:
        raise NonconvergenceError(
            f"Newton did not reach {newton_tol} within {max_iter} iterations "
            f"(last relative update {trace[-1]['rel_update']:.3e})",
            trace=trace,
        )
    return OnlineSolution(basis=build_online_basis(db, p), coarse=p), trace


def fine_newton_reference(
    mesh,
    coeff,
    p0=None,
    newton_tol=1e-5,
    max_iter=25,
    f=None,
):
    """Newton iteration in the full fine space (the reference solver).

    Same linearization as :func:`newton_richards`, posed on the interior
    fine nodes with the identity basis and no parameter clamping.

    Returns
    -------
    ((n_nodes,) float64, trace)
        Nodal pressure values (zero on the boundary) and the iteration
        trace.
    """
    _require_nonlinear(coeff)
    fields = coeff.component_fields(mesh.element_barycenters())
    load = assemble_load(mesh, coeff.source if f is None else f)
    interior = mesh.interior_nodes
    p = np.zeros(mesh.n_nodes)
    p[interior] = DEFAULT_INITIAL_PRESSURE if p0 is None else p0
    ops = _element_operators(mesh)
    areas, avg, gx, gy = ops
    trace = []
    for iteration in range(1, max_iter + 1):
        pbar = avg @ p
        A = assemble_stiffness(mesh, _combine_fields(coeff.theta(pbar), fields))
        residual = (load - A @ p)[interior]
        fprime = _combine_fields(coeff.theta_prime(pbar), fields)
        px = gx @ p
        py = gy @ p
        wx = fprime[:, 0, 0] * px + fprime[:, 0, 1] * py
        wy = fprime[:, 1, 0] * px + fprime[:, 1, 1] * py
        Gm = sp.diags(areas * wx) @ gx + sp.diags(areas * wy) @ gy
        system = (A + Gm.T @ avg).tocsr()[interior][:, interior]
        delta = solve_general(system.tocsc(), residual)
        denom = float(np.linalg.norm(p[interior]))
        rel_update = float(np.linalg.norm(delta)) / (denom if denom > 0.0 else 1.0)
        p[interior] += delta
        trace.append(
            {
                "iteration": iteration,
                "rel_update": rel_update,
                "residual_norm": float(np.linalg.norm(residual)),
                "clamped": 0,
            }
        )
        if rel_update <= newton_tol:
            break
    else:
        raise NonconvergenceError(
            f"fine Newton did not reach {newton_tol} within {max_iter} "
            f"iterations (last relative update {trace[-1]['rel_update']:.3e})",
            trace=trace,
        )
    return p, trace
