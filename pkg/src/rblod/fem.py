"""P1 finite element core: assembly, interpolation operators, norms, solves.

Stiffness assembly treats coefficient matrices as constant per element
(sampled at barycenters upstream), which makes the element integrals
exact.  Load vectors use the three-edge-midpoint rule, exact for
quadratic integrands, hence exact for P1 test functions against affine
data.  All matrices are built over the full node set; Dirichlet
restriction happens where systems are solved.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InvalidArgumentError, SingularMatrixError, ZeroReferenceError

__all__ = [
    "p1_gradients",
    "assemble_stiffness",
    "assemble_mass",
    "assemble_load",
    "prolongation_matrix",
    "quasi_interpolation_matrix",
    "l2_projection_to_coarse",
    "l2_norm",
    "h1_seminorm",
    "energy_norm",
    "relative_error",
    "solve_spd",
    "solve_general",
    "fem_reference_solve",
]

RESIDUAL_TOL = 1e-10


# ── element geometry ────────────────────────────────────────────────────


def p1_gradients(mesh, elements=None):
    """Areas and constant basis gradients of (a subset of) elements.

    Returns
    -------
    areas : (M,) float64
    grads : (M, 3, 2) float64
        Gradient of the barycentric basis function of each local vertex.
    """
    conn = mesh.elements if elements is None else mesh.elements[elements]
    pts = mesh.nodes[conn]
    e1 = pts[:, 1] - pts[:, 0]
    e2 = pts[:, 2] - pts[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    areas = 0.5 * det
    grads = np.empty((conn.shape[0], 3, 2))
    grads[:, 1, 0] = e2[:, 1]
    grads[:, 1, 1] = -e2[:, 0]
    grads[:, 2, 0] = -e1[:, 1]
    grads[:, 2, 1] = e1[:, 0]
    grads[:, 1:] /= det[:, None, None]
    grads[:, 0] = -grads[:, 1] - grads[:, 2]
    return areas, grads


def _field_as_matrices(field, n_elements):
    if field is None:
        return np.broadcast_to(np.eye(2), (n_elements, 2, 2))
    field = np.asarray(field, dtype=np.float64)
    if field.ndim == 1:
        if field.shape[0] != n_elements:
            raise InvalidArgumentError(
                f"scalar field has {field.shape[0]} entries for {n_elements} elements"
            )
        return field[:, None, None] * np.eye(2)[None]
    if field.shape != (n_elements, 2, 2):
        raise InvalidArgumentError(
            f"field shape {field.shape} does not match ({n_elements}, 2, 2)"
        )
    if not np.allclose(field, field.transpose(0, 2, 1), rtol=1e-12, atol=1e-14):
        raise InvalidArgumentError("coefficient matrices must be symmetric")
    return field


# ── assembly ────────────────────────────────────────────────────────────


def assemble_stiffness(mesh, field=None, elements=None):
    """Stiffness matrix for an element-wise constant matrix coefficient.

    Parameters
    ----------
    mesh : Mesh
    field : None, (M,) or (M, 2, 2) array
        Coefficient per assembled element; None means identity
        (Laplacian).  Matrix coefficients must be symmetric.
    elements : optional int array
        Assemble over this element subset only (matrix stays full-size).

    Returns
    -------
    csr_matrix of shape (n_nodes, n_nodes)
    """
    conn = mesh.elements if elements is None else mesh.elements[np.asarray(elements)]
    areas, grads = p1_gradients(mesh, elements)
    mats = _field_as_matrices(field, conn.shape[0])
    local = np.einsum("m,mia,mab,mjb->mij", areas, grads, mats, grads)
    rows = np.repeat(conn, 3, axis=1).ravel()
    cols = np.tile(conn, (1, 3)).ravel()
    A = sp.csr_matrix(
        (local.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes)
    )
    A.sum_duplicates()
    return A


def assemble_mass(mesh, elements=None):
    """Consistent P1 mass matrix (exact integration)."""
    conn = mesh.elements if elements is None else mesh.elements[np.asarray(elements)]
    areas, _ = p1_gradients(mesh, elements)
    base = (np.ones((3, 3)) + np.eye(3)) / 12.0
    local = areas[:, None, None] * base[None]
    rows = np.repeat(conn, 3, axis=1).ravel()
    cols = np.tile(conn, (1, 3)).ravel()
    M = sp.csr_matrix(
        (local.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes)
    )
    M.sum_duplicates()
    return M


def assemble_load(mesh, f, elements=None):
    """Load vector by the three-edge-midpoint rule.

    Parameters
    ----------
    f : callable
        Maps an (S, 2) array of points to (S,) values.

    Returns
    -------
    (n_nodes,) float64
    """
    conn = mesh.elements if elements is None else mesh.elements[np.asarray(elements)]
    areas, _ = p1_gradients(mesh, elements)
    pts = mesh.nodes[conn]
    mids = 0.5 * (pts[:, [1, 2, 0]] + pts[:, [2, 0, 1]])  # midpoint opposite vertex i
    vals = np.asarray(f(mids.reshape(-1, 2))).reshape(-1, 3)
    # phi_i is 1/2 at the two adjacent edge midpoints, 0 at the opposite one
    contrib = (vals.sum(axis=1)[:, None] - vals) * (areas / 6.0)[:, None]
    out = np.zeros(mesh.n_nodes)
    np.add.at(out, conn.ravel(), contrib.ravel())
    return out


# ── coarse-fine operators ───────────────────────────────────────────────


def prolongation_matrix(hier):
    """Coarse hat functions sampled at fine nodes.

    Returns a csr matrix of shape (fine.n_nodes, coarse.n_nodes); column z
    holds the fine nodal values of the coarse basis function at z.
    """
    nc = hier.coarse.n
    m = 1 << hier.levels
    nf = hier.fine.n
    ids = np.arange(hier.fine.n_nodes)
    gi = ids % (nf + 1)
    gj = ids // (nf + 1)
    ci = np.minimum(gi // m, nc - 1)
    cj = np.minimum(gj // m, nc - 1)
    u = gi / m - ci
    v = gj / m - cj
    # nodal values of the four cell-corner hats, valid on both triangles
    w_a = 1.0 - np.maximum(u, v)
    w_b = np.maximum(u - v, 0.0)
    w_c = np.minimum(u, v)
    w_d = np.maximum(v - u, 0.0)
    corner_a = cj * (nc + 1) + ci
    cols = np.concatenate([corner_a, corner_a + 1, corner_a + nc + 2, corner_a + nc + 1])
    rows = np.tile(ids, 4)
    data = np.concatenate([w_a, w_b, w_c, w_d])
    keep = data != 0.0
    P = sp.csr_matrix(
        (data[keep], (rows[keep], cols[keep])),
        shape=(hier.fine.n_nodes, hier.coarse.n_nodes),
    )
    P.sum_duplicates()
    return P


def quasi_interpolation_matrix(hier, mass=None, prolongation=None):
    """Weight matrix of the mass-averaging interpolation onto coarse hats.

    Row z (an interior coarse node) holds the fine-node weights whose dot
    product with a fine coefficient vector gives the coarse coefficient
    (v, Phi_z) / (1, Phi_z).

    Returns
    -------
    csr_matrix of shape (n_interior_coarse_nodes, fine.n_nodes)
    """
    M = assemble_mass(hier.fine) if mass is None else mass
    P = prolongation_matrix(hier) if prolongation is None else prolongation
    MP = (M @ P).tocsc()
    weights = np.asarray(MP.sum(axis=0)).ravel()  # (1, Phi_z) since sum phi_i = 1
    C = MP.T.tocsr()
    inv = sp.diags(1.0 / weights)
    C = (inv @ C).tocsr()
    return C[hier.coarse.interior_nodes]


def l2_projection_to_coarse(hier, v, mass=None, prolongation=None):
    """L2 projection of a fine function onto the interior coarse hats.

    Returns coefficients on all coarse nodes (zeros on the boundary).
    """
    M = assemble_mass(hier.fine) if mass is None else mass
    P = prolongation_matrix(hier) if prolongation is None else prolongation
    interior = hier.coarse.interior_nodes
    b = (P.T @ (M @ np.asarray(v, dtype=np.float64)))[interior]
    MH = (P.T @ M @ P).tocsr()[interior][:, interior]
    c = solve_spd(MH, b)
    out = np.zeros(hier.coarse.n_nodes)
    out[interior] = c
    return out


# ── norms ───────────────────────────────────────────────────────────────


def l2_norm(mesh, v, elements=None):
    M = assemble_mass(mesh, elements)
    v = np.asarray(v, dtype=np.float64)
    return float(np.sqrt(np.maximum(v @ (M @ v), 0.0)))


def h1_seminorm(mesh, v, elements=None):
    A = assemble_stiffness(mesh, None, elements)
    v = np.asarray(v, dtype=np.float64)
    return float(np.sqrt(np.maximum(v @ (A @ v), 0.0)))


def energy_norm(mesh, field, v, elements=None):
    """Coefficient-weighted H1 seminorm, optionally over an element subset."""
    A = assemble_stiffness(mesh, field, elements)
    v = np.asarray(v, dtype=np.float64)
    return float(np.sqrt(np.maximum(v @ (A @ v), 0.0)))


def relative_error(error, reference):
    """error / reference, rejecting a zero reference."""
    if reference == 0.0:
        raise ZeroReferenceError("relative error against a zero reference norm")
    return error / reference


# ── linear solves ───────────────────────────────────────────────────────


def _matrix_inf_norm(A):
    if sp.issparse(A):
        return float(np.abs(A).sum(axis=1).max())
    return float(np.linalg.norm(A, np.inf))


def _check_residual(A, x, b):
    resid = A @ x - b
    bound = RESIDUAL_TOL * (
        _matrix_inf_norm(A) * np.abs(x).max(initial=0.0) + np.abs(b).max(initial=0.0)
    )
    worst = float(np.abs(resid).max(initial=0.0))
    if not np.isfinite(worst) or worst > max(bound, 1e-300):
        raise SingularMatrixError(
            f"solve residual {worst:.3e} exceeds bound {bound:.3e}",
            diagnostics={"residual": worst, "bound": bound},
        )


def _pivot_diagnostics(A, exc):
    diag = {"exception": str(exc), "shape": tuple(A.shape)}
    if sp.issparse(A):
        diag["nnz"] = int(A.nnz)
        zero_rows = int(np.sum(np.asarray(np.abs(A).sum(axis=1)).ravel() == 0.0))
        diag["zero_rows"] = zero_rows
    else:
        _, _, U = scipy.linalg.lu(np.asarray(A))
        diag["min_abs_pivot"] = float(np.abs(np.diag(U)).min())
    return diag


def solve_spd(A, b):
    """Direct solve for a symmetric positive definite system.

    Accepts one right-hand side or a matrix of them; verifies the
    residual against a norm-scaled tolerance.
    """
    b = np.asarray(b, dtype=np.float64)
    try:
        if sp.issparse(A):
            x = spla.splu(A.tocsc()).solve(b)
        else:
            c, low = scipy.linalg.cho_factor(A)
            x = scipy.linalg.cho_solve((c, low), b)
    except (RuntimeError, scipy.linalg.LinAlgError, ValueError) as exc:
        raise SingularMatrixError(
            f"SPD factorization failed: {exc}", diagnostics=_pivot_diagnostics(A, exc)
        ) from exc
    _check_residual(A, x, b)
    return x


def solve_general(A, b):
    """Direct solve for a general square system with residual check."""
    b = np.asarray(b, dtype=np.float64)
    try:
        if sp.issparse(A):
            x = spla.splu(A.tocsc()).solve(b)
        else:
            x = scipy.linalg.solve(A, b)
    except (RuntimeError, scipy.linalg.LinAlgError, ValueError) as exc:
        raise SingularMatrixError(
            f"factorization failed: {exc}", diagnostics=_pivot_diagnostics(A, exc)
        ) from exc
    _check_residual(A, x, b)
    return x


def fem_reference_solve(mesh, field, f):
    """Fine-grid P1 solution with homogeneous Dirichlet data.

    Parameters
    ----------
    mesh : Mesh
    field : (M,), (M, 2, 2) array or None
        Coefficient per element.
    f : callable
        Source term, points -> values.

    Returns
    -------
    (n_nodes,) float64 with zeros on the boundary.
    """
    A = assemble_stiffness(mesh, field)
    b = assemble_load(mesh, f)
    interior = mesh.interior_nodes
    u = np.zeros(mesh.n_nodes)
    if interior.size:
        u[interior] = solve_spd(A[interior][:, interior], b[interior])
    return u
