"""Localized orthogonal decomposition: correctors and multiscale bases.

Corrector problems are posed on element patches in the fine space,
constrained to the kernel of the mass-averaging interpolation (enforced
with one multiplier row per overlapping interior coarse node).  The
saddle systems are solved by factorizing the patch stiffness once and
eliminating the multipliers through a dense Schur complement, so extra
right-hand sides on the same patch and parameter cost one triangular
solve each.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DegeneratePatchError, InvalidArgumentError, SingularMatrixError
from .fem import (
    assemble_load,
    assemble_mass,
    assemble_stiffness,
    prolongation_matrix,
    quasi_interpolation_matrix,
)
from .grid import element_patch, node_support

__all__ = [
    "FineWorkspace",
    "ConstrainedFactor",
    "PatchSolver",
    "solve_constrained",
    "solve_corrector",
    "assemble_ms_basis",
    "classical_lod_solve",
]


class FineWorkspace:
    """Shared fine-grid operators for one hierarchy and coefficient.

    Holds the per-term stiffness matrices, Laplacian, mass matrix,
    prolongation, interpolation weights, and the source load, all
    assembled once.
    """

    def __init__(self, hier, coeff):
        self.hier = hier
        self.coeff = coeff
        fine = hier.fine
        self.barycenters = fine.element_barycenters()
        self.fields = coeff.component_fields(self.barycenters)
        self.n_terms = self.fields.shape[0]
        self.A_q = [assemble_stiffness(fine, self.fields[q]) for q in range(self.n_terms)]
        self.laplacian = assemble_stiffness(fine)
        self.mass = assemble_mass(fine)
        self.prolongation = prolongation_matrix(hier)
        self.interp = quasi_interpolation_matrix(hier, self.mass, self.prolongation)
        self.load = assemble_load(fine, coeff.source)
        self.interior_coarse = hier.coarse.interior_nodes
        self._row_of_node = {int(z): i for i, z in enumerate(self.interior_coarse)}
        self._patch_cache = {}
        self._patch_order = []
        self.patch_cache_size = 32

    def coarse_row(self, z):
        """Interpolation row index of an interior coarse node."""
        try:
            return self._row_of_node[int(z)]
        except KeyError:
            raise InvalidArgumentError(f"node {z} is not an interior coarse node")

    def stiffness(self, theta):
        """Full fine stiffness for parameter function values ``theta``."""
        A = theta[0] * self.A_q[0]
        for q in range(1, self.n_terms):
            A = A + theta[q] * self.A_q[q]
        return A

    def hat(self, z):
        """Fine nodal values of the coarse hat at node z (dense)."""
        return np.asarray(self.prolongation[:, int(z)].todense()).ravel()

    def patch_solver(self, element, k):
        """PatchSolver for the k-patch of a coarse element (LRU cached)."""
        key = (int(element), int(k))
        if key not in self._patch_cache:
            if len(self._patch_order) >= self.patch_cache_size:
                oldest = self._patch_order.pop(0)
                del self._patch_cache[oldest]
            self._patch_cache[key] = PatchSolver(
                self, element_patch(self.hier, element, k)
            )
            self._patch_order.append(key)
        else:
            self._patch_order.remove(key)
            self._patch_order.append(key)
        return self._patch_cache[key]


class ConstrainedFactor:
    """Factorization of one constrained (saddle) operator on a patch.

    Solves ``S w + C^T lam = r, C w = 0`` by a sparse LU of S and a dense
    Cholesky of the multiplier Schur complement ``C S^{-1} C^T``.
    """

    def __init__(self, S, C):
        try:
            self.lu = spla.splu(S.tocsc())
        except RuntimeError as exc:
            raise SingularMatrixError(
                f"patch stiffness factorization failed: {exc}",
                diagnostics={"shape": tuple(S.shape), "nnz": int(S.nnz)},
            ) from exc
        self.C = C
        self.n_constraints = C.shape[0]
        if self.n_constraints:
            self.X = self.lu.solve(np.asarray(C.T.todense()))
            schur = C @ self.X
            try:
                self.cho = scipy.linalg.cho_factor(schur)
            except scipy.linalg.LinAlgError as exc:
                raise SingularMatrixError(
                    f"constraint Schur complement not positive definite: {exc}",
                    diagnostics={"n_constraints": self.n_constraints},
                ) from exc

    def solve(self, rhs):
        """Solve for one rhs vector or a column block; returns w."""
        w, _ = self.solve_with_multipliers(rhs)
        return w

    def solve_with_multipliers(self, rhs):
        y = self.lu.solve(np.asarray(rhs, dtype=np.float64))
        if not self.n_constraints:
            return y, np.zeros((0,) + y.shape[1:])
        lam = scipy.linalg.cho_solve(self.cho, self.C @ y)
        return y - self.X @ lam, lam


class PatchSolver:
    """Corrector and Riesz solves on one element patch.

    Caches the patch index set, the sliced per-term stiffness blocks, the
    constraint rows, the element-local right-hand-side operators of the
    center element, and the Laplacian factorization used for all Riesz
    solves on this patch.
    """

    def __init__(self, ws, patch):
        if patch.fine_interior_nodes.size == 0:
            raise DegeneratePatchError(
                f"patch of element {patch.center_element} has no interior fine node"
            )
        if ws.hier.levels == 0:
            # Fine and coarse spaces coincide, so the interpolation kernel
            # is trivial and every corrector vanishes identically.
            raise DegeneratePatchError(
                "corrector space is trivial without mesh refinement"
            )
        self.ws = ws
        self.patch = patch
        self.idx = patch.fine_interior_nodes
        ix = np.ix_(self.idx, self.idx)
        self.S_q = [A[ix].tocsr() for A in ws.A_q]
        rows = [ws.coarse_row(z) for z in patch.coarse_interior_nodes]
        self.C = ws.interp[rows][:, self.idx].tocsr()
        self.L_pp = ws.laplacian[ix].tocsr()
        self._lap_factor = None
        self._rhs_ops = None
        self._center_vertices = None

    # -- right-hand sides -------------------------------------------------

    def center_rhs_operators(self):
        """Per-term stiffness of the center element, patch rows only."""
        if self._rhs_ops is None:
            K = self.patch.center_element
            if K is None:
                raise InvalidArgumentError("node-centered patch has no center element")
            els = self.ws.hier.coarse_to_fine_elements()[K]
            fine = self.ws.hier.fine
            ops = []
            for q in range(self.ws.n_terms):
                A_K = assemble_stiffness(fine, self.ws.fields[q][els], elements=els)
                ops.append(A_K[self.idx].tocsr())
            self._rhs_ops = ops
        return self._rhs_ops

    def interior_vertices(self):
        """Interior coarse vertices of the center element."""
        if self._center_vertices is None:
            verts = self.ws.hier.coarse.elements[self.patch.center_element]
            keep = [int(z) for z in verts if int(z) in self.ws._row_of_node]
            self._center_vertices = keep
        return self._center_vertices

    def hat_rhs(self, z):
        """(Q, m) array: per-term center-element load of the hat at z."""
        hat = self.ws.prolongation[:, int(z)]
        ops = self.center_rhs_operators()
        return np.stack([np.asarray((op @ hat).todense()).ravel() for op in ops])

    # -- factorizations ---------------------------------------------------

    def factor(self, theta):
        """ConstrainedFactor of the weighted patch stiffness."""
        S = theta[0] * self.S_q[0]
        for q in range(1, len(self.S_q)):
            S = S + theta[q] * self.S_q[q]
        return ConstrainedFactor(S, self.C)

    def laplacian_factor(self):
        """ConstrainedFactor of the patch Laplacian (cached)."""
        if self._lap_factor is None:
            self._lap_factor = ConstrainedFactor(self.L_pp, self.C)
        return self._lap_factor

    # -- solves -----------------------------------------------------------

    def corrector(self, z, theta, factor=None):
        """Patch-local corrector values for the hat at z and weights theta."""
        rhs = -np.einsum("q,qm->m", theta, self.hat_rhs(z))
        factor = self.factor(theta) if factor is None else factor
        return factor.solve(rhs)

    def embed(self, values):
        """Scatter patch-local values into a global fine vector."""
        out = np.zeros(self.ws.hier.fine.n_nodes)
        out[self.idx] = values
        return out


def solve_constrained(S, C, rhs):
    """Solve ``S w + C^T lam = rhs, C w = 0`` for caller-supplied matrices.

    Returns
    -------
    (w, lam)
    """
    S = sp.csc_matrix(S)
    C = sp.csr_matrix(C)
    if S.shape[0] != S.shape[1] or C.shape[1] != S.shape[0]:
        raise InvalidArgumentError(
            f"incompatible saddle system shapes {S.shape} and {C.shape}"
        )
    factor = ConstrainedFactor(S, C)
    return factor.solve_with_multipliers(np.asarray(rhs, dtype=np.float64))


def solve_corrector(ws, patch, z, mu):
    """Corrector of the hat at ``z`` on one element patch, globally embedded.

    The corrector lives in the interpolation kernel restricted to the
    patch and balances the center-element load of the hat function at
    parameter ``mu``.
    """
    if patch.fine_interior_nodes.size == 0:
        raise DegeneratePatchError(
            f"patch of element {patch.center_element} has no interior fine node"
        )
    solver = PatchSolver(ws, patch)
    theta = np.atleast_1d(ws.coeff.theta(mu))
    return solver.embed(solver.corrector(z, theta))


def assemble_ms_basis(ws, k, mu, theta=None, collect_stats=False):
    """Multiscale basis columns Phi_z + sum of element correctors.

    Loops element-major so each patch factorization serves the (up to
    three) interior vertices of its center element.  Patches without
    interior fine nodes contribute nothing (their correctors vanish),
    which makes the basis collapse to the coarse hats when H = h.

    Returns
    -------
    basis : csc matrix (fine nodes x interior coarse nodes)
    stats : dict (when collect_stats) with the worst constraint residual.
    """
    theta = np.atleast_1d(ws.coeff.theta(mu)) if theta is None else np.asarray(theta)
    hier = ws.hier
    n_int = ws.interior_coarse.size
    if hier.levels == 0:
        # Without refinement the corrector space is trivial and the
        # multiscale basis collapses to the coarse hats.
        basis = ws.prolongation[:, ws.interior_coarse].tocsc()
        if collect_stats:
            return basis, {"max_constraint_residual": 0.0}
        return basis
    cols = {row: [] for row in range(n_int)}
    worst_constraint = 0.0
    for K in range(hier.coarse.n_elements):
        patch = element_patch(hier, K, k)
        if patch.fine_interior_nodes.size == 0:
            continue
        solver = PatchSolver(ws, patch)
        if not solver.interior_vertices():
            continue
        factor = solver.factor(theta)
        for z in solver.interior_vertices():
            w = solver.corrector(z, theta, factor=factor)
            if collect_stats:
                worst_constraint = max(
                    worst_constraint, float(np.abs(solver.C @ w).max(initial=0.0))
                )
            cols[ws.coarse_row(z)].append((solver.idx, w))
    data, rows_ix, col_ptr = [], [], [0]
    for row in range(n_int):
        z = ws.interior_coarse[row]
        acc = ws.hat(z)
        for idx, w in cols[row]:
            acc[idx] += w
        nz = np.flatnonzero(acc)
        rows_ix.append(nz)
        data.append(acc[nz])
        col_ptr.append(col_ptr[-1] + nz.size)
    basis = sp.csc_matrix(
        (np.concatenate(data), np.concatenate(rows_ix), np.array(col_ptr)),
        shape=(hier.fine.n_nodes, n_int),
    )
    if collect_stats:
        return basis, {"max_constraint_residual": worst_constraint}
    return basis


def classical_lod_solve(ws, k, mu, basis=None):
    """Galerkin solve in the multiscale space at one parameter value.

    Returns
    -------
    dict with the coarse coefficients, the fine-grid representation, the
    basis, and diagnostics.
    """
    theta = np.atleast_1d(ws.coeff.theta(mu))
    if basis is None:
        basis = assemble_ms_basis(ws, k, mu, theta=theta)
    A = ws.stiffness(theta)
    S = (basis.T @ A @ basis).toarray()
    S = 0.5 * (S + S.T)
    b = basis.T @ ws.load
    coefs = scipy.linalg.cho_solve(scipy.linalg.cho_factor(S), b)
    u = basis @ coefs
    return {
        "coarse": coefs,
        "fine": u,
        "basis": basis,
        "system": S,
        "mu": mu,
    }
