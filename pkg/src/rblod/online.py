"""Online phase: reduced assembly and solves at arbitrary parameters.

All operations here run on the precomputed offline data alone.  A
parameter value (one scalar, or one value per interior coarse node)
selects reduced corrector coefficients through small dense Galerkin
solves; the global coarse system is then combined from stored reduced
blocks without touching the fine grid.  Fine-grid vectors appear only
when a caller explicitly asks for the fine representation of a reduced
solution or for errors against a fine reference.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import (
    IllConditionedBasisError,
    InconsistentDatabaseError,
    InvalidArgumentError,
)
from .fem import (
    assemble_load,
    fem_reference_solve,
    h1_seminorm,
    l2_norm,
    relative_error,
    solve_spd,
)

__all__ = [
    "OnlineBasis",
    "OnlineSolution",
    "clamp_parameters",
    "online_local_solve",
    "build_online_basis",
    "pair_blocks",
    "assemble_global",
    "assemble_global_load",
    "online_solve",
    "measure_errors",
]


# ── parameter handling ──────────────────────────────────────────────────


def clamp_parameters(db, mu, warn=True):
    """Clamp parameter values to the training range of the database.

    Parameters
    ----------
    db : OfflineDB
    mu : float or array
        Requested parameter value(s).
    warn : bool
        Emit a warning when any value had to be clamped.

    Returns
    -------
    (clamped, n_clamped) : (ndarray, int)
        Values moved to the nearest admissible point and how many were
        outside the range.
    """
    lower, upper = db.workspace.coeff.parameter_range
    values = np.asarray(mu, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise InvalidArgumentError("parameter values must be finite")
    clamped = np.clip(values, lower, upper)
    n_clamped = int(np.count_nonzero(clamped != values))
    if n_clamped and warn:
        warnings.warn(
            f"{n_clamped} parameter value(s) outside [{lower}, {upper}] "
            "were clamped to the range boundary",
            stacklevel=2,
        )
    return clamped, n_clamped


def _node_parameters(db, mu):
    """Broadcast a scalar or per-node parameter assignment to (N,)."""
    n_nodes = db.node_ids.size
    values = np.asarray(mu, dtype=np.float64)
    if values.ndim == 0:
        return np.full(n_nodes, float(values))
    if values.shape != (n_nodes,):
        raise InvalidArgumentError(
            f"parameter assignment has shape {values.shape}, "
            f"expected a scalar or ({n_nodes},)"
        )
    return values.copy()


# ── local reduced solves ────────────────────────────────────────────────


def _node_system_blocks(space):
    """Per-term node system blocks: per-patch stiffness and load sums.

    Summing the per-patch blocks (instead of pairing summed snapshot
    gradients over the whole region) keeps the system consistent with
    the per-patch corrector equations; the coefficient vector of a
    training snapshot then solves the system exactly, so snapshots are
    reproduced to rounding and the residual estimator applies verbatim
    to the online coefficients.  Cached on the space after first use.
    """
    cached = getattr(space, "_node_blocks", None)
    if cached is None:
        if not space.D_K or not space.g_K:
            raise InconsistentDatabaseError(
                f"node {space.z} has no precomputed reduced system"
            )
        cached = (
            np.sum(np.stack(space.D_K, axis=0), axis=0),
            np.sum(np.stack(space.g_K, axis=0), axis=0),
        )
        space._node_blocks = cached
    return cached


def _local_coefficients(db, space, thetas):
    """Solve the reduced node system for one set of parameter weights."""
    D_blocks, F_blocks = _node_system_blocks(space)
    D = np.einsum("q,qij->ij", thetas, D_blocks)
    rhs = -(thetas @ F_blocks)
    try:
        coeffs = np.linalg.solve(D, rhs)
    except np.linalg.LinAlgError as exc:
        raise IllConditionedBasisError(
            f"reduced system at node {space.z} is singular: {exc}"
        ) from exc
    if not np.all(np.isfinite(coeffs)):
        raise IllConditionedBasisError(
            f"reduced solve at node {space.z} produced non-finite values"
        )
    return coeffs


def online_local_solve(db, z, mu):
    """Reduced corrector-sum coefficients at one node and parameter.

    Combines the precomputed per-term node blocks with the parameter
    weights and solves one dense J x J system; values outside the
    parameter range are clamped first (with a warning).  No quadrature
    and no saddle-point solver are involved.

    Returns
    -------
    (J,) float64
        Coefficients of the node basis; the reduced corrector sum is
        ``coeffs @ space.basis`` on the patch-union region.
    """
    space = db.space(z)
    t0 = time.perf_counter()
    mu_c, _ = clamp_parameters(db, mu)
    coeffs = _local_coefficients(db, space, db.thetas(float(mu_c)))
    timings = db.timings
    timings["online_local_seconds"] = (
        timings.get("online_local_seconds", 0.0) + time.perf_counter() - t0
    )
    timings["online_local_count"] = timings.get("online_local_count", 0) + 1
    return coeffs


# ── the online basis and its global couplings ───────────────────────────


@dataclass(eq=False)
class OnlineBasis:
    """Reduced multiscale basis evaluated at one parameter assignment.

    Each interior coarse node carries the coefficients of its reduced
    corrector sum; the basis function of node ``z`` is the coarse hat
    plus that corrector sum.  Fine-grid and block representations are
    cached on first use.
    """

    db: object
    mu_raw: np.ndarray
    mu_nodes: np.ndarray
    coeffs: list
    n_clamped: int = 0

    def __post_init__(self):
        self._fine = None
        self._coefficient_matrix = None

    @property
    def n_nodes(self):
        return self.db.node_ids.size

    def coefficient_matrix(self):
        """Sparse (total_dim, N) block matrix of per-node coefficients."""
        if self._coefficient_matrix is None:
            db = self.db
            rows = np.concatenate(
                [
                    np.arange(off, off + c.size)
                    for off, c in zip(db.offsets, self.coeffs)
                ]
            )
            cols = np.repeat(np.arange(self.n_nodes), db.dims)
            data = np.concatenate(self.coeffs)
            self._coefficient_matrix = sp.csc_matrix(
                (data, (rows, cols)), shape=(int(db.dims.sum()), self.n_nodes)
            )
        return self._coefficient_matrix

    def fine_matrix(self):
        """Sparse fine-grid representation (n_fine, N) of the basis."""
        if self._fine is None:
            db = self.db
            ws = db.workspace
            hats = ws.prolongation[:, db.node_ids].tocsc()
            rows, cols, data = [], [], []
            for n, z in enumerate(db.node_ids):
                space = db.space(z)
                values = self.coeffs[n] @ space.basis
                rows.append(space.region_idx)
                cols.append(np.full(space.region_idx.size, n))
                data.append(values)
            correctors = sp.csc_matrix(
                (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                shape=hats.shape,
            )
            self._fine = (hats + correctors).tocsc()
        return self._fine

    def node_fine_vector(self, z):
        """Dense fine-grid values of the reduced basis function at node z."""
        db = self.db
        n = int(np.searchsorted(db.node_ids, z))
        if n >= db.node_ids.size or db.node_ids[n] != z:
            raise InvalidArgumentError(f"node {z} is not an interior coarse node")
        return np.asarray(self.fine_matrix()[:, n].todense()).ravel()


def build_online_basis(db, mu):
    """Solve all node systems for one scalar or per-node parameter.

    Parameters outside the training range are clamped (one warning with
    the total count); the returned basis records both the requested and
    the clamped values.
    """
    if db.dims is None or db.offsets is None:
        raise InconsistentDatabaseError("database is missing global block data")
    t0 = time.perf_counter()
    mu_raw = _node_parameters(db, mu)
    mu_nodes, n_clamped = clamp_parameters(db, mu_raw)
    thetas = np.atleast_2d(db.workspace.coeff.theta(mu_nodes))  # (Q, N)
    coeffs = [
        _local_coefficients(db, db.space(z), thetas[:, n])
        for n, z in enumerate(db.node_ids)
    ]
    timings = db.timings
    timings["online_local_seconds"] = (
        timings.get("online_local_seconds", 0.0) + time.perf_counter() - t0
    )
    timings["online_local_count"] = timings.get("online_local_count", 0) + len(coeffs)
    return OnlineBasis(
        db=db,
        mu_raw=mu_raw,
        mu_nodes=mu_nodes,
        coeffs=coeffs,
        n_clamped=n_clamped,
    )


def pair_blocks(db, basis):
    """Dense per-term coupling blocks of the online basis.

    ``blocks[q][y, z]`` is the q-th component stiffness pairing of the
    reduced basis functions at nodes y and z, combined from the stored
    hat/hat, hat/snapshot, and snapshot/snapshot blocks.  Each block is
    exactly symmetric.
    """
    if db.S_hat is None:
        raise InconsistentDatabaseError("database is missing global block data")
    Cd = basis.coefficient_matrix().toarray()
    blocks = []
    for q in range(db.n_terms):
        RC = db.R_mix[q] @ Cd
        E = db.S_hat[q] + RC + RC.T + Cd.T @ (db.G_snap[q] @ Cd)
        blocks.append(0.5 * (E + E.T))
    return blocks


def assemble_global(db, mu, basis=None):
    """Reduced global stiffness at one parameter assignment (sparse).

    For a scalar parameter this is the symmetric Galerkin matrix of the
    reduced multiscale space.  For a per-node assignment the parameter
    functions are frozen per column node, which makes the matrix the
    column-weighted combination used by inexact nonlinear iterations
    (generally nonsymmetric).
    """
    if basis is None:
        basis = build_online_basis(db, mu)
    blocks = pair_blocks(db, basis)
    values = np.asarray(mu, dtype=np.float64)
    if values.ndim == 0:
        thetas = db.thetas(float(np.clip(values, *db.workspace.coeff.parameter_range)))
        S = sum(thetas[q] * blocks[q] for q in range(db.n_terms))
    else:
        thetas = np.atleast_2d(db.workspace.coeff.theta(basis.mu_nodes))
        S = sum(blocks[q] * thetas[q][None, :] for q in range(db.n_terms))
    return sp.csr_matrix(S)


def assemble_global_load(db, basis, f=None):
    """Reduced load vector against the online basis.

    With ``f=None`` the stored source loads are combined without fine
    work; a callable source is integrated on the fine grid and paired
    with the fine representation of the basis.
    """
    if f is None:
        if db.load_hat is None or db.load_snap is None:
            raise InconsistentDatabaseError("database is missing load blocks")
        F = db.load_hat.copy()
        for n, (off, c) in enumerate(zip(db.offsets, basis.coeffs)):
            F[n] += c @ db.load_snap[off : off + c.size]
        return F
    vec = assemble_load(db.workspace.hier.fine, f)
    return basis.fine_matrix().T @ vec


def online_solve(db, mu, f=None):
    """Galerkin solve in the reduced multiscale space at one parameter.

    Returns
    -------
    OnlineSolution
        Coarse coefficients plus the basis used; fine representations
        are available on demand.
    """
    basis = build_online_basis(db, mu)
    t0 = time.perf_counter()
    S = assemble_global(db, mu, basis=basis)
    F = assemble_global_load(db, basis, f=f)
    u = solve_spd(S, F)
    timings = db.timings
    timings["online_global_seconds"] = (
        timings.get("online_global_seconds", 0.0) + time.perf_counter() - t0
    )
    timings["online_global_count"] = timings.get("online_global_count", 0) + 1
    return OnlineSolution(basis=basis, coarse=u)


@dataclass(eq=False)
class OnlineSolution:
    """Reduced solution: coarse coefficients over the online basis.

    The coarse part (the same coefficients on the plain coarse hats) and
    the full fine-grid representation are both derived views; the
    corrector content of the basis lies in the interpolation kernel, so
    both share one quasi-interpolant.
    """

    basis: OnlineBasis
    coarse: np.ndarray

    def fine_vector(self):
        """Fine-grid values of the reduced solution."""
        return self.basis.fine_matrix() @ self.coarse

    def coarse_fine_vector(self):
        """Fine-grid values of the coarse part (hats with the same coefficients)."""
        db = self.basis.db
        return db.workspace.prolongation[:, db.node_ids] @ self.coarse


def measure_errors(db, solution, mu=None, reference=None):
    """Relative errors of a reduced solution against a fine reference.

    The reference is recomputed on the fine grid unless supplied; for
    the default source this is the standard fine Galerkin solution at
    the scalar parameter ``mu`` (taken from the solution's basis when
    all nodes share one value).

    Returns
    -------
    dict with relative ``coarse_l2``, ``l2``, ``h1`` errors (reference
    norms in ``*_norm`` keys) and the reference vector itself.
    """
    ws = db.workspace
    fine = ws.hier.fine
    if reference is None:
        if mu is None:
            values = np.unique(solution.basis.mu_raw)
            if values.size != 1:
                raise InvalidArgumentError(
                    "a fine reference (or a scalar parameter) is required "
                    "for node-varying parameter assignments"
                )
            mu = float(values[0])
        field = ws.coeff.evaluate(ws.barycenters, mu)
        reference = fem_reference_solve(fine, field, ws.coeff.source)
    reference = np.asarray(reference, dtype=np.float64)
    u_fine = solution.fine_vector()
    u_coarse = solution.coarse_fine_vector()
    l2_ref = l2_norm(fine, reference)
    h1_ref = h1_seminorm(fine, reference)
    return {
        "coarse_l2": relative_error(l2_norm(fine, u_coarse - reference), l2_ref),
        "l2": relative_error(l2_norm(fine, u_fine - reference), l2_ref),
        "h1": relative_error(h1_seminorm(fine, u_fine - reference), h1_ref),
        "l2_norm": l2_ref,
        "h1_norm": h1_ref,
        "reference": reference,
    }
