"""Offline phase: greedy construction of localized reduced corrector bases.

For every interior coarse node z, correctors of the hat function at z are
collected at greedily selected parameter values.  The summed snapshots
are orthonormalized at node level (one shared transform, applied
consistently to the per-element pieces), Riesz representatives of the
per-element residual functionals are precomputed, and everything needed
by the online phase — reduced stiffness blocks, estimator Gram matrices,
and global coupling matrices — is assembled into an offline database.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .coeffs import coercivity_lower_bound, get_problem
from .errors import (
    IllConditionedBasisError,
    InconsistentDatabaseError,
    InvalidArgumentError,
)
from .fem import h1_seminorm
from .grid import (
    build_unit_square_mesh,
    node_patch_union,
    node_support,
    refine_uniform,
)
from .lod import FineWorkspace

__all__ = [
    "TrainingSet",
    "LocalRBSpace",
    "OfflineDB",
    "splitmix64",
    "generate_training_set",
    "build_workspace",
    "initialize_rb",
    "compute_riesz_l",
    "compute_riesz_h",
    "rb_local_solve_perK",
    "residual_estimator",
    "node_coercivity",
    "greedy_node",
    "precompute_local",
    "precompute_global",
    "build_offline_db",
]

MASK64 = (1 << 64) - 1
GENERATOR_ID = "splitmix64"
REJECTION_FACTOR = 1e-10
DEFAULT_J_MAX = 50


def splitmix64(seed):
    """Infinite stream of 64-bit integers from the splitmix64 recurrence."""
    state = int(seed) & MASK64
    while True:
        state = (state + 0x9E3779B97F4A7C15) & MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        yield z ^ (z >> 31)


@dataclass(eq=False)
class TrainingSet:
    """Deterministic uniform parameter sample of the parameter interval."""

    parameters: np.ndarray
    seed: int
    generator_id: str = GENERATOR_ID

    def __len__(self):
        return self.parameters.size

    def __array__(self, dtype=None):
        return np.asarray(self.parameters, dtype=dtype)


def generate_training_set(parameter_range, size, seed):
    """``size`` uniform draws in [lower, upper), bit-exact across platforms.

    Each draw takes the top 53 bits of one splitmix64 output as the
    mantissa of a uniform in [0, 1).
    """
    size = int(size)
    if size < 1:
        raise InvalidArgumentError(f"training set size must be >= 1, got {size}")
    lower, upper = float(parameter_range[0]), float(parameter_range[1])
    stream = splitmix64(seed)
    u = np.array([(next(stream) >> 11) * 2.0**-53 for _ in range(size)])
    return TrainingSet(lower + (upper - lower) * u, int(seed))


@dataclass(eq=False)
class LocalRBSpace:
    """Greedy state and reduced data of one interior coarse node.

    The node-level basis rows are orthonormal in the Laplacian inner
    product over the union region; each per-element piece array holds the
    same linear combinations applied to that element's patch correctors,
    so the pieces of one basis function sum to the basis function.
    """

    z: int
    support: np.ndarray            # coarse elements K of omega_z
    region_idx: np.ndarray         # fine interior nodes of the union region
    piece_idx: list                # per K: patch fine interior nodes
    piece_pos: list                # per K: positions of piece_idx in region_idx
    normalizer: float              # H1 seminorm of the hat on omega_z
    c_z: int
    region_elements: np.ndarray | None = None  # fine elements of the region
    selected: list = field(default_factory=list)
    basis: np.ndarray | None = None        # (J, m_region)
    pieces: list = field(default_factory=list)      # per K: (J, m_K)
    l_pieces: list = field(default_factory=list)    # per K: (Q, m_K)
    h_pieces: list = field(default_factory=list)    # per K: (J, Q, m_K)
    D_K: list = field(default_factory=list)         # per K: (Q, J, J)
    g_K: list = field(default_factory=list)         # per K: (Q, J)
    riesz_E: list = field(default_factory=list)     # per K: (T, m_K) o.n. rows
    riesz_factor: list = field(default_factory=list)  # per K: (T, P)
    D_z: np.ndarray | None = None  # (Q, J, J) node-level reduced stiffness
    F_z: np.ndarray | None = None  # (Q, J) node-level reduced hat load
    history: list = field(default_factory=list)     # (mu added, max rel estimate)
    rejected: list = field(default_factory=list)
    converged: bool = False
    final_estimate: float = np.nan
    gram_deviation: float = 0.0
    max_constraint_residual: float = 0.0
    lstsq_fallbacks: int = 0

    @property
    def dim(self):
        return len(self.selected)


@dataclass(eq=False)
class OfflineDB:
    """Everything the online phase needs, plus greedy diagnostics."""

    problem: str
    n_coarse: int
    levels: int
    k: int
    tol: float
    seed: int
    train_size: int
    j_max: int
    training_set: TrainingSet
    alpha_train: float
    alpha_per_mu: np.ndarray
    mu1: float | None = None
    workspace: FineWorkspace | None = None
    spaces: dict = field(default_factory=dict)
    node_ids: np.ndarray | None = None   # interior coarse nodes, db row order
    # global precomputed blocks (set by precompute_global)
    dims: np.ndarray | None = None       # (N,) per-node J
    offsets: np.ndarray | None = None    # (N+1,) prefix sums of dims
    S_hat: np.ndarray | None = None      # (Q, N, N) hat-hat entries
    R_mix: np.ndarray | None = None      # (Q, N, sumJ) snapshot-hat entries
    G_snap: np.ndarray | None = None     # (Q, sumJ, sumJ) snapshot-snapshot
    load_hat: np.ndarray | None = None   # (N,)
    load_snap: np.ndarray | None = None  # (sumJ,)
    timings: dict = field(default_factory=dict)

    @property
    def n_terms(self):
        return self.workspace.n_terms

    def space(self, z):
        try:
            return self.spaces[int(z)]
        except KeyError:
            raise InvalidArgumentError(
                f"node {z} has no local reduced space"
            ) from None

    def thetas(self, mu):
        if mu is None:
            raise InvalidArgumentError("a parameter value is required")
        return np.atleast_1d(self.workspace.coeff.theta(mu))


def build_workspace(problem, n_coarse, levels):
    """Fine-grid workspace for a problem name and mesh parameters."""
    coeff = get_problem(problem) if isinstance(problem, str) else problem
    hier = refine_uniform(build_unit_square_mesh(int(n_coarse)), int(levels))
    return FineWorkspace(hier, coeff)


def _empty_db(problem, n_coarse, levels, k, tol, seed, train_size, j_max):
    ws = build_workspace(problem, n_coarse, levels)
    training = generate_training_set(
        ws.coeff.parameter_range, train_size, seed
    )
    thetas = ws.coeff.theta(training.parameters)
    alpha, per_mu = coercivity_lower_bound(
        ws.fields,
        thetas,
        points=ws.barycenters,
        mus=training.parameters,
        per_sample=True,
    )
    name = problem if isinstance(problem, str) else problem.name
    return OfflineDB(
        problem=name,
        n_coarse=int(n_coarse),
        levels=int(levels),
        k=int(k),
        tol=float(tol),
        seed=int(seed),
        train_size=int(train_size),
        j_max=int(j_max),
        training_set=training,
        alpha_train=float(alpha),
        alpha_per_mu=per_mu,
        workspace=ws,
        node_ids=ws.interior_coarse.copy(),
    )


# ── node-level setup and shared transforms ──────────────────────────────


def _node_shell(ws, z, k):
    """LocalRBSpace skeleton: region, support order, embeddings, scales."""
    hier = ws.hier
    region = node_patch_union(hier, int(z), k)
    ridx = region.fine_interior_nodes
    coarse = hier.coarse
    support = node_support(coarse, int(z))
    piece_idx, piece_pos = [], []
    for K in support:
        patch = ws.patch_solver(int(K), k).patch
        piece_idx.append(patch.fine_interior_nodes)
        piece_pos.append(np.searchsorted(ridx, patch.fine_interior_nodes))
    hat = np.zeros(coarse.n_nodes)
    hat[int(z)] = 1.0
    normalizer = h1_seminorm(coarse, hat, elements=support)
    return LocalRBSpace(
        z=int(z),
        support=support,
        region_idx=ridx,
        piece_idx=piece_idx,
        piece_pos=piece_pos,
        normalizer=normalizer,
        c_z=int(support.size),
        region_elements=region.fine_elements,
    )


def _region_laplacian(ws, space):
    ix = np.ix_(space.region_idx, space.region_idx)
    return ws.laplacian[ix].tocsr()


def node_coercivity(db, z, thetas):
    """Patch-local coercivity lower bound at one or many parameters.

    The estimator's error chain only tests functions supported on the
    node's union region, so the sharp constant is the smallest
    eigenvalue of the combined coefficient over that region at the
    evaluation parameter — not the global worst case over the whole
    domain and parameter range, which for strongly parameter-scaled
    coefficients would inflate every estimate by orders of magnitude.

    Returns
    -------
    float for a (Q,) theta vector, (S,) array for (Q, S).
    """
    ws = db.workspace
    space = db.space(z)
    if space.region_elements is None:
        space.region_elements = node_patch_union(
            ws.hier, space.z, db.k
        ).fine_elements
    fields = ws.fields[:, space.region_elements]
    thetas = np.asarray(thetas, dtype=np.float64)
    if thetas.ndim == 1:
        return coercivity_lower_bound(fields, thetas)
    return coercivity_lower_bound(fields, thetas, per_sample=True)[1]


def _track_constraint(space, solver, w):
    r = float(np.abs(solver.C @ w).max(initial=0.0))
    if r > space.max_constraint_residual:
        space.max_constraint_residual = r


def _append_direction(space, mu, piece_vectors, L_rr):
    """Node-level Gram-Schmidt step shared by init and greedy rounds.

    Returns False when the summed snapshot is (numerically) dependent and
    the candidate must be rejected.
    """
    s_new = np.zeros(space.region_idx.size)
    for pos, w in zip(space.piece_pos, piece_vectors):
        s_new[pos] += w
    norm_orig = float(np.sqrt(max(s_new @ (L_rr @ s_new), 0.0)))
    if space.basis is None:
        coefs = np.zeros(0)
        b = s_new
    else:
        coefs = space.basis @ (L_rr @ s_new)
        b = s_new - coefs @ space.basis
    norm_b = float(np.sqrt(max(b @ (L_rr @ b), 0.0)))
    if norm_b <= REJECTION_FACTOR * norm_orig:
        return False
    xi = b / norm_b
    space.basis = (
        xi[None, :] if space.basis is None else np.vstack([space.basis, xi])
    )
    for i, w in enumerate(piece_vectors):
        piece = (
            w if coefs.size == 0 else w - coefs @ space.pieces[i]
        ) / norm_b
        if coefs.size == 0:
            space.pieces.append(piece[None, :])
        else:
            space.pieces[i] = np.vstack([space.pieces[i], piece])
    space.selected.append(float(mu))
    gram = space.basis @ (L_rr @ space.basis.T)
    space.gram_deviation = max(
        space.gram_deviation,
        float(np.abs(gram - np.eye(space.dim)).max()),
    )
    return True


def _solve_new_h_pieces(db, space):
    """Riesz h-pieces of the newest orthonormal direction, every element.

    Returns the per-element (Q, m_K) blocks that were appended.
    """
    ws = db.workspace
    j = space.dim - 1
    blocks = []
    for i, K in enumerate(space.support):
        solver = ws.patch_solver(int(K), db.k)
        xi = space.pieces[i][j]
        rhs = np.stack([Sq @ xi for Sq in solver.S_q], axis=1)  # (m, Q)
        h = solver.laplacian_factor().solve(rhs)
        _track_constraint(space, solver, h)
        if space.dim == 1:
            space.h_pieces.append(h.T[None, :, :])
        else:
            space.h_pieces[i] = np.concatenate(
                [space.h_pieces[i], h.T[None, :, :]], axis=0
            )
        blocks.append(h.T)
    return blocks


def _piece_stack(space, i):
    """Riesz pieces of one element: the l-block, then one block per j."""
    return np.concatenate(
        [space.l_pieces[i]]
        + [space.h_pieces[i][j] for j in range(space.dim)],
        axis=0,
    )


def _orthonormal_extend(E, L, new_pieces):
    """Append the L-orthonormalized directions of new rows to system E."""
    if E is None:
        E = np.empty((0, new_pieces.shape[1]))
    for p in range(new_pieces.shape[0]):
        v = new_pieces[p].copy()
        base = float(np.sqrt(max(v @ (L @ v), 0.0)))
        if base == 0.0:
            continue
        for _ in range(2):  # reorthogonalization: twice is enough
            if E.shape[0]:
                v = v - (E @ (L @ v)) @ E
        nrm = float(np.sqrt(max(v @ (L @ v), 0.0)))
        if nrm > 1e-13 * base:
            E = np.vstack([E, v / nrm])
    return E


def _extend_riesz(space, i, solver, new_pieces):
    """Fold new Riesz pieces into element i's stable residual factor.

    Per element an L-orthonormal row system E spans the Riesz pieces and
    the factor W holds their expansion coefficients, so the gradient norm
    of any piece combination is the plain 2-norm of W times the
    coefficient vector.  Combining at amplitude level before squaring
    keeps near-zero residuals accurate, which a Gram quadratic form
    cannot (its cancellation floor is the square root of machine
    precision).
    """
    L = solver.L_pp
    have = i < len(space.riesz_E)
    E = _orthonormal_extend(space.riesz_E[i] if have else None, L, new_pieces)
    W = E @ (L @ _piece_stack(space, i).T)
    if have:
        space.riesz_E[i] = E
        space.riesz_factor[i] = W
    else:
        space.riesz_E.append(E)
        space.riesz_factor.append(W)


def _refresh_stiffness(db, space):
    """Per-element reduced stiffness blocks and hat loads."""
    ws = db.workspace
    Q = ws.n_terms
    space.D_K, space.g_K = [], []
    for i, K in enumerate(space.support):
        solver = ws.patch_solver(int(K), db.k)
        X = space.pieces[i]  # (J, m)
        J = X.shape[0]
        D = np.empty((Q, J, J))
        for q in range(Q):
            Dq = X @ (solver.S_q[q] @ X.T)
            D[q] = 0.5 * (Dq + Dq.T)
        space.D_K.append(D)
        space.g_K.append(solver.hat_rhs(space.z) @ X.T)


def _drop_last_direction(db, space):
    """Remove the newest direction and restore consistent derived data.

    The per-element orthonormal systems ``riesz_E`` may keep spanning a
    superset of the remaining pieces — the stable factor is recomputed
    from the truncated piece stack, so every norm it produces is still
    exact.
    """
    space.selected.pop()
    space.basis = space.basis[:-1]
    for i, K in enumerate(space.support):
        space.pieces[i] = space.pieces[i][:-1]
        space.h_pieces[i] = space.h_pieces[i][:-1]
        solver = db.workspace.patch_solver(int(K), db.k)
        space.riesz_factor[i] = space.riesz_E[i] @ (
            solver.L_pp @ _piece_stack(space, i).T
        )
    _refresh_stiffness(db, space)


# ── public offline operations ───────────────────────────────────────────


def initialize_rb(db, mu1=None):
    """Install the one-snapshot spaces at the starting parameter.

    Walks the coarse elements so each patch factorization serves all of
    its interior vertices, then builds the node-level data.
    """
    if db.spaces:
        raise InvalidArgumentError("database already initialized")
    ws = db.workspace
    mu1 = float(db.training_set.parameters[0] if mu1 is None else mu1)
    db.mu1 = mu1
    theta1 = db.thetas(mu1)
    t0 = time.perf_counter()
    stash = {int(z): {} for z in ws.interior_coarse}
    for K in range(ws.hier.coarse.n_elements):
        solver = ws.patch_solver(K, db.k)
        verts = solver.interior_vertices()
        if not verts:
            continue
        factor = solver.factor(theta1)
        for z in verts:
            w = solver.corrector(z, theta1, factor=factor)
            stash[z][K] = w
    for z in ws.interior_coarse:
        space = _node_shell(ws, int(z), db.k)
        L_rr = _region_laplacian(ws, space)
        vectors = [stash[int(z)][int(K)] for K in space.support]
        for i, K in enumerate(space.support):
            _track_constraint(space, ws.patch_solver(int(K), db.k), vectors[i])
        if not _append_direction(space, mu1, vectors, L_rr):
            raise IllConditionedBasisError(
                f"initial snapshot at node {z} is numerically zero"
            )
        for i, K in enumerate(space.support):
            solver = ws.patch_solver(int(K), db.k)
            l = solver.laplacian_factor().solve(solver.hat_rhs(int(z)).T)
            _track_constraint(space, solver, l)
            space.l_pieces.append(l.T)
        new_h = _solve_new_h_pieces(db, space)
        for i, K in enumerate(space.support):
            solver = ws.patch_solver(int(K), db.k)
            _extend_riesz(
                space, i, solver,
                np.concatenate([space.l_pieces[i], new_h[i]], axis=0),
            )
        _refresh_stiffness(db, space)
        db.spaces[int(z)] = space
    db.timings["offline_local_seconds"] = db.timings.get(
        "offline_local_seconds", 0.0
    ) + (time.perf_counter() - t0)


def compute_riesz_l(db, z, K):
    """Riesz representatives of the hat load of element K, all terms.

    Returns the (Q, m_K) array; also the stored copy is refreshed.
    """
    space = db.space(z)
    ws = db.workspace
    i = int(np.searchsorted(space.support, int(K)))
    if i >= space.support.size or space.support[i] != int(K):
        raise InvalidArgumentError(f"element {K} not in the support of node {z}")
    solver = ws.patch_solver(int(K), db.k)
    l = solver.laplacian_factor().solve(solver.hat_rhs(int(z)).T).T
    _track_constraint(space, solver, l.T)
    space.l_pieces[i] = l
    if i < len(space.riesz_E):
        space.riesz_factor[i] = space.riesz_E[i] @ (
            solver.L_pp @ _piece_stack(space, i).T
        )
    return l


def compute_riesz_h(db, z, K, j):
    """Riesz representatives of the patch action of basis function j on K."""
    space = db.space(z)
    ws = db.workspace
    i = int(np.searchsorted(space.support, int(K)))
    if i >= space.support.size or space.support[i] != int(K):
        raise InvalidArgumentError(f"element {K} not in the support of node {z}")
    if j >= space.dim:
        raise InconsistentDatabaseError(
            f"no snapshot {j} at node {z} (dimension {space.dim})"
        )
    if not space.pieces:
        raise InconsistentDatabaseError(
            f"per-element snapshot pieces of node {z} were not retained"
        )
    solver = ws.patch_solver(int(K), db.k)
    xi = space.pieces[i][j]
    rhs = np.stack([Sq @ xi for Sq in solver.S_q], axis=1)
    h = solver.laplacian_factor().solve(rhs).T
    _track_constraint(space, solver, h.T)
    space.h_pieces[i][j] = h
    if i < len(space.riesz_E):
        space.riesz_factor[i] = space.riesz_E[i] @ (
            solver.L_pp @ _piece_stack(space, i).T
        )
    return h


def _batched_rb_solve(space, i, thetas):
    """Per-element reduced Galerkin solves for a batch of parameters.

    thetas is (Q, S); returns (S, J) coefficients.  Singular reduced
    matrices (possible: the node-level transform need not be independent
    on a single patch) fall back to least squares, which selects the same
    corrector function because the right-hand side lies in the range.
    """
    D = space.D_K[i]
    g = space.g_K[i]
    G = np.einsum("qs,qij->sij", thetas, D)
    rhs = -np.einsum("qs,qj->sj", thetas, g)
    try:
        c = np.linalg.solve(G, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        c = np.empty_like(rhs)
        for s in range(rhs.shape[0]):
            c[s] = scipy.linalg.lstsq(G[s], rhs[s])[0]
            space.lstsq_fallbacks += 1
    if not np.all(np.isfinite(c)):
        raise IllConditionedBasisError(
            f"non-finite reduced solution at node {space.z}"
        )
    return c


def rb_local_solve_perK(db, z, K, mu=None, thetas=None):
    """Coefficients of the reduced corrector of element K at one parameter."""
    space = db.space(z)
    if space.dim == 0:
        raise InvalidArgumentError(f"empty local space at node {z}")
    i = int(np.searchsorted(space.support, int(K)))
    if i >= space.support.size or space.support[i] != int(K):
        raise InvalidArgumentError(f"element {K} not in the support of node {z}")
    if thetas is None:
        thetas = db.thetas(mu)
    thetas = np.asarray(thetas, dtype=np.float64)
    single = thetas.ndim == 1
    if single:
        thetas = thetas[:, None]
    c = _batched_rb_solve(space, i, thetas)
    return c[0] if single else c


def _estimator_norms(space, i, thetas, coeffs):
    """Per-element residual gradient norms: (S,) given (Q,S) and (S,J)."""
    Q, S = thetas.shape
    J = space.dim
    V = np.empty((S, Q * (1 + J)))
    V[:, :Q] = thetas.T
    V[:, Q:] = np.einsum("sj,qs->sjq", coeffs, thetas).reshape(S, J * Q)
    T = space.riesz_factor[i] @ V.T  # (T, S)
    return np.sqrt(np.einsum("ts,ts->s", T, T))


def residual_estimator(db, z, mu, coeffs=None):
    """Residual error indicator of the node at one parameter.

    The indicator sums the dual norms of the per-element corrector
    residuals and scales them by sqrt(c_z) over the patch-local
    coercivity constant at the evaluation parameter.

    Parameters
    ----------
    coeffs : sequence of per-element coefficient vectors, optional
        Reduced corrector coefficients per support element (computed via
        rb_local_solve_perK when omitted).

    Returns
    -------
    (absolute, relative) : the indicator and its value divided by the
    hat's H1 seminorm over the node support.
    """
    space = db.space(z)
    thetas = db.thetas(mu)[:, None]
    if coeffs is None:
        coeffs = [
            rb_local_solve_perK(db, z, int(K), mu=mu) for K in space.support
        ]
    if len(coeffs) != space.support.size:
        raise InconsistentDatabaseError(
            f"expected {space.support.size} coefficient vectors at node {z}, "
            f"got {len(coeffs)}"
        )
    if len(space.riesz_factor) != space.support.size:
        raise InconsistentDatabaseError(f"missing Riesz data at node {z}")
    total = 0.0
    for i in range(space.support.size):
        c = np.asarray(coeffs[i], dtype=np.float64)[None, :]
        total += float(_estimator_norms(space, i, thetas, c)[0])
    alpha_z = node_coercivity(db, z, thetas[:, 0])
    absolute = np.sqrt(space.c_z) / alpha_z * total
    return absolute, absolute / space.normalizer


def greedy_node(db, z, training_set=None, tol=None, j_max=None):
    """Greedy extension of one node's space until the estimate meets TOL.

    Each round solves the per-element reduced problems for every unused
    training parameter, evaluates the estimator, adds the argmax
    parameter (ties: lowest training index), solves the exact correctors
    there, orthonormalizes, and extends the Riesz data.  Enrichment also
    stops — with a warning and ``converged=False`` — once it saturates
    numerically: when the worst estimate stops strictly decreasing (the
    offending extension is rolled back) or the worst parameter's
    snapshot is linearly dependent on the basis.
    """
    ws = db.workspace
    space = db.space(z)
    train = np.asarray(
        db.training_set if training_set is None else training_set,
        dtype=np.float64,
    )
    tol = db.tol if tol is None else float(tol)
    j_max = db.j_max if j_max is None else int(j_max)
    thetas_all = ws.coeff.theta(train)
    available = np.ones(train.size, dtype=bool)
    for mu in space.selected + space.rejected:
        available &= train != mu
    L_rr = _region_laplacian(ws, space)
    t0 = time.perf_counter()
    alpha_z = node_coercivity(db, space.z, thetas_all)
    prefactor = np.sqrt(space.c_z) / alpha_z
    prev_est = space.history[-1][1] if space.history else np.inf
    while True:
        cand = np.flatnonzero(available)
        if cand.size == 0:
            space.converged = False
            warnings.warn(
                f"node {space.z}: training set exhausted above tolerance",
                stacklevel=2,
            )
            break
        thetas = thetas_all[:, cand]
        sums = np.zeros(cand.size)
        coeffs = []
        for i in range(space.support.size):
            c = _batched_rb_solve(space, i, thetas)
            coeffs.append(c)
            sums += _estimator_norms(space, i, thetas, c)
        rel = prefactor[cand] * sums / space.normalizer
        star = int(np.argmax(rel))
        max_est = float(rel[star])
        if max_est <= tol:
            space.converged = True
            space.final_estimate = max_est
            break
        if max_est >= prev_est:
            # the sup estimate stopped decreasing: the last extension is
            # numerically saturated (near-dependent snapshots amplify
            # round-off through the per-element solves), so enrichment
            # can never certify the tolerance — undo it and stop while
            # the stored data is still clean
            _drop_last_direction(db, space)
            space.history.pop()
            space.converged = False
            space.final_estimate = prev_est
            warnings.warn(
                f"node {space.z}: estimate saturated at {prev_est:.3e} "
                f"above tolerance {tol:.3e} (dimension {space.dim})",
                stacklevel=2,
            )
            break
        if space.dim >= j_max:
            space.converged = False
            space.final_estimate = max_est
            warnings.warn(
                f"node {space.z}: dimension cap {j_max} reached with "
                f"estimate {max_est:.3e} above tolerance {tol:.3e}",
                stacklevel=2,
            )
            break
        mu_new = float(train[cand[star]])
        theta_new = thetas[:, star]
        vectors = []
        for i, K in enumerate(space.support):
            solver = ws.patch_solver(int(K), db.k)
            w = solver.corrector(space.z, theta_new)
            _track_constraint(space, solver, w)
            vectors.append(w)
        if not _append_direction(space, mu_new, vectors, L_rr):
            # the snapshot with the worst estimate adds no new direction:
            # the space is saturated and the estimate cannot drop further
            space.rejected.append(mu_new)
            space.converged = False
            space.final_estimate = max_est
            warnings.warn(
                f"node {space.z}: dependent snapshot at the worst "
                f"parameter, estimate {max_est:.3e} above tolerance "
                f"{tol:.3e} (dimension {space.dim})",
                stacklevel=2,
            )
            break
        available[cand[star]] = False
        new_h = _solve_new_h_pieces(db, space)
        for i, K in enumerate(space.support):
            _extend_riesz(space, i, ws.patch_solver(int(K), db.k), new_h[i])
        _refresh_stiffness(db, space)
        space.history.append((mu_new, max_est))
        prev_est = max_est
    db.timings["offline_local_seconds"] = db.timings.get(
        "offline_local_seconds", 0.0
    ) + (time.perf_counter() - t0)
    return space


def precompute_local(db, z):
    """Node-level reduced stiffness blocks and hat loads.

    D entries integrate each coefficient term against summed snapshot
    gradients; F entries integrate it against the hat gradient.
    """
    space = db.space(z)
    ws = db.workspace
    ridx = space.region_idx
    X = space.basis  # (J, m_region)
    Q = ws.n_terms
    J = space.dim
    hat = ws.hat(space.z)
    D = np.empty((Q, J, J))
    F = np.empty((Q, J))
    ix = np.ix_(ridx, ridx)
    for q in range(Q):
        A_rr = ws.A_q[q][ix]
        Y = A_rr @ X.T
        Dq = X @ Y
        D[q] = 0.5 * (Dq + Dq.T)
        F[q] = X @ (ws.A_q[q] @ hat)[ridx]
    space.D_z = D
    space.F_z = F
    return D, F


def precompute_global(db):
    """Global coupling blocks of the reduced multiscale basis.

    Stacks all node bases into one sparse matrix and forms, per
    coefficient term, the hat-hat, snapshot-hat and snapshot-snapshot
    gradient integrals plus the source loads.  Entries of structurally
    disjoint supports are exact zeros.
    """
    ws = db.workspace
    n_fine = ws.hier.fine.n_nodes
    nodes = db.node_ids
    N = nodes.size
    dims = np.array([db.spaces[int(z)].dim for z in nodes], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(dims)])
    total = int(offsets[-1])
    data, rows, cols = [], [], []
    for r, z in enumerate(nodes):
        space = db.spaces[int(z)]
        for j in range(space.dim):
            data.append(space.basis[j])
            rows.append(space.region_idx)
            cols.append(np.full(space.region_idx.size, offsets[r] + j))
    XX = sp.csc_matrix(
        (
            np.concatenate(data),
            (np.concatenate(rows), np.concatenate(cols)),
        ),
        shape=(n_fine, total),
    )
    P_int = ws.prolongation[:, nodes].tocsc()
    Q = ws.n_terms
    S_hat = np.empty((Q, N, N))
    R_mix = np.empty((Q, N, total))
    G_snap = np.empty((Q, total, total))
    for q in range(Q):
        AX = ws.A_q[q] @ XX
        AP = ws.A_q[q] @ P_int
        S = (P_int.T @ AP).toarray()
        G = (XX.T @ AX).toarray()
        S_hat[q] = 0.5 * (S + S.T)
        G_snap[q] = 0.5 * (G + G.T)
        R_mix[q] = (P_int.T @ AX).toarray()
    db.dims = dims
    db.offsets = offsets
    db.S_hat = S_hat
    db.R_mix = R_mix
    db.G_snap = G_snap
    db.load_hat = np.asarray(P_int.T @ ws.load)
    db.load_snap = np.asarray(XX.T @ ws.load)
    return S_hat, R_mix, G_snap


def build_offline_db(
    problem,
    n_coarse,
    levels,
    k,
    tol,
    seed=0,
    train_size=100,
    j_max=DEFAULT_J_MAX,
    mu1=None,
    keep_fine_pieces=True,
    progress=None,
):
    """Run the complete offline phase and return the populated database."""
    db = _empty_db(problem, n_coarse, levels, k, tol, seed, train_size, j_max)
    t0 = time.perf_counter()
    initialize_rb(db, mu1=mu1)
    for z in db.node_ids:
        greedy_node(db, int(z))
        precompute_local(db, int(z))
        if not keep_fine_pieces:
            space = db.spaces[int(z)]
            space.l_pieces, space.h_pieces, space.riesz_E = [], [], []
        if progress is not None:
            progress(int(z), db.spaces[int(z)])
    precompute_global(db)
    db.timings["offline_total_seconds"] = time.perf_counter() - t0
    db.timings["offline_local_avg"] = db.timings.get(
        "offline_local_seconds", 0.0
    ) / max(db.workspace.hier.coarse.n_elements, 1)
    return db
