"""Offline database persistence.

A database is a directory holding a UTF-8 ``key=value`` manifest plus one
raw array file per stored quantity.  Array files are little-endian
float64, prefixed by an 8-byte magic tag, a 64-bit dimension count and
one 64-bit extent per dimension.  Saving the same configuration twice
produces byte-identical directories.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DatabaseFormatError, InconsistentDatabaseError
from .offline import LocalRBSpace, OfflineDB, TrainingSet, build_workspace

__all__ = ["write_array", "read_array", "save_offline", "load_offline"]

MAGIC = b"RBLODARR"
FORMAT_NAME = "rblod-offline"
FORMAT_VERSION = 1
MAX_EXTENT = 2**40

_MANIFEST_KEYS = [
    "format",
    "version",
    "problem",
    "n_coarse",
    "levels",
    "k",
    "tol",
    "seed",
    "train_size",
    "j_max",
    "mu1",
    "alpha_train",
    "n_terms",
    "n_nodes",
    "total_dim",
    "n_arrays",
]

_ARRAY_NAMES = [
    "training_parameters",
    "alpha_per_mu",
    "node_ids",
    "node_dims",
    "node_support_len",
    "node_region_len",
    "node_history_len",
    "node_rejected_len",
    "node_normalizer",
    "node_converged",
    "node_final_estimate",
    "node_gram_deviation",
    "node_constraint_residual",
    "node_lstsq_fallbacks",
    "support_flat",
    "region_flat",
    "selected_flat",
    "history_mu_flat",
    "history_est_flat",
    "rejected_flat",
    "basis_flat",
    "Dz_flat",
    "Fz_flat",
    "DK_flat",
    "gK_flat",
    "riesz_T",
    "riesz_factor_flat",
    "global_S_hat",
    "global_R_mix",
    "global_G_snap",
    "global_load_hat",
    "global_load_snap",
]


# ── raw array files ─────────────────────────────────────────────────────


def write_array(path, arr):
    """Write one float64 array in the raw prefixed format."""
    arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
    header = np.empty(1 + arr.ndim, dtype="<u8")
    header[0] = arr.ndim
    header[1:] = arr.shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(header.tobytes())
        f.write(arr.astype("<f8", copy=False).tobytes())


def read_array(path):
    """Read one raw array file, validating magic and length headers."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DatabaseFormatError(f"cannot read array file {path}: {exc}") from exc
    if len(data) < 16 or data[:8] != MAGIC:
        raise DatabaseFormatError(f"{path}: not a raw array file (bad magic)")
    ndim = int(np.frombuffer(data, "<u8", count=1, offset=8)[0])
    if ndim > 32:
        raise DatabaseFormatError(f"{path}: implausible dimension count {ndim}")
    if len(data) < 16 + 8 * ndim:
        raise DatabaseFormatError(f"{path}: truncated extent header")
    shape = tuple(
        int(x) for x in np.frombuffer(data, "<u8", count=ndim, offset=16)
    )
    if any(e > MAX_EXTENT for e in shape):
        raise DatabaseFormatError(f"{path}: implausible extent in {shape}")
    count = 1
    for e in shape:
        count *= e
    expected = 16 + 8 * ndim + 8 * count
    if len(data) != expected:
        raise DatabaseFormatError(
            f"{path}: corrupted length header; shape {shape} needs "
            f"{expected} bytes, file has {len(data)}"
        )
    arr = np.frombuffer(data, "<f8", count=count, offset=16 + 8 * ndim)
    return arr.reshape(shape).copy()


def _as_index(arr):
    return np.asarray(arr, dtype=np.float64).astype(np.int64)


# ── manifest ────────────────────────────────────────────────────────────


def _write_manifest(path, entries):
    lines = [f"{key}={entries[key]}" for key in _MANIFEST_KEYS]
    lines += [
        f"{key}={value}"
        for key, value in entries.items()
        if key not in _MANIFEST_KEYS
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_manifest(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DatabaseFormatError(f"cannot read manifest {path}: {exc}") from exc
    entries = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DatabaseFormatError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    missing = [key for key in _MANIFEST_KEYS if key not in entries]
    if missing:
        raise DatabaseFormatError(f"{path}: missing manifest keys {missing}")
    if entries["format"] != FORMAT_NAME:
        raise DatabaseFormatError(
            f"{path}: unknown format {entries['format']!r}"
        )
    if int(entries["version"]) != FORMAT_VERSION:
        raise DatabaseFormatError(
            f"{path}: unsupported version {entries['version']}"
        )
    return entries


# ── save ────────────────────────────────────────────────────────────────


def _require_complete(db):
    if not db.spaces or db.node_ids is None:
        raise InconsistentDatabaseError("database has no local spaces to save")
    if db.S_hat is None or db.G_snap is None or db.R_mix is None:
        raise InconsistentDatabaseError(
            "global blocks missing; run the global precomputation first"
        )
    for z in db.node_ids:
        space = db.spaces[int(z)]
        if space.D_z is None or space.F_z is None:
            raise InconsistentDatabaseError(
                f"node {z} lacks local precomputed blocks"
            )


def save_offline(db, path):
    """Write the offline database directory (creating it if needed)."""
    _require_complete(db)
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    nodes = db.node_ids
    spaces = [db.spaces[int(z)] for z in nodes]
    Q = db.n_terms

    arrays = {
        "training_parameters": db.training_set.parameters,
        "alpha_per_mu": db.alpha_per_mu,
        "node_ids": nodes,
        "node_dims": [s.dim for s in spaces],
        "node_support_len": [s.support.size for s in spaces],
        "node_region_len": [s.region_idx.size for s in spaces],
        "node_history_len": [len(s.history) for s in spaces],
        "node_rejected_len": [len(s.rejected) for s in spaces],
        "node_normalizer": [s.normalizer for s in spaces],
        "node_converged": [float(s.converged) for s in spaces],
        "node_final_estimate": [s.final_estimate for s in spaces],
        "node_gram_deviation": [s.gram_deviation for s in spaces],
        "node_constraint_residual": [s.max_constraint_residual for s in spaces],
        "node_lstsq_fallbacks": [s.lstsq_fallbacks for s in spaces],
        "support_flat": np.concatenate([s.support for s in spaces]),
        "region_flat": np.concatenate([s.region_idx for s in spaces]),
        "selected_flat": np.concatenate([s.selected for s in spaces]),
        "history_mu_flat": np.array(
            [mu for s in spaces for mu, _ in s.history]
        ),
        "history_est_flat": np.array(
            [est for s in spaces for _, est in s.history]
        ),
        "rejected_flat": np.array([r for s in spaces for r in s.rejected]),
        "basis_flat": np.concatenate([s.basis.ravel() for s in spaces]),
        "Dz_flat": np.concatenate([s.D_z.ravel() for s in spaces]),
        "Fz_flat": np.concatenate([s.F_z.ravel() for s in spaces]),
        "DK_flat": np.concatenate(
            [D.ravel() for s in spaces for D in s.D_K]
        ),
        "gK_flat": np.concatenate(
            [g.ravel() for s in spaces for g in s.g_K]
        ),
        "riesz_T": [W.shape[0] for s in spaces for W in s.riesz_factor],
        "riesz_factor_flat": np.concatenate(
            [W.ravel() for s in spaces for W in s.riesz_factor]
        ),
        "global_S_hat": db.S_hat,
        "global_R_mix": db.R_mix,
        "global_G_snap": db.G_snap,
        "global_load_hat": db.load_hat,
        "global_load_snap": db.load_snap,
    }
    entries = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "problem": db.problem,
        "n_coarse": db.n_coarse,
        "levels": db.levels,
        "k": db.k,
        "tol": repr(float(db.tol)),
        "seed": db.seed,
        "train_size": db.train_size,
        "j_max": db.j_max,
        "mu1": repr(float(db.mu1)),
        "alpha_train": repr(float(db.alpha_train)),
        "n_terms": Q,
        "n_nodes": nodes.size,
        "total_dim": int(sum(s.dim for s in spaces)),
        "n_arrays": len(_ARRAY_NAMES),
    }
    # optional run diagnostics, restored into db.timings on load
    for key in ("offline_total_seconds", "offline_local_avg"):
        if key in db.timings:
            entries[key] = repr(float(db.timings[key]))
    for name in _ARRAY_NAMES:
        write_array(path / f"{name}.f64", arrays[name])
    _write_manifest(path / "manifest.txt", entries)
    return path


# ── load ────────────────────────────────────────────────────────────────


def _split(flat, lengths):
    out = []
    pos = 0
    for n in lengths:
        out.append(flat[pos : pos + n])
        pos += n
    if pos != len(flat):
        raise InconsistentDatabaseError(
            f"ragged array length {len(flat)} does not match offsets ({pos})"
        )
    return out


def load_offline(path, problem=None, n_coarse=None, levels=None, k=None):
    """Load an offline database directory.

    The optional keyword arguments assert the expected identity; any
    mismatch with the manifest is rejected.  The fine-grid workspace is
    rebuilt from the manifest, and the loaded data are cross-checked
    against its mesh sizes.
    """
    path = Path(path)
    man = _read_manifest(path / "manifest.txt")
    expects = {
        "problem": problem,
        "n_coarse": n_coarse,
        "levels": levels,
        "k": k,
    }
    for key, want in expects.items():
        if want is not None and str(want) != man[key]:
            raise InconsistentDatabaseError(
                f"database at {path} has {key}={man[key]}, expected {want}"
            )
    arrays = {}
    for name in _ARRAY_NAMES:
        arrays[name] = read_array(path / f"{name}.f64")

    ws = build_workspace(man["problem"], int(man["n_coarse"]), int(man["levels"]))
    Q = int(man["n_terms"])
    if Q != ws.n_terms:
        raise InconsistentDatabaseError(
            f"manifest says {Q} coefficient terms, problem has {ws.n_terms}"
        )
    nodes = _as_index(arrays["node_ids"])
    if nodes.size != int(man["n_nodes"]) or not np.array_equal(
        nodes, ws.interior_coarse
    ):
        raise InconsistentDatabaseError(
            f"node list does not match a {man['n_coarse']}x{man['n_coarse']} "
            "coarse grid"
        )
    N = nodes.size
    dims = _as_index(arrays["node_dims"])
    sup_len = _as_index(arrays["node_support_len"])
    reg_len = _as_index(arrays["node_region_len"])
    hist_len = _as_index(arrays["node_history_len"])
    rej_len = _as_index(arrays["node_rejected_len"])
    if int(dims.sum()) != int(man["total_dim"]):
        raise InconsistentDatabaseError(
            f"total dimension {int(dims.sum())} does not match manifest "
            f"{man['total_dim']}"
        )

    supports = _split(_as_index(arrays["support_flat"]), sup_len)
    regions = _split(_as_index(arrays["region_flat"]), reg_len)
    selected = _split(arrays["selected_flat"], dims)
    hist_mu = _split(arrays["history_mu_flat"], hist_len)
    hist_est = _split(arrays["history_est_flat"], hist_len)
    rejected = _split(arrays["rejected_flat"], rej_len)
    basis = _split(arrays["basis_flat"], dims * reg_len)
    Dz = _split(arrays["Dz_flat"], Q * dims * dims)
    Fz = _split(arrays["Fz_flat"], Q * dims)
    DK = _split(arrays["DK_flat"], sup_len * Q * dims * dims)
    gK = _split(arrays["gK_flat"], sup_len * Q * dims)
    riesz_T = _split(_as_index(arrays["riesz_T"]), sup_len)
    widths = [
        int(T.sum()) * Q * (1 + int(J)) for T, J in zip(riesz_T, dims)
    ]
    riesz = _split(arrays["riesz_factor_flat"], widths)

    n_fine = ws.hier.fine.n_nodes
    training = TrainingSet(
        arrays["training_parameters"].copy(), int(man["seed"])
    )
    if training.parameters.size != int(man["train_size"]):
        raise InconsistentDatabaseError("training set size mismatch")
    db = OfflineDB(
        problem=man["problem"],
        n_coarse=int(man["n_coarse"]),
        levels=int(man["levels"]),
        k=int(man["k"]),
        tol=float(man["tol"]),
        seed=int(man["seed"]),
        train_size=int(man["train_size"]),
        j_max=int(man["j_max"]),
        training_set=training,
        alpha_train=float(man["alpha_train"]),
        alpha_per_mu=arrays["alpha_per_mu"].copy(),
        mu1=float(man["mu1"]),
        workspace=ws,
        node_ids=nodes,
    )
    for key in ("offline_total_seconds", "offline_local_avg"):
        if key in man:
            db.timings[key] = float(man[key])
    for r, z in enumerate(nodes):
        J = int(dims[r])
        m = int(reg_len[r])
        region = regions[r]
        if region.size and (region.min() < 0 or region.max() >= n_fine):
            raise InconsistentDatabaseError(
                f"node {z}: region indices exceed the fine grid"
            )
        S_r = int(sup_len[r])
        P = Q * (1 + J)
        space = LocalRBSpace(
            z=int(z),
            support=supports[r],
            region_idx=region,
            piece_idx=[],
            piece_pos=[],
            normalizer=float(arrays["node_normalizer"][r]),
            c_z=S_r,
            selected=list(selected[r]),
            basis=basis[r].reshape(J, m),
            D_K=list(DK[r].reshape(S_r, Q, J, J)),
            g_K=list(gK[r].reshape(S_r, Q, J)),
            D_z=Dz[r].reshape(Q, J, J),
            F_z=Fz[r].reshape(Q, J),
            history=list(zip(hist_mu[r], hist_est[r])),
            rejected=list(rejected[r]),
            converged=bool(arrays["node_converged"][r]),
            final_estimate=float(arrays["node_final_estimate"][r]),
            gram_deviation=float(arrays["node_gram_deviation"][r]),
            max_constraint_residual=float(
                arrays["node_constraint_residual"][r]
            ),
            lstsq_fallbacks=int(arrays["node_lstsq_fallbacks"][r]),
        )
        pos = 0
        flat = riesz[r]
        for T in riesz_T[r]:
            T = int(T)
            space.riesz_factor.append(
                flat[pos : pos + T * P].reshape(T, P)
            )
            pos += T * P
        db.spaces[int(z)] = space

    total = int(dims.sum())
    db.dims = dims
    db.offsets = np.concatenate([[0], np.cumsum(dims)])
    shapes = {
        "global_S_hat": (Q, N, N),
        "global_R_mix": (Q, N, total),
        "global_G_snap": (Q, total, total),
        "global_load_hat": (N,),
        "global_load_snap": (total,),
    }
    for name, shape in shapes.items():
        if arrays[name].shape != shape:
            raise InconsistentDatabaseError(
                f"{name} has shape {arrays[name].shape}, expected {shape}"
            )
    db.S_hat = arrays["global_S_hat"]
    db.R_mix = arrays["global_R_mix"]
    db.G_snap = arrays["global_G_snap"]
    db.load_hat = arrays["global_load_hat"]
    db.load_snap = arrays["global_load_snap"]
    return db
