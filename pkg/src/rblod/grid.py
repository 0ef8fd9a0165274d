"""Criss-cross triangulations, uniform refinement hierarchies, and patches.

All meshes triangulate an axis-aligned square with an ``n x n`` grid of
cells, each cell split along its south-west/north-east diagonal into two
triangles.  Nodes are numbered row-major (x fastest), cells likewise, and
cell ``c`` owns elements ``2c`` (triangle below the diagonal) and ``2c+1``
(above).  All index maps are computed with integer arithmetic so that
refinement is reproducible bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import InvalidArgumentError

__all__ = [
    "Mesh",
    "MeshHierarchy",
    "Patch",
    "build_unit_square_mesh",
    "refine_uniform",
    "element_patch",
    "node_support",
    "node_patch_union",
]


# ── meshes ──────────────────────────────────────────────────────────────


@dataclass(eq=False)
class Mesh:
    """Criss-cross triangulation of a square.

    Attributes
    ----------
    n : int
        Cells per side.
    origin, side : tuple, float
        Lower-left corner and edge length of the square.
    nodes : (n_nodes, 2) float64
        Vertex coordinates, row-major ordering (x fastest).
    elements : (2*n*n, 3) int64
        Vertex indices per triangle, counterclockwise.
    boundary_nodes, interior_nodes : int64 arrays
        Sorted global node indices on / off the square's boundary.
    """

    n: int
    origin: tuple
    side: float
    nodes: np.ndarray
    elements: np.ndarray
    boundary_nodes: np.ndarray
    interior_nodes: np.ndarray
    _node_elem: sp.csr_matrix = field(default=None, repr=False, compare=False)
    _node_degree: np.ndarray = field(default=None, repr=False, compare=False)

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_elements(self):
        return self.elements.shape[0]

    @property
    def mesh_size(self):
        """Element diameter (length of the cell diagonal)."""
        return self.side * np.sqrt(2.0) / self.n

    def node_to_elements(self):
        """Node-element incidence as a csr matrix of ones (cached)."""
        if self._node_elem is None:
            rows = self.elements.ravel()
            cols = np.repeat(np.arange(self.n_elements), 3)
            ones = np.ones(rows.size, dtype=np.int8)
            self._node_elem = sp.csr_matrix(
                (ones, (rows, cols)), shape=(self.n_nodes, self.n_elements)
            )
        return self._node_elem

    def node_degrees(self):
        """Number of elements incident to each node (cached)."""
        if self._node_degree is None:
            self._node_degree = np.bincount(
                self.elements.ravel(), minlength=self.n_nodes
            )
        return self._node_degree

    def element_barycenters(self):
        return self.nodes[self.elements].mean(axis=1)

    def element_areas(self):
        p = self.nodes[self.elements]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def build_unit_square_mesh(n, origin=(0.0, 0.0), side=1.0):
    """Build the criss-cross triangulation with ``n`` cells per side.

    Parameters
    ----------
    n : int
        Cells per side, at least 1.
    origin : pair of floats
        Lower-left corner.
    side : float
        Edge length, positive.

    Returns
    -------
    Mesh
    """
    if n < 1 or int(n) != n:
        raise InvalidArgumentError(f"cells per side must be a positive integer, got {n}")
    if side <= 0:
        raise InvalidArgumentError(f"side length must be positive, got {side}")
    n = int(n)

    ticks = np.arange(n + 1, dtype=np.float64) / n
    xs = origin[0] + side * ticks
    ys = origin[1] + side * ticks
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    ci, cj = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    ci = ci.ravel()
    cj = cj.ravel()
    a = cj * (n + 1) + ci        # SW corner of cell
    b = a + 1                    # SE
    c = b + (n + 1)              # NE
    d = a + (n + 1)              # NW
    elements = np.empty((2 * n * n, 3), dtype=np.int64)
    elements[0::2] = np.column_stack([a, b, c])
    elements[1::2] = np.column_stack([a, c, d])

    gi, gj = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="xy")
    on_bdry = (gi == 0) | (gi == n) | (gj == 0) | (gj == n)
    on_bdry = on_bdry.ravel()
    node_ids = np.arange((n + 1) ** 2, dtype=np.int64)

    return Mesh(
        n=n,
        origin=(float(origin[0]), float(origin[1])),
        side=float(side),
        nodes=nodes,
        elements=elements,
        boundary_nodes=node_ids[on_bdry],
        interior_nodes=node_ids[~on_bdry],
    )


# ── refinement hierarchy ────────────────────────────────────────────────


@dataclass(eq=False)
class MeshHierarchy:
    """A coarse mesh and its uniform refinement.

    Attributes
    ----------
    coarse, fine : Mesh
    levels : int
        Number of uniform quadrisection steps between the two.
    fine_to_coarse_element : (fine.n_elements,) int64
        Coarse parent of each fine element.
    coarse_node_in_fine : (coarse.n_nodes,) int64
        Fine node index coinciding with each coarse node.
    """

    coarse: Mesh
    fine: Mesh
    levels: int
    fine_to_coarse_element: np.ndarray
    coarse_node_in_fine: np.ndarray
    _children: np.ndarray = field(default=None, repr=False, compare=False)

    def coarse_to_fine_elements(self):
        """(coarse.n_elements, 4**levels) children table (cached)."""
        if self._children is None:
            order = np.argsort(self.fine_to_coarse_element, kind="stable")
            self._children = order.reshape(self.coarse.n_elements, 4**self.levels)
        return self._children


def refine_uniform(mesh, levels):
    """Refine ``mesh`` by ``levels`` uniform quadrisections.

    Each triangle splits into four similar triangles per level; for the
    criss-cross pattern the result coincides node-for-node with the
    criss-cross mesh built directly at the finer resolution, which is how
    it is constructed.  ``levels=0`` yields an identity hierarchy.
    """
    if levels < 0 or int(levels) != levels:
        raise InvalidArgumentError(f"levels must be a nonnegative integer, got {levels}")
    levels = int(levels)
    m = 1 << levels
    nc = mesh.n
    nf = nc * m
    fine = build_unit_square_mesh(nf, mesh.origin, mesh.side)

    ef = np.arange(fine.n_elements, dtype=np.int64)
    tri = ef & 1
    cell = ef >> 1
    fi = cell % nf
    fj = cell // nf
    ci = fi // m
    cj = fj // m
    # Side of the parent's diagonal: compare the fine barycenter offset
    # 3*(y - x) in cell-local fine units, which is -1 / +1 for the two
    # triangles of an on-diagonal fine cell and dominated by the cell
    # offset otherwise.  Positive means above (north-west) triangle.
    loc = 3 * ((fj - cj * m) - (fi - ci * m)) + np.where(tri == 0, -1, 1)
    f2c = 2 * (cj * nc + ci) + (loc > 0)

    ids = np.arange(mesh.n_nodes, dtype=np.int64)
    gi = ids % (nc + 1)
    gj = ids // (nc + 1)
    c_in_f = (gj * m) * (nf + 1) + gi * m

    return MeshHierarchy(
        coarse=mesh,
        fine=fine,
        levels=levels,
        fine_to_coarse_element=f2c.astype(np.int64),
        coarse_node_in_fine=c_in_f,
    )


# ── patches ─────────────────────────────────────────────────────────────


@dataclass(eq=False)
class Patch:
    """An element patch (or node-patch union) inside a hierarchy.

    Attributes
    ----------
    center_element : int or None
        Seed coarse element; None for node-centered unions.
    k : int
        Number of vertex-contact growth rounds.
    coarse_elements : int64 array
        Sorted coarse element ids covered by the patch.
    fine_elements : int64 array
        Sorted fine element ids covered.
    fine_interior_nodes : int64 array
        Sorted fine nodes that are off the domain boundary and whose
        every incident fine element lies inside the patch.
    coarse_interior_nodes : int64 array
        Sorted interior coarse nodes whose quasi-interpolation weights
        hit at least one patch-interior fine node (the constraint rows
        of corrector problems on this patch).
    """

    center_element: int
    k: int
    coarse_elements: np.ndarray
    fine_elements: np.ndarray
    fine_interior_nodes: np.ndarray
    coarse_interior_nodes: np.ndarray

    @property
    def n_fine_interior(self):
        return self.fine_interior_nodes.size


def _patch_from_coarse_elements(hier, center, k, elem_mask):
    coarse = hier.coarse
    fine = hier.fine
    coarse_els = np.flatnonzero(elem_mask).astype(np.int64)
    fine_els = np.sort(hier.coarse_to_fine_elements()[coarse_els].ravel())

    conn = fine.elements[fine_els]
    cnt = np.bincount(conn.ravel(), minlength=fine.n_nodes)
    surrounded = cnt == fine.node_degrees()
    surrounded[fine.boundary_nodes] = False
    surrounded &= cnt > 0
    fine_int = np.flatnonzero(surrounded).astype(np.int64)

    # Constraint rows: interior coarse nodes z whose hat function overlaps
    # the support of some patch-interior fine hat, i.e. z is a vertex of
    # the coarse parent of a fine element incident to a patch-interior node.
    if fine_int.size:
        inc = fine.node_to_elements()
        touched = np.unique(inc[fine_int].indices)
        parents = np.unique(hier.fine_to_coarse_element[touched])
        verts = np.unique(coarse.elements[parents])
        interior_mask = np.zeros(coarse.n_nodes, dtype=bool)
        interior_mask[coarse.interior_nodes] = True
        coarse_int = verts[interior_mask[verts]]
    else:
        coarse_int = np.empty(0, dtype=np.int64)

    return Patch(
        center_element=center,
        k=k,
        coarse_elements=coarse_els,
        fine_elements=fine_els,
        fine_interior_nodes=fine_int,
        coarse_interior_nodes=coarse_int.astype(np.int64),
    )


def _grow(mesh, elem_mask, rounds):
    inc = mesh.node_to_elements()
    for _ in range(rounds):
        node_mask = np.zeros(mesh.n_nodes, dtype=bool)
        node_mask[np.unique(mesh.elements[elem_mask])] = True
        elem_mask = (inc.T @ node_mask.astype(np.int8)) > 0
    return elem_mask


def element_patch(hier, element, k):
    """Grow the k-th vertex-contact patch around a coarse element.

    Round zero is the element itself; each further round adds every coarse
    element whose closure touches the current patch (shares at least a
    vertex).

    Returns
    -------
    Patch
    """
    coarse = hier.coarse
    if element < 0 or element >= coarse.n_elements:
        raise InvalidArgumentError(
            f"element {element} out of range [0, {coarse.n_elements})"
        )
    if k < 0 or int(k) != k:
        raise InvalidArgumentError(f"patch rounds k must be a nonnegative integer, got {k}")
    elem_mask = np.zeros(coarse.n_elements, dtype=bool)
    elem_mask[element] = True
    elem_mask = _grow(coarse, elem_mask, int(k))
    return _patch_from_coarse_elements(hier, int(element), int(k), elem_mask)


def node_support(mesh, z):
    """Sorted coarse elements sharing the interior vertex ``z``.

    Boundary vertices carry no basis function here, so they are rejected.
    """
    if z < 0 or z >= mesh.n_nodes:
        raise InvalidArgumentError(f"node {z} out of range [0, {mesh.n_nodes})")
    deg = mesh.node_degrees()
    on_bdry = np.zeros(mesh.n_nodes, dtype=bool)
    on_bdry[mesh.boundary_nodes] = True
    if on_bdry[z]:
        raise InvalidArgumentError(f"node {z} lies on the domain boundary")
    if deg[z] == 0:
        raise InvalidArgumentError(f"node {z} is isolated")
    return np.sort(mesh.node_to_elements()[int(z)].indices.astype(np.int64))


def node_patch_union(hier, z, k):
    """Union of the k-patches of all coarse elements sharing vertex ``z``.

    With ``k=0`` this is exactly the support of the hat function at ``z``.

    Returns
    -------
    Patch
        With ``center_element=None``.
    """
    support = node_support(hier.coarse, z)
    elem_mask = np.zeros(hier.coarse.n_elements, dtype=bool)
    elem_mask[support] = True
    elem_mask = _grow(hier.coarse, elem_mask, int(k))
    return _patch_from_coarse_elements(hier, None, int(k), elem_mask)
