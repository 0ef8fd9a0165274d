"""Geometry: mesh construction, refinement maps, patches."""

import numpy as np
import pytest

from rblod.errors import InvalidArgumentError
from rblod.grid import (
    build_unit_square_mesh,
    element_patch,
    node_patch_union,
    node_support,
    refine_uniform,
)


def brute_force_grow(mesh, elements, rounds):
    """Reference patch growth: repeated vertex-contact closure."""
    current = set(int(e) for e in elements)
    for _ in range(rounds):
        verts = set()
        for e in current:
            verts.update(int(v) for v in mesh.elements[e])
        nxt = set(current)
        for e in range(mesh.n_elements):
            if verts.intersection(int(v) for v in mesh.elements[e]):
                nxt.add(e)
        current = nxt
    return np.array(sorted(current))


@pytest.mark.parametrize("n", [1, 2, 3, 4, 8])
def test_counts(n):
    mesh = build_unit_square_mesh(n)
    assert mesh.n_nodes == (n + 1) ** 2
    assert mesh.n_elements == 2 * n * n
    assert mesh.interior_nodes.size == (n - 1) ** 2
    assert mesh.boundary_nodes.size == 4 * n
    assert mesh.mesh_size == pytest.approx(np.sqrt(2.0) / n)


def test_node_ordering_row_major():
    n = 4
    mesh = build_unit_square_mesh(n)
    for j in range(n + 1):
        for i in range(n + 1):
            np.testing.assert_allclose(mesh.nodes[j * (n + 1) + i], [i / n, j / n])


def test_elements_positive_area_and_tiling():
    mesh = build_unit_square_mesh(5, origin=(-1.0, 2.0), side=3.0)
    areas = mesh.element_areas()
    assert np.all(areas > 0)
    np.testing.assert_allclose(areas, 3.0**2 / (2 * 25))
    np.testing.assert_allclose(areas.sum(), 9.0)


def test_cell_pairs_share_diagonal():
    mesh = build_unit_square_mesh(3)
    for c in range(9):
        lo = set(mesh.elements[2 * c])
        up = set(mesh.elements[2 * c + 1])
        assert len(lo & up) == 2  # the shared diagonal


def test_invalid_mesh_args():
    with pytest.raises(InvalidArgumentError):
        build_unit_square_mesh(0)
    with pytest.raises(InvalidArgumentError):
        build_unit_square_mesh(4, side=0.0)


def test_refine_identity():
    mesh = build_unit_square_mesh(4)
    hier = refine_uniform(mesh, 0)
    np.testing.assert_array_equal(
        hier.fine_to_coarse_element, np.arange(mesh.n_elements)
    )
    np.testing.assert_array_equal(hier.coarse_node_in_fine, np.arange(mesh.n_nodes))
    assert hier.fine.n == 4


def test_refine_matches_direct_build():
    hier = refine_uniform(build_unit_square_mesh(4), 5)
    direct = build_unit_square_mesh(128)
    np.testing.assert_array_equal(hier.fine.nodes, direct.nodes)
    np.testing.assert_array_equal(hier.fine.elements, direct.elements)


def point_in_triangle(p, tri):
    a, b, c = tri
    m = np.column_stack([b - a, c - a])
    lam = np.linalg.solve(m, p - a)
    return lam[0] >= -1e-12 and lam[1] >= -1e-12 and lam.sum() <= 1 + 1e-12


@pytest.mark.parametrize("n,levels", [(2, 1), (3, 2), (4, 3)])
def test_fine_to_coarse_by_barycenter(n, levels):
    hier = refine_uniform(build_unit_square_mesh(n), levels)
    bary = hier.fine.element_barycenters()
    cpts = hier.coarse.nodes[hier.coarse.elements]
    for e in range(hier.fine.n_elements):
        parent = hier.fine_to_coarse_element[e]
        assert point_in_triangle(bary[e], cpts[parent]), (e, parent)


def test_coarse_node_in_fine_coordinates():
    hier = refine_uniform(build_unit_square_mesh(4), 2)
    np.testing.assert_array_equal(
        hier.coarse.nodes, hier.fine.nodes[hier.coarse_node_in_fine]
    )


def test_children_table():
    hier = refine_uniform(build_unit_square_mesh(3), 2)
    children = hier.coarse_to_fine_elements()
    assert children.shape == (hier.coarse.n_elements, 16)
    for parent in range(hier.coarse.n_elements):
        assert np.all(hier.fine_to_coarse_element[children[parent]] == parent)
    # children partition the fine elements
    assert np.array_equal(np.sort(children.ravel()), np.arange(hier.fine.n_elements))


def test_node_support_interior():
    mesh = build_unit_square_mesh(4)
    z = 2 * 5 + 2  # center node
    sup = node_support(mesh, z)
    assert sup.size == 6
    for e in sup:
        assert z in mesh.elements[e]
    # no other element contains z
    others = np.setdiff1d(np.arange(mesh.n_elements), sup)
    for e in others:
        assert z not in mesh.elements[e]


def test_node_support_boundary_rejected():
    mesh = build_unit_square_mesh(4)
    with pytest.raises(InvalidArgumentError):
        node_support(mesh, 0)
    with pytest.raises(InvalidArgumentError):
        node_support(mesh, 2)  # edge midpoint of bottom row
    with pytest.raises(InvalidArgumentError):
        node_support(mesh, 999)


def test_element_patch_13_elements():
    hier = refine_uniform(build_unit_square_mesh(8), 1)
    center_cell = 4 * 8 + 4
    K = 2 * center_cell
    patch = element_patch(hier, K, 1)
    assert patch.coarse_elements.size == 13
    np.testing.assert_array_equal(
        patch.coarse_elements, brute_force_grow(hier.coarse, [K], 1)
    )


@pytest.mark.parametrize("K,k", [(0, 1), (0, 2), (31, 1), (70, 2), (70, 3)])
def test_element_patch_matches_brute_force(K, k):
    hier = refine_uniform(build_unit_square_mesh(6), 1)
    patch = element_patch(hier, K, k)
    np.testing.assert_array_equal(patch.coarse_elements, brute_force_grow(hier.coarse, [K], k))


def test_element_patch_nesting_and_saturation():
    hier = refine_uniform(build_unit_square_mesh(8), 0)
    prev = set()
    for k in range(16):
        patch = element_patch(hier, 2 * (3 * 8 + 5), k)
        cur = set(patch.coarse_elements.tolist())
        assert prev <= cur
        prev = cur
    # growth through the anti-phase diagonal direction advances more slowly
    # than one cell per round, but k=15 saturates an 8x8 grid from any seed
    assert len(prev) == hier.coarse.n_elements


def test_element_patch_fine_elements():
    hier = refine_uniform(build_unit_square_mesh(4), 2)
    patch = element_patch(hier, 5, 1)
    # every fine element maps into the patch, and all children are present
    assert set(hier.fine_to_coarse_element[patch.fine_elements]) == set(
        patch.coarse_elements.tolist()
    )
    assert patch.fine_elements.size == 16 * patch.coarse_elements.size


def brute_force_fine_interior(hier, fine_els):
    """Reference: fine nodes off the boundary with all incident elements inside."""
    fine = hier.fine
    inside = set(int(e) for e in fine_els)
    incident = {}
    for e in range(fine.n_elements):
        for v in fine.elements[e]:
            incident.setdefault(int(v), set()).add(e)
    bdry = set(int(b) for b in fine.boundary_nodes)
    out = [
        v
        for v, els in incident.items()
        if v not in bdry and els <= inside and any(e in inside for e in els)
    ]
    return np.array(sorted(out))


def test_patch_fine_interior_nodes():
    hier = refine_uniform(build_unit_square_mesh(4), 1)
    patch = element_patch(hier, 2 * (1 * 4 + 1), 1)
    np.testing.assert_array_equal(
        patch.fine_interior_nodes, brute_force_fine_interior(hier, patch.fine_elements)
    )


def test_patch_constraint_rows():
    hier = refine_uniform(build_unit_square_mesh(4), 1)
    patch = element_patch(hier, 2 * (1 * 4 + 1), 1)
    # reference: interior coarse nodes z such that some fine element incident
    # to a patch-interior fine node has its parent inside the support of z
    fine, coarse = hier.fine, hier.coarse
    interior = set(int(z) for z in coarse.interior_nodes)
    expected = set()
    for z in interior:
        support = set(
            int(e)
            for e in range(coarse.n_elements)
            if z in coarse.elements[e]
        )
        hit = False
        for i in patch.fine_interior_nodes:
            for e in range(fine.n_elements):
                if i in fine.elements[e] and int(hier.fine_to_coarse_element[e]) in support:
                    hit = True
                    break
            if hit:
                break
        if hit:
            expected.add(z)
    assert set(patch.coarse_interior_nodes.tolist()) == expected


def test_degenerate_patch_has_no_interior():
    # a single coarse element with no refinement has no interior fine node
    hier = refine_uniform(build_unit_square_mesh(4), 0)
    patch = element_patch(hier, 0, 0)
    assert patch.fine_interior_nodes.size == 0


def test_node_patch_union_k0_is_support():
    hier = refine_uniform(build_unit_square_mesh(4), 1)
    z = 2 * 5 + 2
    region = node_patch_union(hier, z, 0)
    np.testing.assert_array_equal(region.coarse_elements, node_support(hier.coarse, z))
    assert region.center_element is None


def test_node_patch_union_is_union_of_element_patches():
    hier = refine_uniform(build_unit_square_mesh(8), 1)
    z = 3 * 9 + 4
    k = 2
    region = node_patch_union(hier, z, k)
    parts = [
        set(element_patch(hier, int(K), k).coarse_elements.tolist())
        for K in node_support(hier.coarse, z)
    ]
    assert set(region.coarse_elements.tolist()) == set().union(*parts)
