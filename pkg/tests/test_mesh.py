import numpy as np
import pytest

from conservaflux import build_structured_mesh, edge_neighbors
from conservaflux.mesh import MeshError, TriMesh, read_mesh_file, write_mesh_file


def brute_force_edges(mesh):
    """Independent edge enumeration straight from the triangle list."""
    edges = set()
    for tri in mesh.triangles:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            edges.add((min(a, b), max(a, b)))
    return edges


def test_smallest_mesh_counts():
    mesh = build_structured_mesh(1)
    assert mesh.n_vertices == 4
    assert mesh.n_triangles == 2
    assert mesh.n_edges == 5


def test_n2_counts_and_euler():
    mesh = build_structured_mesh(2)
    assert (mesh.n_vertices, mesh.n_triangles, mesh.n_edges) == (9, 8, 16)
    assert mesh.n_vertices - mesh.n_edges + mesh.n_triangles == 1


def test_n4_counts_against_brute_force():
    mesh = build_structured_mesh(4)
    assert mesh.n_vertices == 25
    assert mesh.n_triangles == 32
    edges = brute_force_edges(mesh)
    assert len(edges) == 56
    assert mesh.n_edges == 56
    assert set(map(tuple, mesh.edges)) == edges
    assert mesh.n_vertices - mesh.n_edges + mesh.n_triangles == 1


@pytest.mark.parametrize("n", [1, 3, 7])
def test_positive_areas_summing_to_one(n):
    mesh = build_structured_mesh(n)
    areas = mesh.signed_areas()
    assert np.all(areas > 0)
    assert abs(areas.sum() - 1.0) < 1e-12


def test_h_is_cell_diagonal_and_halves_exactly():
    for n in (2, 5, 12):
        mesh = build_structured_mesh(n)
        assert abs(mesh.h - np.sqrt(2.0) / n) < 1e-15
        fine = build_structured_mesh(2 * n)
        assert fine.h == mesh.h / 2.0


def test_h_matches_max_edge_length():
    mesh = build_structured_mesh(6)
    lengths = np.linalg.norm(mesh.vertices[mesh.edges[:, 0]]
                             - mesh.vertices[mesh.edges[:, 1]], axis=1)
    assert abs(mesh.h - lengths.max()) < 1e-12 * mesh.h


def test_rejects_zero_subdivisions():
    with pytest.raises(ValueError):
        build_structured_mesh(0)


def test_edge_reference_counts():
    mesh = build_structured_mesh(3)
    interior = mesh.edge_tris[:, 1] >= 0
    assert np.all(mesh.edge_tris[:, 0] >= 0)
    # each boundary edge has exactly one triangle, interior ones two
    assert interior.sum() + len(mesh.boundary_edges) == mesh.n_edges


def test_two_triangle_neighbors():
    mesh = build_structured_mesh(1)
    nbrs = edge_neighbors(mesh, 0)
    assert sorted(x for x in nbrs if x is not None) == [1]
    assert nbrs.count(None) == 2


def test_boundary_triangle_has_missing_neighbor():
    mesh = build_structured_mesh(4)
    boundary_tris = set()
    for eid in mesh.boundary_edges:
        boundary_tris.add(int(mesh.edge_tris[eid, 0]))
    for t in boundary_tris:
        assert None in edge_neighbors(mesh, t)


def test_neighbor_symmetry_against_all_pairs_scan():
    mesh = build_structured_mesh(4)
    # oracle: all-pairs shared-edge scan
    shared = {}
    for t, tri in enumerate(mesh.triangles):
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            shared.setdefault((min(a, b), max(a, b)), []).append(t)
    for t in range(mesh.n_triangles):
        nbrs = edge_neighbors(mesh, t)
        tri = mesh.triangles[t]
        for m, nb in enumerate(nbrs):
            a, b = tri[m], tri[(m + 1) % 3]
            owners = shared[(min(a, b), max(a, b))]
            if nb is None:
                assert owners == [t]
            else:
                assert sorted(owners) == sorted([t, nb])
                assert t in edge_neighbors(mesh, nb)


def test_neighbor_index_out_of_range():
    mesh = build_structured_mesh(2)
    with pytest.raises(IndexError):
        edge_neighbors(mesh, 99)


def test_boundary_labels_geometric():
    mesh = build_structured_mesh(3)
    for eid, label in zip(mesh.boundary_edges, mesh.boundary_labels):
        p, q = mesh.vertices[mesh.edges[eid]]
        if label == "left":
            assert p[0] == 0 and q[0] == 0
        elif label == "right":
            assert p[0] == 1 and q[0] == 1
        elif label == "bottom":
            assert p[1] == 0 and q[1] == 0
        elif label == "top":
            assert p[1] == 1 and q[1] == 1
        else:
            raise AssertionError(f"unexpected label {label}")
    assert set(mesh.boundary_labels) == {"left", "right", "bottom", "top"}


def test_rejects_clockwise_triangle():
    with pytest.raises(MeshError):
        TriMesh([[0, 0], [1, 0], [0, 1]], [[0, 2, 1]])


def test_mesh_arrays_frozen():
    mesh = build_structured_mesh(2)
    with pytest.raises(ValueError):
        mesh.vertices[0, 0] = 5.0


def test_file_round_trip(tmp_path):
    mesh = build_structured_mesh(3)
    path = tmp_path / "mesh.txt"
    write_mesh_file(mesh, path)
    back = read_mesh_file(path)
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.triangles, mesh.triangles)
    assert back.boundary_labels == mesh.boundary_labels
    assert abs(back.h - mesh.h) < 1e-15


def test_file_rejects_nonboundary_label(tmp_path):
    mesh = build_structured_mesh(2)
    path = tmp_path / "mesh.txt"
    write_mesh_file(mesh, path)
    lines = path.read_text().splitlines()
    # relabel an interior edge: vertex 4 is the center, edge (0,4) is interior
    lines.append("0 4 left")
    bad = tmp_path / "bad.txt"
    header = lines[0].split()
    header[2] = str(int(header[2]) + 1)
    lines[0] = " ".join(header)
    bad.write_text("\n".join(lines) + "\n")
    with pytest.raises(MeshError):
        read_mesh_file(bad)


def test_locate_structured():
    mesh = build_structured_mesh(4)
    rng = np.random.default_rng(0)
    pts = rng.random((50, 2))
    found = mesh.locate(pts)
    v0, _, inv, _ = mesh.element_maps()
    for p, t in zip(pts, found):
        r = inv[t] @ (p - v0[t])
        assert r[0] >= -1e-9 and r[1] >= -1e-9 and r.sum() <= 1 + 1e-9
