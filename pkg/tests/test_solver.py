import numpy as np
import pytest

from conservaflux import (apply_dirichlet, assemble, build_dof_map,
                          build_structured_mesh, export_solution_csv,
                          load_example, solve, solve_problem)
from conservaflux.mesh import TriMesh
from conservaflux.problems import ProblemSpec
from conservaflux.solver import SolverError, local_stiffness


def constant_problem(value=1.0, g=None):
    if g is None:
        def g(x, y):
            return np.zeros_like(x)
    return ProblemSpec(
        kappa=lambda x, y: np.full_like(np.asarray(x, dtype=float), value),
        source=lambda x, y: np.ones_like(np.asarray(x, dtype=float)),
        dirichlet={p: g for p in ("left", "right", "bottom", "top")},
    )


def linear_problem():
    def u(x, y):
        return x + y
    return ProblemSpec(
        kappa=lambda x, y: np.ones_like(np.asarray(x, dtype=float)),
        source=lambda x, y: np.zeros_like(np.asarray(x, dtype=float)),
        dirichlet={p: u for p in ("left", "right", "bottom", "top")},
        exact=u,
        exact_grad=lambda x, y: (np.ones_like(x), np.ones_like(x)),
    )


def test_dof_counts_n2():
    mesh = build_structured_mesh(2)
    assert build_dof_map(mesh, 1).n_dofs == 9
    # 9 vertices + 16 edges -> 25 = (2n+1)^2
    assert build_dof_map(mesh, 2).n_dofs == 25
    # 9 + 2*16 + 8 -> 49 = (3n+1)^2
    assert build_dof_map(mesh, 3).n_dofs == 49


@pytest.mark.parametrize("n,k", [(1, 1), (3, 2), (2, 3), (4, 3)])
def test_dof_count_formula(n, k):
    mesh = build_structured_mesh(n)
    assert build_dof_map(mesh, k).n_dofs == (k * n + 1) ** 2


@pytest.mark.parametrize("k", [1, 2, 3])
def test_conformity_shared_dof_coordinates(k):
    # a shared dof index must mean the same physical point from both sides
    from conservaflux import map_to_element, ref_nodes
    mesh = build_structured_mesh(3)
    dm = build_dof_map(mesh, k)
    seen = {}
    for t in range(mesh.n_triangles):
        phys, _, _ = map_to_element(mesh, t, ref_nodes(k))
        for local, g in enumerate(dm.cell_dofs[t]):
            if g in seen:
                assert np.linalg.norm(seen[g] - phys[local]) < 1e-12
            else:
                seen[g] = phys[local]
    assert len(seen) == dm.n_dofs
    for g, p in seen.items():
        assert np.linalg.norm(dm.coords[g] - p) < 1e-12


def test_dof_ordering_vertices_edges_interior():
    mesh = build_structured_mesh(2)
    dm = build_dof_map(mesh, 3)
    kinds = dm.kind
    assert np.all(kinds[:9] == 0)
    assert np.all(kinds[9:9 + 32] == 1)
    assert np.all(kinds[9 + 32:] == 2)


def test_local_stiffness_unit_right_triangle():
    mesh = TriMesh([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]])
    prob = constant_problem()
    k_loc = local_stiffness(mesh, 1, prob)
    expected = np.array([[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]])
    assert np.abs(k_loc[0] - expected).max() < 1e-14


def test_unconstrained_nullspace_and_load_sum():
    mesh = build_structured_mesh(3)
    dm = build_dof_map(mesh, 2)
    a, b = assemble(mesh, dm, constant_problem())
    ones = np.ones(dm.n_dofs)
    assert np.abs(a @ ones).max() < 1e-12
    # partition of unity: sum of load entries equals |domain| for f = 1
    assert abs(b.sum() - 1.0) < 1e-13


def test_assembled_matrix_symmetric():
    mesh = build_structured_mesh(3)
    dm = build_dof_map(mesh, 3)
    prob = load_example(2)
    a, _ = assemble(mesh, dm, prob)
    diff = (a - a.T).tocoo()
    scale = np.abs(a.data).max()
    assert (np.abs(diff.data).max() if diff.nnz else 0.0) < 1e-12 * scale


def test_dirichlet_zero_boundary():
    mesh = build_structured_mesh(3)
    prob = constant_problem()
    u = solve_problem(mesh, 2, prob)
    bnd = u.dofmap.on_boundary
    assert np.abs(u.values[bnd]).max() == 0.0


def test_dirichlet_trace_matches_g():
    # boundary coefficients equal the boundary data at the nodes
    mesh = build_structured_mesh(4)
    prob = load_example(2)
    u = solve_problem(mesh, 2, prob)
    dm = u.dofmap
    bnd = dm.on_boundary
    g = prob.exact(dm.coords[bnd, 0], dm.coords[bnd, 1])
    assert np.abs(u.values[bnd] - g).max() < 1e-14


def test_mixed_bc_neumann_rows_untouched():
    mesh = build_structured_mesh(3)
    dm = build_dof_map(mesh, 1)
    prob = load_example(3)
    a, b = assemble(mesh, dm, prob)
    system = apply_dirichlet(a, b, dm, prob)
    dir_mask = system.dirichlet_mask
    # dirichlet only on left/right
    assert np.array_equal(dir_mask, dm.on_part["left"] | dm.on_part["right"])
    # rows of free dofs keep their assembled values
    free = ~dir_mask
    a_rows = a[free][:, free].toarray()
    c_rows = system.matrix[free][:, free].toarray()
    assert np.abs(a_rows - c_rows).max() == 0.0


def test_dirichlet_on_unlabeled_part_errors():
    mesh = build_structured_mesh(2)
    dm = build_dof_map(mesh, 1)
    prob = ProblemSpec(kappa=lambda x, y: np.ones_like(x),
                       source=lambda x, y: np.zeros_like(x),
                       dirichlet={"inlet": lambda x, y: np.zeros_like(x)})
    a, b = assemble(mesh, dm, prob)
    with pytest.raises(SolverError):
        apply_dirichlet(a, b, dm, prob)


def test_kappa_must_be_positive():
    mesh = build_structured_mesh(2)
    dm = build_dof_map(mesh, 1)
    bad = ProblemSpec(kappa=lambda x, y: x - 0.5,
                      source=lambda x, y: np.zeros_like(x), dirichlet={})
    with pytest.raises(SolverError):
        assemble(mesh, dm, bad)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_linear_solution_exact(k):
    mesh = build_structured_mesh(4)
    u = solve_problem(mesh, k, linear_problem())
    dm = u.dofmap
    exact = dm.coords[:, 0] + dm.coords[:, 1]
    assert np.abs(u.values - exact).max() < 1e-11
    assert u.solve_residual <= 1e-10


def test_cubic_polynomial_exact_for_k3():
    def u(x, y):
        return x ** 3
    prob = ProblemSpec(kappa=lambda x, y: np.ones_like(np.asarray(x, float)),
                       source=lambda x, y: -6.0 * x,
                       dirichlet={p: u for p in ("left", "right", "bottom",
                                                 "top")})
    mesh = build_structured_mesh(3)
    field = solve_problem(mesh, 3, prob)
    dm = field.dofmap
    assert np.abs(field.values - u(dm.coords[:, 0], dm.coords[:, 1])).max() \
        < 1e-11


def test_galerkin_orthogonality_residual():
    mesh = build_structured_mesh(8)
    dm = build_dof_map(mesh, 2)
    prob = load_example(1)
    a, b = assemble(mesh, dm, prob)
    system = apply_dirichlet(a, b, dm, prob)
    u = solve(system)
    r = a @ u.values - b
    free = ~system.dirichlet_mask
    assert np.abs(r[free]).max() <= 1e-9 * np.linalg.norm(b)


def test_h1_error_decreases_second_order_for_k2():
    prob = load_example(1)
    from conservaflux import h1_seminorm_error
    errs = []
    for n in (4, 8, 16):
        mesh = build_structured_mesh(n)
        u = solve_problem(mesh, 2, prob)
        errs.append(h1_seminorm_error(mesh, u, prob.exact_grad))
    rate = np.log2(errs[0] / errs[1]), np.log2(errs[1] / errs[2])
    assert all(abs(r - 2.0) < 0.2 for r in rate)


def test_solve_reports_singular_system():
    import warnings

    import scipy.sparse as sp

    from conservaflux.solver import ConstrainedSystem
    a = sp.csr_matrix(np.array([[1.0, 1.0], [1.0, 1.0]]))
    system = ConstrainedSystem(matrix=a, rhs=np.array([1.0, 0.0]), mesh=None,
                               dofmap=None,
                               dirichlet_mask=np.zeros(2, dtype=bool),
                               dirichlet_values=np.zeros(2))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(SolverError, match="residual"):
            solve(system)


def test_solution_csv_export(tmp_path):
    mesh = build_structured_mesh(2)
    u = solve_problem(mesh, 1, linear_problem())
    path = tmp_path / "solution.csv"
    export_solution_csv(u, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "dof_index,x,y,value"
    assert len(lines) == 1 + u.dofmap.n_dofs
    idx, x, y, v = lines[1].split(",")
    assert float(v) == pytest.approx(float(x) + float(y), abs=1e-12)
