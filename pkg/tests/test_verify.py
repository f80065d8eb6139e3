import numpy as np
import pytest

from conservaflux import (build_cv_index, build_dof_map, build_partitions,
                          build_structured_mesh, compute_lce,
                          convergence_study, elemental_conservation_report,
                          f_l1_norm, h1_seminorm_diff, h1_seminorm_error,
                          load_example, postprocess_all, solve_problem,
                          true_solution_residual, write_convergence_csv,
                          write_lce_csv)
from conservaflux.problems import ProblemSpec


def pipeline(problem, k, n, **kw):
    mesh = build_structured_mesh(n)
    u = solve_problem(mesh, k, problem)
    parts = build_partitions(mesh, k)
    tilde = postprocess_all(mesh, u.dofmap, parts, u, problem, **kw)
    cv = build_cv_index(mesh, u.dofmap, parts)
    return mesh, u, parts, tilde, cv


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


def test_lce_zero_for_exact_linear_flux():
    prob = linear_problem()
    mesh, u, parts, tilde, cv = pipeline(prob, 1, 4)
    for field in (u, tilde):
        rep = compute_lce(mesh, cv, parts, field, prob)
        assert rep.max_abs < 1e-13


def test_lce_contrast_before_and_after_recovery():
    prob = load_example(1)
    mesh, u, parts, tilde, cv = pipeline(prob, 2, 8)
    scale = max(1.0, f_l1_norm(mesh, 2, prob))
    rep_t = compute_lce(mesh, cv, parts, tilde, prob)
    rep_u = compute_lce(mesh, cv, parts, u, prob)
    assert rep_t.max_abs <= 1e-10 * scale
    assert rep_u.max_abs >= 1e-6


def test_lce_report_ordering_and_classes():
    prob = load_example(1)
    mesh, u, parts, tilde, cv = pipeline(prob, 3, 2)
    rep = compute_lce(mesh, cv, parts, tilde, prob)
    dm = u.dofmap
    assert np.all(np.diff(rep.dof_ids) > 0)
    assert np.array_equal(rep.kinds, dm.kind[rep.dof_ids])
    # vertices come before edge dofs, which come before interior dofs
    assert np.all(np.diff(rep.kinds) >= 0)
    assert not np.any(dm.on_boundary[rep.dof_ids])


def test_lce_gauge_invariance():
    prob = load_example(2)
    mesh, u, parts, tilde, cv = pipeline(prob, 2, 4)
    shifted = postprocess_all(mesh, u.dofmap, parts, u, prob, gauge_shift=3.0)
    a = compute_lce(mesh, cv, parts, tilde, prob)
    b = compute_lce(mesh, cv, parts, shifted, prob)
    assert np.abs(a.values - b.values).max() < 1e-12


def test_h1_error_zero_for_interpolated_polynomial():
    # a field whose coefficients interpolate a degree-k polynomial has zero
    # gradient error regardless of kappa
    prob = load_example(2)
    mesh = build_structured_mesh(3)
    for k, poly, grad in (
            (1, lambda x, y: 2 * x - y, lambda x, y: (2 * np.ones_like(x),
                                                      -np.ones_like(x))),
            (2, lambda x, y: x * y + y ** 2,
             lambda x, y: (y, x + 2 * y))):
        dm = build_dof_map(mesh, k)
        from conservaflux.solver import FemField
        field = FemField(mesh, dm, poly(dm.coords[:, 0], dm.coords[:, 1]))
        assert h1_seminorm_error(mesh, field, grad) < 1e-12


def test_h1_diff_ignores_elementwise_constants():
    prob = load_example(1)
    mesh, u, parts, tilde, cv = pipeline(prob, 2, 4)
    shifted = postprocess_all(mesh, u.dofmap, parts, u, prob, gauge_shift=7.0)
    assert h1_seminorm_diff(mesh, tilde, shifted) < 1e-11


def test_h1_error_first_order_for_k1():
    prob = load_example(1)
    errs = []
    for n in (8, 16, 32):
        mesh = build_structured_mesh(n)
        u = solve_problem(mesh, 1, prob)
        errs.append(h1_seminorm_error(mesh, u, prob.exact_grad))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(np.abs(rates - 1.0) < 0.1)


def test_elemental_conservation_examples():
    for ex, k in ((1, 1), (2, 2), (3, 3)):
        prob = load_example(ex)
        mesh, u, parts, tilde, cv = pipeline(prob, k, 4)
        rep = elemental_conservation_report(mesh, parts, tilde, prob)
        assert rep.max_relative <= 1e-10


def test_elemental_conservation_zero_for_sourceless_linear():
    prob = linear_problem()
    mesh, u, parts, tilde, cv = pipeline(prob, 1, 3)
    rep = elemental_conservation_report(mesh, parts, tilde, prob)
    assert rep.max_residual < 1e-13


def test_elemental_conservation_requires_recovered_field():
    prob = load_example(1)
    mesh, u, parts, tilde, cv = pipeline(prob, 1, 2)
    with pytest.raises(TypeError):
        elemental_conservation_report(mesh, parts, u, prob)


def test_conservation_with_manufactured_variable_kappa():
    # symbolic oracle: f derived from -div(kappa grad u) by differentiation
    sympy = pytest.importorskip("sympy")
    x, y = sympy.symbols("x y")
    u_sym = sympy.sin(sympy.pi * x) * sympy.sin(sympy.pi * y) + x ** 2
    kap_sym = 1 + sympy.Rational(3, 10) * sympy.sin(x + 2 * y) \
        + sympy.Rational(1, 5) * x * y
    f_sym = -(sympy.diff(kap_sym * sympy.diff(u_sym, x), x)
              + sympy.diff(kap_sym * sympy.diff(u_sym, y), y))
    u_fn = sympy.lambdify((x, y), u_sym, "numpy")
    k_fn = sympy.lambdify((x, y), kap_sym, "numpy")
    f_fn = sympy.lambdify((x, y), f_sym, "numpy")
    gx_fn = sympy.lambdify((x, y), sympy.diff(u_sym, x), "numpy")
    gy_fn = sympy.lambdify((x, y), sympy.diff(u_sym, y), "numpy")
    prob = ProblemSpec(kappa=k_fn, source=f_fn,
                       dirichlet={p: u_fn for p in ("left", "right",
                                                    "bottom", "top")},
                       exact=u_fn,
                       exact_grad=lambda a, b: (gx_fn(a, b), gy_fn(a, b)))
    mesh, u, parts, tilde, cv = pipeline(prob, 2, 6)
    rep = elemental_conservation_report(mesh, parts, tilde, prob)
    assert rep.max_relative <= 1e-9
    lce = compute_lce(mesh, cv, parts, tilde, prob)
    assert lce.max_abs <= 1e-10 * max(1.0, f_l1_norm(mesh, 2, prob))


def test_global_balance_from_elemental_identities():
    # summing the elemental balances telescopes to the global one
    prob = load_example(2)
    mesh, u, parts, tilde, cv = pipeline(prob, 2, 6)
    from conservaflux.solver import subcell_source_integrals
    f_sub, _ = subcell_source_integrals(mesh, 2, prob)
    boundary_outflow = tilde.boundary_flux.sum()
    assert abs(boundary_outflow - f_sub.sum()) <= 1e-9 * max(1.0, abs(f_sub.sum()))


def test_true_solution_residual_quadrature_limited():
    for ex in (1, 2):
        prob = load_example(ex)
        mesh = build_structured_mesh(8)
        for k in (1, 2, 3):
            r = true_solution_residual(mesh, k, prob)
            assert np.abs(r).max() <= 1e-8


def test_convergence_study_needs_three_levels():
    with pytest.raises(ValueError):
        convergence_study(load_example(1), 1, [4, 8])


def test_convergence_study_exact_flag():
    prob = linear_problem()
    table = convergence_study(prob, 1, [2, 4, 8])
    assert table.exact
    assert np.isnan(table.slope_uh)


def test_convergence_study_rates_k1():
    prob = load_example(1)
    table = convergence_study(prob, 1, [8, 16, 32])
    assert abs(table.slope_uh - 1.0) < 0.15
    assert abs(table.slope_tilde - 1.0) < 0.15
    assert table.slope_diff > 1.8


def test_csv_writers_deterministic(tmp_path):
    prob = load_example(1)
    mesh, u, parts, tilde, cv = pipeline(prob, 2, 4)
    rep = compute_lce(mesh, cv, parts, tilde, prob)
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    write_lce_csv(rep, p1)
    write_lce_csv(rep, p2)
    assert p1.read_bytes() == p2.read_bytes()
    lines = p1.read_text().splitlines()
    assert lines[0] == "dof_index,class,x,y,lce"
    assert len(lines) == 1 + len(rep.dof_ids)

    table = convergence_study(prob, 1, [2, 4, 8])
    c1, c2 = tmp_path / "c.csv", tmp_path / "d.csv"
    write_convergence_csv(table, c1)
    write_convergence_csv(table, c2)
    assert c1.read_bytes() == c2.read_bytes()
    assert c1.read_text().splitlines()[0] == "n,h,err_uh,err_tilde,err_diff"
