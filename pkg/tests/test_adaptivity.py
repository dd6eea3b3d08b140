import itertools

import numpy as np
import pytest

from ahho.adaptivity import (EstimatorParams, estimate, mark_doerfler,
                             prolong, run_ahho)
from ahho.densities import p_laplace
from ahho.hho import RT, STABILIZED, HhoSpace
from ahho.mesh import DIRICHLET, NEUMANN, build_triangulation, refine_uniform
from ahho.poly import (CellBasis, SideBasis, side_quadrature,
                       triangle_quadrature)
from ahho.solver import DiscreteProblem, minimize

B_AFFINE = np.array([1.5, 0.5])


def affine(p):
    return 0.25 + p[..., 0] * B_AFFINE[0] + p[..., 1] * B_AFFINE[1]


def mixed_rule(mid):
    if mid[0] < 1e-12 or mid[1] < 1e-12:
        return DIRICHLET
    return NEUMANN


class AffineFamily:
    """p = 2 manufactured affine benchmark on the unit square."""

    m = 1

    def __init__(self, nref=0):
        self.nref = nref

    def initial_mesh(self):
        mesh = build_triangulation([(0, 0), (1, 0), (1, 1), (0, 1)],
                                   [(0, 1, 2), (0, 2, 3)], mixed_rule)
        for _ in range(self.nref):
            mesh = refine_uniform(mesh)
        return mesh

    def make_problem(self, mesh, k, variant=RT):
        mask = np.zeros((mesh.num_sides, 1), dtype=bool)
        mask[mesh.boundary_sides(DIRICHLET)] = True
        space = HhoSpace(mesh, k, m=1, variant=variant, dirichlet_mask=mask)

        def g(pts, normals):
            return normals @ B_AFFINE

        return DiscreteProblem(space, p_laplace(2.0), g=g,
                               u_dirichlet=affine)


def solve_level(family, k, variant=RT):
    mesh = family.initial_mesh()
    problem = family.make_problem(mesh, k, variant)
    sol = minimize(problem)
    sigma = problem.discrete_stress(sol.u)
    return problem, sol, sigma


# -- estimator -------------------------------------------------------------------

@pytest.mark.parametrize("k", [0, 1])
def test_estimator_vanishes_on_manufactured_affine(k):
    family = AffineFamily(nref=1)
    problem, sol, sigma = solve_level(family, k)
    params = EstimatorParams(eps=(k + 1) / 100)
    est, eta = estimate(problem.space, problem, sol.u, sigma, params)
    assert eta < 1e-10
    for term in (est.volume_residual, est.stress_projection,
                 est.f_oscillation, est.g_oscillation, est.dirichlet_trace,
                 est.interior_jumps, est.side_traces):
        assert np.all(term < 1e-10)


def test_estimator_total_is_sum_and_nonnegative():
    family = AffineFamily(nref=1)
    problem, sol, sigma = solve_level(family, 0)
    # perturb to make the estimator strictly positive
    rng = np.random.default_rng(5)
    u = sol.u.copy()
    u.data[problem.free_idx] += 0.05 * rng.standard_normal(
        len(problem.free_idx))
    params = EstimatorParams(eps=0.01)
    est, eta = estimate(problem.space, problem, u, sigma, params)
    assert eta > 1e-6
    assert np.all(est.total >= -1e-15)
    assert abs(eta - est.total.sum()) < 1e-12 * max(1.0, eta)
    recomposed = (est.volume_residual + est.stress_projection
                  + est.f_oscillation + est.g_oscillation
                  + est.dirichlet_trace + est.interior_jumps
                  + est.side_traces + est.lower_order)
    assert np.allclose(est.total, recomposed)


def test_estimator_terms_match_straight_quadrature():
    """Recompute every term with single-element quadrature loops."""
    family = AffineFamily(nref=1)
    k = 1
    problem, sol, sigma = solve_level(family, k)
    rng = np.random.default_rng(11)
    u = sol.u.copy()
    u.data += 0.1 * rng.standard_normal(problem.space.ndof)
    problem.apply_dirichlet(u)
    params = EstimatorParams(eps=0.25)
    est, eta = estimate(problem.space, problem, u, sigma, params)

    space = problem.space
    mesh = space.mesh
    p = problem.p
    eps = params.eps
    R = space.potential_reconstruction(u)
    areas = mesh.areas()

    # volume residual on a few triangles
    for t in (0, 3, 5):
        corners = mesh.corners()[t]
        rule = triangle_quadrature(corners, 2 * (k + 1) + 2)
        cb = CellBasis(k + 1, corners.mean(axis=0),
                       np.sqrt(areas[t]))
        rv = cb.eval(rule.points) @ R.coeffs[t, 0]
        cbk = CellBasis(k, corners.mean(axis=0), np.sqrt(areas[t]))
        phi = cbk.eval(rule.points)
        gram = phi.T @ (rule.weights[:, None] * phi)
        mom = phi.T @ (rule.weights * rv)
        pr = np.linalg.solve(gram, mom)
        diff = phi @ (pr - u.cells[t, 0])
        oracle = areas[t] ** ((eps * p - p) / 2) \
            * rule.weights @ np.abs(diff) ** p
        assert abs(est.volume_residual[t] - oracle) < 1e-10 * max(1, oracle)

    # interior jump and trace terms on a few triangles
    for t in (1, 4):
        jump_o = 0.0
        trace_o = 0.0
        for j in range(3):
            s = mesh.side_of_triangle[t, j]
            a = mesh.vertices[mesh.sides[s, 0]]
            b = mesh.vertices[mesh.sides[s, 1]]
            srule = side_quadrature(a, b, 2 * k + 2)
            tp, tm = mesh.adjacency[s]
            rv_t = _poly_at(R, t, srule.points)
            if tm >= 0:
                other = tm if tp == t else tp
                rv_o = _poly_at(R, other, srule.points)
                sgn = 1.0 if tp == t else -1.0
                jump_o += srule.weights @ np.abs(rv_t - rv_o) ** p
            sb = SideBasis(k, a, b)
            chi = sb.eval(srule.points)
            uF = chi @ u.sides[s, 0]
            gram = chi.T @ (srule.weights[:, None] * chi)
            mom = chi.T @ (srule.weights * (rv_t - uF))
            proj = chi @ np.linalg.solve(gram, mom)
            trace_o += srule.weights @ np.abs(proj) ** p
        w_side = areas[t] ** ((eps * p + 1 - p) / 2)
        assert abs(est.interior_jumps[t] - w_side * jump_o) \
            < 1e-10 * max(1.0, jump_o)
        assert abs(est.side_traces[t] - w_side * trace_o) \
            < 1e-10 * max(1.0, trace_o)

    # stress projection term
    ed = problem._ed
    for t in (2, 6):
        Gu = problem._grad_values(u)[t]
        dW = problem.density.dw(Gu)
        ops = space.ops
        tau = ops.grad_basis_eval(ed["pts"])[t]
        sig = np.einsum("qid,i->qd", tau, sigma.coeffs[t, 0])
        dmag = np.linalg.norm(sig - dW[:, 0, :], axis=1)
        pp = p / (p - 1)
        oracle = areas[t] ** (eps * pp / 2) * ed["w"][t] @ dmag ** pp
        assert abs(est.stress_projection[t] - oracle) < 1e-10 * max(1, oracle)


def _poly_at(poly, t, pts):
    return poly.at_points_of(np.array([t]), pts[None])[0, :, 0]


def test_estimator_rejects_bad_variant():
    family = AffineFamily()
    problem, sol, sigma = solve_level(family, 0)
    params = EstimatorParams(eps=0.5, kind="fhm")
    with pytest.raises(ValueError):
        estimate(problem.space, problem, sol.u, sigma, params)


def test_estimator_params_validation():
    with pytest.raises(ValueError):
        EstimatorParams(eps=0.5, theta=1.5).validate(0, 2.0, RT)
    with pytest.raises(ValueError):
        EstimatorParams(eps=2.0).validate(0, 2.0, RT)  # eps > k+1
    with pytest.raises(ValueError):
        EstimatorParams(eps=0.8).validate(0, 4.0, STABILIZED)  # > (k+1)/(p-1)
    EstimatorParams(eps=1.0).validate(0, 2.0, RT)
    with pytest.warns(UserWarning):
        EstimatorParams(eps=0.0).validate(0, 2.0, RT)


# -- marking -----------------------------------------------------------------------

def test_doerfler_examples():
    marked = mark_doerfler([4.0, 3.0, 2.0, 1.0], 0.5)
    assert set(marked) == {0, 1}
    marked = mark_doerfler([1.0, 4.0, 2.0, 3.0], 1e-9)
    assert set(marked) == {1}
    assert len(mark_doerfler(np.zeros(5), 0.5)) == 0


def test_doerfler_feasibility_and_ties():
    vals = np.array([2.0, 2.0, 2.0, 2.0])
    marked = mark_doerfler(vals, 0.5)
    assert vals[marked].sum() >= 0.5 * vals.sum()
    assert set(marked) == {0, 1}  # ties broken by index


def brute_force_min_cardinality(values, theta):
    total = values.sum()
    n = len(values)
    for size in range(0, n + 1):
        for combo in itertools.combinations(range(n), size):
            if values[list(combo)].sum() >= theta * total:
                return size
    return n


def test_doerfler_minimal_cardinality_oracle():
    rng = np.random.default_rng(17)
    for trial in range(1000):
        n = int(rng.integers(1, 13))
        values = rng.random(n) ** 2
        theta = float(rng.uniform(0.05, 0.95))
        marked = mark_doerfler(values, theta)
        assert values[marked].sum() >= theta * values.sum() - 1e-12
        assert len(marked) == brute_force_min_cardinality(values, theta)


# -- prolongation -------------------------------------------------------------------

def test_prolong_constant():
    family = AffineFamily()
    coarse_mesh = family.initial_mesh()
    problem = family.make_problem(coarse_mesh, 1)
    v = problem.space.interpolate(lambda p: np.full(len(p), 2.5))
    fine_mesh = coarse_mesh.refine_uniform()
    fine_prob = family.make_problem(fine_mesh, 1)
    w = prolong(fine_prob.space, v)
    assert np.allclose(w.cells[:, :, 0], 2.5, atol=1e-10)
    assert np.allclose(w.cells[:, :, 1:], 0.0, atol=1e-10)
    assert np.allclose(w.sides[:, :, 0], 2.5, atol=1e-10)


@pytest.mark.parametrize("k", [0, 1])
def test_prolong_roundtrip_for_continuous_pk1(k):
    rng = np.random.default_rng(23)
    family = AffineFamily()
    coarse_mesh = family.initial_mesh()
    cprob = family.make_problem(coarse_mesh, k)
    cb = CellBasis(k + 1, (0.5, 0.5), 1.0)
    c = rng.standard_normal(cb.dim)
    fn = lambda p: cb.eval(p.reshape(-1, 2)) @ c
    v = cprob.space.interpolate(fn, degree=2 * (k + 1) + 4)
    fine_mesh = coarse_mesh.refine_uniform()
    fprob = family.make_problem(fine_mesh, k)
    w = prolong(fprob.space, v)
    w_direct = fprob.space.interpolate(fn, degree=2 * (k + 1) + 4)
    assert np.max(np.abs(w.data - w_direct.data)) < 1e-9


def test_prolong_rejects_non_nested():
    family = AffineFamily()
    mesh_a = family.initial_mesh()
    mesh_b = family.initial_mesh()
    pa = family.make_problem(mesh_a, 0)
    pb = family.make_problem(mesh_b, 0)
    v = pa.space.zero_vector()
    with pytest.raises(ValueError):
        prolong(pb.space, v)


# -- driver ------------------------------------------------------------------------

def test_run_ahho_manufactured_stops_immediately():
    family = AffineFamily(nref=1)
    records = run_ahho(family, k=0, params=EstimatorParams(eps=0.01),
                       max_ndof=10000, max_levels=5)
    assert len(records) == 1
    assert records[0].estimator < 1e-10
    assert records[0].converged


def test_run_ahho_uniform_ndof_growth():
    class Forced(AffineFamily):
        def make_problem(self, mesh, k, variant=RT):
            prob = super().make_problem(mesh, k, variant)
            # non-resolvable load makes the estimator positive
            prob_new = DiscreteProblem(
                prob.space, prob.density,
                f=lambda p: np.sin(3 * p[:, 0]) * p[:, 1],
                g=prob.g, u_dirichlet=prob.u_dirichlet)
            return prob_new

    records = run_ahho(Forced(), k=0, params=EstimatorParams(eps=0.01),
                       max_ndof=2000, max_levels=6, mode="uniform")
    assert len(records) >= 3
    ratios = [records[i + 1].ntriangles / records[i].ntriangles
              for i in range(len(records) - 1)]
    assert all(r == 4.0 for r in ratios)
    ndofs = [r.ndof for r in records]
    assert all(n2 > n1 for n1, n2 in zip(ndofs, ndofs[1:]))
    # dof count quadruples asymptotically
    assert 3.4 < ndofs[-1] / ndofs[-2] <= 4.2


def test_energy_monotone_under_refinement_via_prolongation():
    """Nested-space monotonicity: E_{l+1}(u_{l+1}) <= E_{l+1}(I J u_l)."""
    family = AffineFamily()

    class Perturbed(AffineFamily):
        def make_problem(self, mesh, k, variant=RT):
            base = super().make_problem(mesh, k, variant)
            return DiscreteProblem(
                base.space, p_laplace(4.0),
                f=lambda p: np.sin(2 * p[:, 0]) + p[:, 1],
                u_dirichlet=affine)

    fam = Perturbed()
    mesh = fam.initial_mesh()
    prev = None
    for level in range(3):
        problem = fam.make_problem(mesh, 0)
        init = (prolong(problem.space, prev.u, problem)
                if prev else problem.initial_guess())
        if prev is not None:
            e_prolonged = problem.energy(init)
        sol = minimize(problem, init)
        assert sol.converged
        if prev is not None:
            assert sol.energy <= e_prolonged + 1e-10
        prev = sol
        mesh = mesh.refine_uniform()


def test_prolonged_energy_close_on_benchmark_levels():
    """On benchmark meshes past the coarsest levels, the prolonged iterate
    carries nearly the coarse energy (10% regression band)."""
    from ahho.benchmarks import get_benchmark
    bench = get_benchmark("p-laplace-lshape")
    mesh = bench.initial_mesh().refine_uniform().refine_uniform()
    coarse = bench.make_problem(mesh, 0)
    sol_c = minimize(coarse)
    fine_mesh = mesh.refine_uniform()
    fine = bench.make_problem(fine_mesh, 0)
    init = prolong(fine.space, sol_c.u, fine)
    e_prolonged = fine.energy(init)
    assert np.isfinite(e_prolonged)
    assert abs(e_prolonged - sol_c.energy) <= 0.1 * abs(sol_c.energy)
    sol_f = minimize(fine, init)
    assert sol_f.converged
    assert sol_f.energy <= e_prolonged + 1e-10


def test_stabilization_bounded_by_indicator_terms():
    """s_K(v;v) is controlled by the volume-residual and trace terms of
    the indicator (recorded regression constant)."""
    rng = np.random.default_rng(71)
    family = AffineFamily(nref=1)
    mesh = family.initial_mesh()
    problem = family.make_problem(mesh, 1, variant=STABILIZED)
    space = problem.space
    params = EstimatorParams(eps=1e-9)  # weights closest to the raw terms
    sigma = problem.discrete_stress(problem.initial_guess())
    consts = []
    h_t = space.ops.h_t
    for _ in range(20):
        v = space.zero_vector()
        v.data[:] = rng.standard_normal(space.ndof)
        problem.apply_dirichlet(v)
        _, s_elem, _ = space.stabilization(v, v, problem.p,
                                           return_parts=True)
        est, _ = estimate(space, problem, v, sigma, params)
        # eps ~ 0: volume term carries |T|^{-p/2} = h^-p, traces h^{1-p}
        control = (est.volume_residual * h_t ** (-2.0)
                   + est.side_traces * h_t ** (-2.0)) + 1e-30
        consts.append(np.max(s_elem / control))
    assert max(consts) < 50.0, max(consts)


def test_stabilization_decays_cleanly_for_quadratic_growth():
    """p = 2 stabilization is a hard quadratic penalty: along uniform
    refinements of the optimal-design benchmark, s_l(u_l;u_l) contracts by
    the full factor 4 per level."""
    from ahho.benchmarks import get_benchmark
    bench = get_benchmark("odp-lshape")
    recs = run_ahho(bench, 0, EstimatorParams(eps=0.01), max_ndof=2000,
                    max_levels=5, mode="uniform", variant=STABILIZED)
    ss = [r.stab for r in recs]
    assert len(ss) >= 4
    for a, b in zip(ss, ss[1:]):
        assert b <= 0.27 * a


def test_fhm_adaptive_concentrates_at_origin():
    from ahho.benchmarks import get_benchmark
    bench = get_benchmark("fhm-rect")
    recs = run_ahho(bench, 0,
                    EstimatorParams(eps=0.01, kind=bench.indicator_kind),
                    max_ndof=2500, max_levels=20, mode="adaptive")
    assert all(r.converged for r in recs)
    errs = [abs(r.energy - 0.88137023556) for r in recs]
    assert all(b < a for a, b in zip(errs, errs[1:]))
    mesh = recs[-1].problem.space.mesh
    h_t, _ = mesh.mesh_size()
    at0 = [t for t in range(mesh.num_triangles)
           if np.min(np.hypot(*mesh.corners()[t].T)) < 1e-12]
    assert min(h_t[t] for t in at0) < max(h_t) / 4


def test_two_well_adaptive_concentrates_at_interface():
    from ahho.benchmarks import get_benchmark
    bench = get_benchmark("two-well-rect")
    recs = run_ahho(bench, 0,
                    EstimatorParams(eps=0.01, kind=bench.indicator_kind),
                    max_ndof=2500, max_levels=25, mode="adaptive")
    mesh = recs[-1].problem.space.mesh
    cent = mesh.centroids()
    rho = np.abs((3 * (cent[:, 0] - 1) + 2 * cent[:, 1]) / np.sqrt(13))
    h_t, _ = mesh.mesh_size()
    finest = h_t < np.median(h_t)
    assert np.median(rho[finest]) < 0.6 * np.median(rho)


def test_zero_estimator_implies_consistency():
    """eta = 0 forces vanishing potential jumps, sigma = DW(G u) element
    by element, and vanishing data oscillations (manufactured case)."""
    family = AffineFamily(nref=1)
    problem, sol, sigma = solve_level(family, 1)
    space = problem.space
    ops = space.ops
    mesh = space.mesh
    R = space.potential_reconstruction(sol.u)
    tplus = mesh.adjacency[:, 0]
    interior = mesh.interior_sides()
    r_plus = R.at_points_of(tplus[interior], ops.side_pts[interior])
    r_minus = R.at_points_of(mesh.adjacency[interior, 1],
                             ops.side_pts[interior])
    assert np.max(np.abs(r_plus - r_minus)) < 1e-9
    ed = problem._ed
    tau = ops.grad_basis_eval(ed["pts"])
    sig_vals = np.einsum("tqid,tmi->tqmd", tau, sigma.coeffs)
    dW = problem.density.dw(problem._grad_values(sol.u))
    assert np.max(np.abs(sig_vals - dW)) < 1e-9
    from ahho.diagnostics import data_oscillations
    osc_f, osc_g, osc_z = data_oscillations(problem)
    assert osc_f == 0.0 and osc_g < 1e-12 and osc_z == 0.0
