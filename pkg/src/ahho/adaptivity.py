"""Refinement indicators, Doerfler marking, prolongation, and the
adaptive solve-estimate-mark-refine driver."""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .hho import RT, STABILIZED, _as_components
from .poly import reference_segment_rule
from .solver import eval_neumann, minimize

STANDARD = "standard"
TWO_WELL = "two-well"
FHM_VARIANT = "fhm"


@dataclass
class EstimatorParams:
    eps: float
    theta: float = 0.5
    kind: str = STANDARD        # standard | two-well | fhm

    def validate(self, k, p, variant):
        if not (0 < self.theta < 1):
            raise ValueError("bulk parameter requires 0 < theta < 1")
        limit = k + 1.0
        if variant == STABILIZED:
            limit = min(k + 1.0, (k + 1.0) / (p - 1.0))
        if self.eps == 0.0:
            warnings.warn("eps = 0 is outside the convergent range; "
                          "accepted for experiments only")
        elif not (0 < self.eps <= limit + 1e-12):
            raise ValueError(
                f"indicator exponent requires 0 < eps <= {limit}")


@dataclass
class ElementEstimate:
    """Per-triangle indicator with its term breakdown (all >= 0)."""
    total: np.ndarray
    volume_residual: np.ndarray
    stress_projection: np.ndarray
    f_oscillation: np.ndarray
    g_oscillation: np.ndarray
    dirichlet_trace: np.ndarray
    interior_jumps: np.ndarray
    side_traces: np.ndarray
    lower_order: np.ndarray


def estimate(space, problem, u, sigma, params):
    """Per-element refinement indicator and its total.

    Implements the residual functional with |T|-power weights
    (eps*p - p)/2, eps*p'/2, p'/2, 1/2 and (eps*p + 1 - p)/2 on the
    volume residual, stress projection defect, data oscillations, and
    side terms; the two-well variant adds |T| times the projection
    defect of the lower-order data, the component-map variant replaces
    the Dirichlet terms by componentwise boundary residuals.
    """
    mesh = space.mesh
    ops = space.ops
    m = space.m
    k = space.k
    p = problem.p
    pp = p / (p - 1.0)
    eps = params.eps
    if params.kind == FHM_VARIANT and m < 2:
        raise ValueError("componentwise indicator needs a vector problem")

    area = ops.area
    R = space.potential_reconstruction(u)

    # rules exact for the p-th powers of the polynomial residuals
    pdeg = int(np.ceil(p)) * (k + 1)
    e_pts, e_w = ops._volume_rule(pdeg)
    phi_k_e = ops.cell_eval(ops.exps_k, e_pts)
    t_e, w_e = reference_segment_rule(pdeg)
    chi_e = t_e[:, None] ** np.arange(k + 1)
    d_all = (mesh.vertices[mesh.sides[:, 1]] - mesh.vertices[mesh.sides[:, 0]])
    spts_e = ops.s_mid[:, None, :] + t_e[None, :, None] * d_all[:, None, :]

    # volume residual |T|^((eps*p - p)/2) || Pi_T^k (R u - u_T) ||_p^p
    r_vol = R.at_points(ops.vol_pts)
    mom = np.einsum("tq,tqi,tqm->tim", ops.vol_w, ops.phi_k_vol, r_vol)
    r_proj = np.linalg.solve(ops.gram_k, mom).transpose(0, 2, 1)
    if space.variant == STABILIZED:
        # the polytopal indicator uses the unprojected volume residual
        diff_vals = (R.at_points(e_pts)
                     - np.einsum("tmi,tqi->tqm", u.cells, phi_k_e))
    else:
        diff = r_proj - u.cells
        diff_vals = np.einsum("tmi,tqi->tqm", diff, phi_k_e)
    mag = np.sqrt(np.einsum("tqm,tqm->tq", diff_vals, diff_vals))
    vol_term = area ** ((eps * p - p) / 2.0) \
        * np.einsum("tq,tq->t", e_w, mag ** p)

    # stress projection defect |T|^(eps*p'/2) ||sigma - DW(G u)||_{p'}^{p'}
    if params.kind == FHM_VARIANT:
        stress_term = np.zeros(mesh.num_triangles)
    else:
        ed = problem._ed
        Gu = problem._grad_values(u)
        dW = problem.density.dw(Gu)
        tau = ops.grad_basis_eval(ed["pts"])
        sig_vals = np.einsum("tqid,tmi->tqmd", tau, sigma.coeffs)
        dmag = np.sqrt(np.einsum("tqmd,tqmd->tq", sig_vals - dW,
                                 sig_vals - dW))
        stress_term = area ** (eps * pp / 2.0) \
            * np.einsum("tq,tq->t", ed["w"], dmag ** pp)

    # data oscillations
    f_term = np.zeros(mesh.num_triangles)
    if problem.f is not None:
        pts, w = ops._volume_rule(problem.data_degree)
        fv = _as_components(problem.f(pts.reshape(-1, 2)), m)
        fv = fv.reshape(pts.shape[0], pts.shape[1], m)
        phi = ops.cell_eval(ops.exps_k, pts)
        momf = np.einsum("tq,tqi,tqm->tim", w, phi, fv)
        gram = np.einsum("tq,tqi,tqj->tij", w, phi, phi)
        pif = np.linalg.solve(gram, momf).transpose(0, 2, 1)
        resid = fv - np.einsum("tmi,tqi->tqm", pif, phi)
        magf = np.sqrt(np.einsum("tqm,tqm->tq", resid, resid))
        f_term = area ** (pp / 2.0) * np.einsum("tq,tq->t", w, magf ** pp)

    g_term = np.zeros(mesh.num_triangles)
    neumann = mesh.boundary_sides("neumann")
    if problem.g is not None and len(neumann):
        t_ref, w_ref = reference_segment_rule(problem.data_degree)
        chi = t_ref[:, None] ** np.arange(k + 1)
        d = (mesh.vertices[mesh.sides[neumann, 1]]
             - mesh.vertices[mesh.sides[neumann, 0]])
        spts = (ops.s_mid[neumann][:, None, :]
                + t_ref[None, :, None] * d[:, None, :])
        gv = eval_neumann(problem.g, spts, mesh.normals[neumann], m)
        gram_s = np.einsum("q,qi,qj->ij", w_ref, chi, chi)
        mom_g = np.einsum("q,qi,sqm->smi", w_ref, chi, gv)
        pig = np.linalg.solve(gram_s, mom_g[..., None])[..., 0]
        resid = gv - np.einsum("smi,qi->sqm", pig, chi)
        magg = np.sqrt(np.einsum("sqm,sqm->sq", resid, resid))
        osc_per_side = ops.h_f[neumann] * np.einsum(
            "q,sq->s", w_ref, magg ** pp)
        per_side_full = np.zeros(mesh.num_sides)
        per_side_full[neumann] = osc_per_side / ops.h_f[neumann]
        # assign to the adjacent triangle with weight |T|^(1/2) * int ...
        g_term = area ** 0.5 * (per_side_full[ops.sot]
                                * ops.h_f[ops.sot]).sum(axis=1)

    # side terms evaluated at the exact-degree side points
    spts_e_t = spts_e[ops.sot]                            # (nt, 3, nqe, 2)
    r_side = R.at_points(spts_e_t)                        # (nt, 3, nqe, m)
    h_side = ops.h_f[ops.sot]
    w_phys = h_side[..., None] * w_e

    # interior jumps || [R u]_F ||_p^p, counted once per adjacent triangle
    tplus = mesh.adjacency[:, 0]
    tminus = mesh.adjacency[:, 1]
    r_plus = R.at_points_of(tplus, spts_e)                # (ns, nqe, m)
    interior = mesh.interior_sides()
    jump_per_side = np.zeros(mesh.num_sides)
    if len(interior):
        r_minus = R.at_points_of(tminus[interior], spts_e[interior])
        jmp = r_plus[interior] - r_minus
        magj = np.sqrt(np.einsum("sqm,sqm->sq", jmp, jmp))
        jump_per_side[interior] = (ops.h_f[interior][:, None] * w_e
                                   * magj ** p).sum(axis=1)
    jump_term_sides = jump_per_side[ops.sot].sum(axis=1)

    # trace term || Pi_F^k ((R u)|_T - u_F) ||_p^p over all sides of T;
    # the polytopal variant drops the projection.  The projection uses the
    # exact geometric side rule; its p-th power the exact-degree points.
    uF_e = np.einsum("smn,qn->sqm", u.sides, chi_e)[ops.sot]
    if space.variant == STABILIZED:
        trace_vals = r_side - uF_e
    else:
        r_side_g = R.at_points(ops.side_pts_t)
        uF_g = np.einsum("smn,qn->sqm", u.sides, ops.chi_ref)[ops.sot]
        mom_tr = np.einsum("q,qi,tjqm->tjim", ops.side_wref, ops.chi_ref,
                           r_side_g - uF_g)
        coef_tr = np.linalg.solve(ops.gram_side_ref, mom_tr)
        trace_vals = np.einsum("tjim,qi->tjqm", coef_tr, chi_e)
    magt = np.sqrt(np.einsum("tjqm,tjqm->tjq", trace_vals, trace_vals))
    trace_term_sides = np.einsum("tjq,tjq->t", w_phys, magt ** p)

    # Dirichlet / boundary-condition residual terms
    t_data, w_data = reference_segment_rule(problem.data_degree)
    spts_data = (ops.s_mid[:, None, :]
                 + t_data[None, :, None] * d_all[:, None, :])
    r_plus_data = R.at_points_of(tplus, spts_data)        # (ns, nqd, m)
    w_data_phys = ops.h_f[:, None] * w_data

    dir_per_side = np.zeros(mesh.num_sides)
    if params.kind == FHM_VARIANT:
        for label, comp in (("gamma1", 0), ("gamma2", 1)):
            sel = mesh.boundary_sides(label)
            if len(sel) == 0:
                continue
            vals = r_plus_data[sel][:, :, comp]
            dir_per_side[sel] = (w_data_phys[sel] * np.abs(vals) ** p
                                 ).sum(axis=1)
        sel = mesh.boundary_sides("gamma3")
        if len(sel) and problem.u_dirichlet is not None:
            ud = _as_components(problem.u_dirichlet(
                spts_data[sel].reshape(-1, 2)), m)
            ud = ud.reshape(len(sel), len(t_data), m)
            diffd = r_plus_data[sel] - ud
            magd = np.sqrt(np.einsum("sqm,sqm->sq", diffd, diffd))
            dir_per_side[sel] = (w_data_phys[sel] * magd ** p).sum(axis=1)
    else:
        sel = mesh.boundary_sides("dirichlet")
        if len(sel) and problem.u_dirichlet is not None:
            ud = _as_components(problem.u_dirichlet(
                spts_data[sel].reshape(-1, 2)), m)
            ud = ud.reshape(len(sel), len(t_data), m)
            diffd = r_plus_data[sel] - ud
            magd = np.sqrt(np.einsum("sqm,sqm->sq", diffd, diffd))
            dir_per_side[sel] = (w_data_phys[sel] * magd ** p).sum(axis=1)
    dir_term_sides = dir_per_side[ops.sot].sum(axis=1)

    side_weight = area ** ((eps * p + 1 - p) / 2.0)
    dirichlet_term = side_weight * dir_term_sides
    jump_term = side_weight * jump_term_sides
    trace_term = side_weight * trace_term_sides

    lower_term = np.zeros(mesh.num_triangles)
    if params.kind == TWO_WELL and problem.l2_weight > 0.0:
        pts, w = ops._volume_rule(problem.data_degree)
        zv = _as_components(problem.l2_data(pts.reshape(-1, 2)), m)
        zv = zv.reshape(pts.shape[0], pts.shape[1], m)
        phi = ops.cell_eval(ops.exps_k, pts)
        momz = np.einsum("tq,tqi,tqm->tim", w, phi, zv)
        gram = np.einsum("tq,tqi,tqj->tij", w, phi, phi)
        piz = np.linalg.solve(gram, momz).transpose(0, 2, 1)
        residz = zv - np.einsum("tmi,tqi->tqm", piz, phi)
        magz = np.sqrt(np.einsum("tqm,tqm->tq", residz, residz))
        lower_term = area * np.einsum("tq,tq->t", w, magz ** 2)

    total = (vol_term + stress_term + f_term + g_term + dirichlet_term
             + jump_term + trace_term + lower_term)
    est = ElementEstimate(total, vol_term, stress_term, f_term, g_term,
                          dirichlet_term, jump_term, trace_term, lower_term)
    return est, float(total.sum())


def mark_doerfler(values, theta):
    """Minimal-cardinality set M with sum over M >= theta * total.

    Greedy on descending values is optimal for this objective; ties are
    broken by the lower triangle index for determinism.
    """
    if not (0 < theta < 1):
        raise ValueError("requires 0 < theta < 1")
    values = np.asarray(values, dtype=float)
    total = values.sum()
    if total <= 0.0:
        return np.empty(0, dtype=np.int64)
    order = np.lexsort((np.arange(len(values)), -values))
    csum = np.cumsum(values[order])
    count = int(np.searchsorted(csum, theta * total - 1e-14 * total) + 1)
    return np.sort(order[:count])


def prolong(fine_space, coarse_solution, problem=None):
    """Initial guess on the refined mesh: I_{l+1} (J_l u_l), with the
    constrained dofs overwritten by the fine-level Dirichlet values."""
    coarse_space = coarse_solution.space
    if fine_space.mesh.previous is not coarse_space.mesh:
        raise ValueError("fine mesh is not a refinement of the coarse mesh")
    J = coarse_space.companion(coarse_solution)
    mesh = fine_space.mesh
    ops = fine_space.ops
    parent = mesh.parent

    v = fine_space.zero_vector()
    # cell projections from the coarse polynomial
    pts, w = ops._volume_rule(2 * (coarse_space.k + 3))
    vals = J.at_points_of(parent, pts)
    phi = ops.cell_eval(ops.exps_k, pts)
    mom = np.einsum("tq,tqi,tqm->tim", w, phi, vals)
    gram = np.einsum("tq,tqi,tqj->tij", w, phi, phi)
    v.cells[:] = np.linalg.solve(gram, mom).transpose(0, 2, 1)

    # side projections: evaluate through T_plus's coarse ancestor
    t_ref, w_ref = reference_segment_rule(2 * (coarse_space.k + 3))
    chi = t_ref[:, None] ** np.arange(fine_space.k + 1)
    d = (mesh.vertices[mesh.sides[:, 1]] - mesh.vertices[mesh.sides[:, 0]])
    spts = ops.s_mid[:, None, :] + t_ref[None, :, None] * d[:, None, :]
    anc = parent[mesh.adjacency[:, 0]]
    svals = J.at_points_of(anc, spts)
    gram_s = np.einsum("q,qi,qj->ij", w_ref, chi, chi)
    mom_s = np.einsum("q,qi,sqm->smi", w_ref, chi, svals)
    v.sides[:] = np.linalg.solve(gram_s, mom_s[..., None])[..., 0]

    if problem is not None:
        problem.apply_dirichlet(v)
    return v


@dataclass
class LevelRecord:
    """Raw per-level output of the driver; diagnostics enrich it."""
    level: int
    ndof: int
    ntriangles: int
    energy: float
    estimator: float
    stab: Optional[float]
    solution: object
    problem: object
    estimates: ElementEstimate
    seconds: float
    converged: bool


def run_ahho(family, k, params, max_ndof=20000, max_levels=30,
             mode="adaptive", settings=None, variant=RT, callback=None):
    """Adaptive (or uniform) solve-estimate-mark-refine loop.

    ``family`` supplies the initial mesh and per-mesh discrete problems:
    it must implement ``initial_mesh()`` and ``make_problem(mesh, k,
    variant)`` returning a DiscreteProblem.  Returns a list of
    LevelRecord, one per computed level.
    """
    if mode not in ("adaptive", "uniform"):
        raise ValueError(f"unknown mode {mode!r}")
    mesh = family.initial_mesh()
    records = []
    prev_solution = None
    for level in range(max_levels):
        t0 = time.perf_counter()
        ndof_next = family.m * (mesh.num_triangles * (k + 1) * (k + 2) // 2
                                + mesh.num_sides * (k + 1))
        if ndof_next > max_ndof and level > 0:
            break
        problem = family.make_problem(mesh, k, variant)
        params.validate(k, problem.p, variant)
        space = problem.space
        if prev_solution is not None:
            initial = prolong(space, prev_solution.u, problem)
        else:
            initial = problem.initial_guess()
        sol = minimize(problem, initial, settings)
        sigma = problem.discrete_stress(sol.u)
        est, eta = estimate(space, problem, sol.u, sigma, params)
        stab = None
        if variant == STABILIZED:
            stab = space.stabilization(sol.u, sol.u, problem.p)
        rec = LevelRecord(level, space.ndof, mesh.num_triangles, sol.energy,
                          eta, stab, sol, problem, est,
                          time.perf_counter() - t0, sol.converged)
        records.append(rec)
        if callback is not None:
            callback(rec)
        if not sol.converged:
            break
        if eta <= 1e-16 * (1.0 + abs(sol.energy)):
            break  # estimator zero: the data is resolved exactly
        if mode == "uniform":
            mesh = mesh.refine_uniform()
        else:
            marked = mark_doerfler(est.total, params.theta)
            if len(marked) == 0:
                break
            mesh = mesh.refine_nvb(marked)
        prev_solution = sol
    return records
