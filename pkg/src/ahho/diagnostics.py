"""Error norms, certified energy bounds, extrapolation, rate fits, and
the conforming Courant P1 probe."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .densities import UnsupportedConjugate
from .hho import STABILIZED, _as_components, _batch_eval
from .poly import reference_segment_rule, reference_triangle_rule
from .solver import SolverSettings, _lbfgs, _newton, eval_neumann


@dataclass
class ExactSolution:
    """Closures of the known minimizer; any field may be None."""
    u: Optional[Callable] = None
    grad_u: Optional[Callable] = None
    sigma: Optional[Callable] = None
    energy: Optional[float] = None

    def check_consistency(self, density, points):
        """sigma must equal DW(grad u) where both closures exist."""
        if self.grad_u is None or self.sigma is None:
            return 0.0
        g = np.asarray(self.grad_u(points), dtype=float)
        if g.ndim == 2:
            g = g[:, None, :]
        s = np.asarray(self.sigma(points), dtype=float)
        if s.ndim == 2:
            s = s[:, None, :]
        return float(np.max(np.abs(density.dw(g) - s)))


@dataclass
class LevelReport:
    level: int
    ndof: int
    ntriangles: int
    energy: float
    estimator: float
    stab: Optional[float] = None
    err_energy: Optional[float] = None
    err_grad: Optional[float] = None
    err_stress: Optional[float] = None
    err_vol: Optional[float] = None
    leb: Optional[float] = None
    leb_no_osc: Optional[float] = None
    rhs: Optional[float] = None
    seconds: Optional[float] = None
    converged: bool = True


def _exact_grad_values(exact, pts, m):
    g = np.asarray(exact.grad_u(pts.reshape(-1, 2)), dtype=float)
    if g.ndim == 2:
        g = g[:, None, :]
    return g.reshape(pts.shape[:-1] + (m, 2))


def _graded_corner_rule(corners, v_loc, degree, levels=36):
    """Quadrature on a triangle with an integrable point singularity at
    local vertex ``v_loc``: dyadic grading toward the corner restores the
    accuracy a fixed-degree rule loses there."""
    ref_pts, ref_w = reference_triangle_rule(degree)

    def rule_on(tri):
        p0 = tri[0]
        jac = np.stack([tri[1] - p0, tri[2] - p0], axis=1)
        det = abs(np.linalg.det(jac))
        return ref_pts @ jac.T + p0, ref_w * det

    order = [v_loc, (v_loc + 1) % 3, (v_loc + 2) % 3]
    tri = np.asarray(corners, dtype=float)[order]
    pts_all, w_all = [], []
    for _ in range(levels):
        m01 = 0.5 * (tri[0] + tri[1])
        m02 = 0.5 * (tri[0] + tri[2])
        m12 = 0.5 * (tri[1] + tri[2])
        for child in ((m01, tri[1], m12), (m02, m12, tri[2]),
                      (m01, m12, m02)):
            p, w = rule_on(np.array(child))
            pts_all.append(p)
            w_all.append(w)
        tri = np.array([tri[0], m01, m02])
    p, w = rule_on(tri)
    pts_all.append(p)
    w_all.append(w)
    return np.vstack(pts_all), np.concatenate(w_all)


def _singular_triangles(mesh, singular_point):
    """Triangles with a vertex at the singular point, with its local index."""
    out = []
    for t in range(mesh.num_triangles):
        for loc in range(3):
            v = mesh.vertices[mesh.triangles[t, loc]]
            if np.hypot(v[0] - singular_point[0],
                        v[1] - singular_point[1]) < 1e-12:
                out.append((t, loc))
                break
    return out


def error_norms(problem, u, exact, degree=None, singular_point=None):
    """(gradient error, stress error, volume L2 error) against the exact
    solution; missing exact fields yield None entries.

    Elements touching ``singular_point`` are integrated with a dyadically
    graded corner rule; elsewhere a fixed elevated-degree rule applies.
    """
    space = problem.space
    ops = space.ops
    mesh = space.mesh
    m = space.m
    p = problem.p
    pp = p / (p - 1.0)
    degree = degree or (problem.energy_degree + 4)
    pts, w = ops._volume_rule(degree)

    g = space.gradient_reconstruction(u) if exact.grad_u is not None else None
    grad_pp = stress_pp = vol_pp = None
    if exact.grad_u is not None:
        tau = ops.grad_basis_eval(pts)
        Gu = np.einsum("tqid,tmi->tqmd", tau, g.coeffs)
        ge = _exact_grad_values(exact, pts, m)
        diff = ge - Gu
        mag = np.sqrt(np.einsum("tqmd,tqmd->tq", diff, diff))
        grad_pp = np.einsum("tq,tq->t", w, mag ** p)
        if exact.sigma is not None:
            se = np.asarray(exact.sigma(pts.reshape(-1, 2)), dtype=float)
            if se.ndim == 2:
                se = se[:, None, :]
            se = se.reshape(pts.shape[0], pts.shape[1], m, 2)
            dW = problem.density.dw(Gu)
            dmag = np.sqrt(np.einsum("tqmd,tqmd->tq", se - dW, se - dW))
            stress_pp = np.einsum("tq,tq->t", w, dmag ** pp)
    if exact.u is not None:
        ue = _as_components(exact.u(pts.reshape(-1, 2)), m)
        ue = ue.reshape(pts.shape[0], pts.shape[1], m)
        phi = ops.cell_eval(ops.exps_k, pts)
        uT = np.einsum("tmi,tqi->tqm", u.cells, phi)
        dmag = np.einsum("tqm,tqm->tq", ue - uT, ue - uT)
        vol_pp = np.einsum("tq,tq->t", w, dmag)

    if singular_point is not None:
        corners = mesh.corners()
        for t, loc in _singular_triangles(mesh, singular_point):
            gpts, gw = _graded_corner_rule(corners[t], loc, degree)
            if grad_pp is not None:
                Gu_t = g.at_points_of(t, gpts)
                ge_t = _exact_grad_values(exact, gpts[None], m)[0]
                dmag = np.sqrt(np.einsum("qmd,qmd->q", ge_t - Gu_t,
                                         ge_t - Gu_t))
                grad_pp[t] = gw @ dmag ** p
                if stress_pp is not None:
                    se_t = np.asarray(exact.sigma(gpts), dtype=float)
                    if se_t.ndim == 2:
                        se_t = se_t[:, None, :]
                    dW_t = problem.density.dw(Gu_t)
                    dmag = np.sqrt(np.einsum("qmd,qmd->q", se_t - dW_t,
                                             se_t - dW_t))
                    stress_pp[t] = gw @ dmag ** pp
            if vol_pp is not None:
                ue_t = _as_components(exact.u(gpts), m)
                cb_loc = (gpts - ops.centroid[t]) / ops.h_t[t]
                phi_t = _batch_eval(ops.exps_k, cb_loc)
                uT_t = np.einsum("mi,qi->qm", u.cells[t], phi_t)
                vol_pp[t] = gw @ np.einsum("qm,qm->q", ue_t - uT_t,
                                           ue_t - uT_t)

    err_grad = float(grad_pp.sum() ** (1.0 / p)) if grad_pp is not None \
        else None
    err_stress = float(stress_pp.sum() ** (1.0 / pp)) \
        if stress_pp is not None else None
    err_vol = float(np.sqrt(vol_pp.sum())) if vol_pp is not None else None
    return err_grad, err_stress, err_vol


def data_oscillations(problem):
    """osc(f, T) and osc_N(g, F(Gamma_N)) with the h_T / h_F weights."""
    space = problem.space
    ops = space.ops
    m = space.m
    pp = problem.p / (problem.p - 1.0)
    osc_f = 0.0
    if problem.f is not None:
        pts, w = ops._volume_rule(problem.data_degree)
        fv = _as_components(problem.f(pts.reshape(-1, 2)), m)
        fv = fv.reshape(pts.shape[0], pts.shape[1], m)
        phi = ops.cell_eval(ops.exps_k, pts)
        mom = np.einsum("tq,tqi,tqm->tim", w, phi, fv)
        gram = np.einsum("tq,tqi,tqj->tij", w, phi, phi)
        pif = np.linalg.solve(gram, mom).transpose(0, 2, 1)
        resid = fv - np.einsum("tmi,tqi->tqm", pif, phi)
        mag = np.sqrt(np.einsum("tqm,tqm->tq", resid, resid))
        per_t = np.einsum("tq,tq->t", w, mag ** pp)
        osc_f = float(np.sum(ops.h_t * per_t) ** (1.0 / pp))
    osc_g = 0.0
    mesh = space.mesh
    neumann = mesh.boundary_sides("neumann")
    if problem.g is not None and len(neumann):
        t_ref, w_ref = reference_segment_rule(problem.data_degree)
        chi = t_ref[:, None] ** np.arange(space.k + 1)
        d = (mesh.vertices[mesh.sides[neumann, 1]]
             - mesh.vertices[mesh.sides[neumann, 0]])
        spts = (ops.s_mid[neumann][:, None, :]
                + t_ref[None, :, None] * d[:, None, :])
        gv = eval_neumann(problem.g, spts, mesh.normals[neumann], m)
        gram_s = np.einsum("q,qi,qj->ij", w_ref, chi, chi)
        mom = np.einsum("q,qi,sqm->smi", w_ref, chi, gv)
        pig = np.linalg.solve(gram_s, mom[..., None])[..., 0]
        resid = gv - np.einsum("smi,qi->sqm", pig, chi)
        mag = np.sqrt(np.einsum("sqm,sqm->sq", resid, resid))
        per_s = ops.h_f[neumann] * np.einsum("q,sq->s", w_ref, mag ** pp)
        osc_g = float(np.sum(ops.h_f[neumann] * per_s) ** (1.0 / pp))
    osc_zeta = 0.0
    if problem.l2_weight > 0.0:
        pts, w = ops._volume_rule(problem.data_degree)
        zv = _as_components(problem.l2_data(pts.reshape(-1, 2)), m)
        zv = zv.reshape(pts.shape[0], pts.shape[1], m)
        phi = ops.cell_eval(ops.exps_k, pts)
        mom = np.einsum("tq,tqi,tqm->tim", w, phi, zv)
        gram = np.einsum("tq,tqi,tqj->tij", w, phi, phi)
        piz = np.linalg.solve(gram, mom).transpose(0, 2, 1)
        resid = zv - np.einsum("tmi,tqi->tqm", piz, phi)
        mag2 = np.einsum("tqm,tqm->tq", resid, resid)
        per_t = np.einsum("tq,tq->t", w, mag2)
        osc_zeta = problem.l2_weight \
            * float(np.sqrt(np.sum(ops.h_t ** 2 * per_t)))
    return osc_f, osc_g, osc_zeta


def lower_energy_bound(problem, u, sigma, exact, energy=None, c_osc=1.0):
    """LEB = E_l(u_l) + int (DW(G u) - sigma) : grad(u) dx
    - c_osc * (oscillations) [- s(u; I u) in the stabilized variant].

    Returns (leb, leb_without_oscillation_term).  Requires grad u.
    """
    if exact.grad_u is None:
        raise ValueError("lower energy bound needs the exact gradient")
    space = problem.space
    ops = space.ops
    m = space.m
    E = problem.energy(u) if energy is None else energy
    degree = problem.energy_degree + 4
    pts, w = ops._volume_rule(degree)
    tau = ops.grad_basis_eval(pts)
    g = space.gradient_reconstruction(u)
    Gu = np.einsum("tqid,tmi->tqmd", tau, g.coeffs)
    dW = problem.density.dw(Gu)
    sig = np.einsum("tqid,tmi->tqmd", tau, sigma.coeffs)
    ge = _exact_grad_values(exact, pts, m)
    corr = float(np.einsum("tq,tqmd,tqmd->", w, dW - sig, ge))
    base = E + corr
    if space.variant == STABILIZED:
        iu = space.interpolate(exact.u, degree=degree) if exact.u else None
        if iu is None:
            raise ValueError("stabilized LEB needs the exact solution")
        base -= space.stabilization(u, iu, problem.p)
    osc_f, osc_g, osc_z = data_oscillations(problem)
    return base - c_osc * (osc_f + osc_g + osc_z), base


def dual_bound(problem, u, sigma):
    """Guaranteed-bound right-hand side
    RHS = E_l(u_l) - E*(sigma) + osc(f) + ||G u - grad J u||_{L2}
    with the dual energy E*(sigma) = -int W*(sigma) dx.

    The companion defect enters to the first power: that is what the
    comparison of E(J u) with E_l(u) produces and what reproduces the
    reported decay of RHS under uniform refinement.
    """
    if problem.density.conjugate is None:
        raise UnsupportedConjugate(
            f"density {problem.density.name!r} has no convex conjugate")
    space = problem.space
    ops = space.ops
    E = problem.energy(u)
    # dual energy with the same quadrature policy as the primal density
    ed = problem._ed
    tau = ops.grad_basis_eval(ed["pts"])
    sig = np.einsum("tqid,tmi->tqmd", tau, sigma.coeffs)
    wstar = problem.density.conjugate(sig)
    e_dual = -float(np.sum(ed["w"] * wstar))
    # companion defect, exact quadrature
    J = space.companion(u)
    deg = 2 * (space.k + 2)
    pts, w = ops._volume_rule(deg)
    tau2 = ops.grad_basis_eval(pts)
    g = space.gradient_reconstruction(u)
    Gu = np.einsum("tqid,tmi->tqmd", tau2, g.coeffs)
    gJ = J.grad_at_points(pts)
    defect = float(np.sqrt(np.einsum("tq,tqmd,tqmd->", w, Gu - gJ,
                                     Gu - gJ)))
    osc_f, _, _ = data_oscillations(problem)
    return E - e_dual + osc_f + defect


def aitken_extrapolate(values):
    """Aitken Delta^2 limit of the last three values.

    Returns (limit, degenerate): on a vanishing second difference the
    last value is returned with the degenerate flag set.
    """
    values = np.asarray(values, dtype=float)
    if len(values) < 3:
        raise ValueError("need at least three values")
    x0, x1, x2 = values[-3], values[-2], values[-1]
    denom = (x2 - x1) - (x1 - x0)
    if abs(denom) < 1e-300 or not np.isfinite(denom) \
            or abs(denom) < 1e-14 * max(abs(x2 - x1), abs(x1 - x0), 1e-300):
        return float(x2), True
    return float(x2 - (x2 - x1) ** 2 / denom), False


def fit_rate(ndofs, values, window=None):
    """Least-squares slope of log(values) against log(ndofs).

    Returns (slope, residual); ``window`` restricts to the last levels.
    """
    ndofs = np.asarray(ndofs, dtype=float)
    values = np.asarray(values, dtype=float)
    if window is not None:
        ndofs = ndofs[-window:]
        values = values[-window:]
    if len(ndofs) < 2:
        raise ValueError("need at least two points")
    if np.any(values <= 0) or np.any(ndofs <= 0):
        raise ValueError("rate fit needs positive data")
    x = np.log(ndofs)
    y = np.log(values)
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef, res, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = float(np.sqrt(res[0])) if len(res) else 0.0
    return float(coef[0]), resid


# -- Courant P1 probe ---------------------------------------------------------------

class CourantProblem:
    """Conforming P1 minimization of the same energy on the same mesh."""

    def __init__(self, mesh, density, f=None, g=None, u_dirichlet=None,
                 l2_weight=0.0, l2_data=None, dirichlet_rule=None):
        self.mesh = mesh
        self.density = density
        self.m = density.m
        self.f = f
        self.g = g
        self.u_dirichlet = u_dirichlet
        self.l2_weight = float(l2_weight)
        self.l2_data = l2_data
        self._setup(dirichlet_rule)

    def _setup(self, dirichlet_rule):
        mesh = self.mesh
        m = self.m
        nv = mesh.num_vertices
        corners = mesh.corners()
        e1 = corners[:, 1] - corners[:, 0]
        e2 = corners[:, 2] - corners[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        self.area = 0.5 * np.abs(det)
        # gradients of the barycentric basis
        grads = np.empty((mesh.num_triangles, 3, 2))
        grads[:, 1, 0] = e2[:, 1] / det
        grads[:, 1, 1] = -e2[:, 0] / det
        grads[:, 2, 0] = -e1[:, 1] / det
        grads[:, 2, 1] = e1[:, 0] / det
        grads[:, 0] = -grads[:, 1] - grads[:, 2]
        self.grad_lambda = grads

        # nodal constraints from side labels
        if dirichlet_rule is None:
            dirichlet_rule = {"dirichlet": (0, 1)[:m], "gamma3": (0, 1)[:m],
                              "gamma1": (0,), "gamma2": (1,)}
        mask = np.zeros((nv, m), dtype=bool)
        for s in mesh.boundary_sides():
            lab = mesh.labels[s]
            comps = dirichlet_rule.get(lab, ())
            for c in comps:
                if c < m:
                    mask[mesh.sides[s, 0], c] = True
                    mask[mesh.sides[s, 1], c] = True
        self.dirichlet_mask = mask
        self.values = np.zeros((nv, m))
        if self.u_dirichlet is not None and mask.any():
            nodes = np.nonzero(mask.any(axis=1))[0]
            vals = _as_components(self.u_dirichlet(mesh.vertices[nodes]), m)
            for i, vtx in enumerate(nodes):
                for c in range(m):
                    if mask[vtx, c]:
                        self.values[vtx, c] = vals[i, c]
        self.free = ~mask.reshape(-1)

        # load vector
        degree = max(int(np.ceil(self.density.p)) + 2, 6)
        self.load = np.zeros(nv * m)
        from .poly import reference_triangle_rule
        ref_pts, ref_w = reference_triangle_rule(degree)
        lam = np.stack([1 - ref_pts[:, 0] - ref_pts[:, 1],
                        ref_pts[:, 0], ref_pts[:, 1]], axis=1)
        pts = np.einsum("qj,tjd->tqd", lam, corners)
        wq = np.abs(det)[:, None] * ref_w[None, :]
        self._vol_pts = pts
        self._vol_w = wq
        self._lam = lam
        if self.f is not None:
            fv = _as_components(self.f(pts.reshape(-1, 2)), m)
            fv = fv.reshape(pts.shape[0], pts.shape[1], m)
            mom = np.einsum("tq,qj,tqm->tjm", wq, lam, fv)
            np.add.at(self.load.reshape(nv, m),
                      mesh.triangles.reshape(-1),
                      mom.reshape(-1, m))
        neumann = mesh.boundary_sides("neumann")
        if self.g is not None and len(neumann):
            t_ref, w_ref = reference_segment_rule(degree)
            a = mesh.vertices[mesh.sides[neumann, 0]]
            b = mesh.vertices[mesh.sides[neumann, 1]]
            spts = (0.5 * (a + b))[:, None, :] \
                + t_ref[None, :, None] * (b - a)[:, None, :]
            gv = eval_neumann(self.g, spts, mesh.normals[neumann], m)
            h = np.linalg.norm(b - a, axis=1)
            lam_a = 0.5 - t_ref
            lam_b = 0.5 + t_ref
            mom_a = np.einsum("q,q,sqm->sm", w_ref, lam_a, gv) * h[:, None]
            mom_b = np.einsum("q,q,sqm->sm", w_ref, lam_b, gv) * h[:, None]
            np.add.at(self.load.reshape(nv, m), mesh.sides[neumann, 0], mom_a)
            np.add.at(self.load.reshape(nv, m), mesh.sides[neumann, 1], mom_b)
        if self.l2_weight > 0.0:
            zv = _as_components(self.l2_data(pts.reshape(-1, 2)), m)
            self._zeta = zv.reshape(pts.shape[0], pts.shape[1], m)

    def _gradients(self, x):
        v = x.reshape(-1, self.m)
        vt = v[self.mesh.triangles]                  # (nt, 3, m)
        return np.einsum("tjm,tjd->tmd", vt, self.grad_lambda)

    def energy(self, x):
        G = self._gradients(x)
        E = float(self.area @ self.density.w(G)) - float(self.load @ x)
        if self.l2_weight > 0.0:
            v = x.reshape(-1, self.m)[self.mesh.triangles]
            vals = np.einsum("qj,tjm->tqm", self._lam, v)
            diff = self._zeta - vals
            E += 0.5 * self.l2_weight * float(
                np.einsum("tq,tqm,tqm->", self._vol_w, diff, diff))
        return E

    def gradient(self, x):
        G = self._gradients(x)
        dW = self.density.dw(G)
        per_node = np.einsum("t,tmd,tjd->tjm", self.area, dW,
                             self.grad_lambda)
        out = np.zeros_like(x).reshape(-1, self.m)
        np.add.at(out, self.mesh.triangles.reshape(-1),
                  per_node.reshape(-1, self.m))
        grad = out.reshape(-1) - self.load
        if self.l2_weight > 0.0:
            v = x.reshape(-1, self.m)[self.mesh.triangles]
            vals = np.einsum("qj,tjm->tqm", self._lam, v)
            diff = vals - self._zeta
            mom = self.l2_weight * np.einsum("tq,qj,tqm->tjm", self._vol_w,
                                             self._lam, diff)
            out2 = np.zeros_like(x).reshape(-1, self.m)
            np.add.at(out2, self.mesh.triangles.reshape(-1),
                      mom.reshape(-1, self.m))
            grad += out2.reshape(-1)
        return grad

    def hessian(self, x):
        m = self.m
        G = self._gradients(x)
        d2 = self.density.d2w(G)
        Hloc = np.einsum("t,tjd,tmdne,tke->tjmkn", self.area, self.grad_lambda,
                         d2, self.grad_lambda, optimize=True)
        if self.l2_weight > 0.0:
            mass = np.einsum("tq,qj,qk->tjk", self._vol_w, self._lam,
                             self._lam)
            Hloc += self.l2_weight * np.einsum("tjk,mn->tjmkn", mass,
                                               np.eye(m))
        tri = self.mesh.triangles
        idx = (tri[:, :, None] * m + np.arange(m)[None, None, :])
        rows = np.broadcast_to(idx[:, :, :, None, None], Hloc.shape)
        cols = np.broadcast_to(idx[:, None, None, :, :], Hloc.shape)
        n = self.mesh.num_vertices * m
        return sp.coo_matrix((Hloc.reshape(-1),
                              (rows.reshape(-1), cols.reshape(-1))),
                             shape=(n, n)).tocsr()


def courant_p1_minimize(courant, settings=None):
    """Minimize the conforming P1 energy with the optimizer stack of the
    hybrid solver; returns (energy, nodal values, converged flag)."""
    settings = settings or SolverSettings()
    settings.validate()
    x = np.zeros(courant.mesh.num_vertices * courant.m)
    x.reshape(-1, courant.m)[:] = courant.values
    free = np.nonzero(courant.free)[0]

    def fun_grad(xf):
        x[free] = xf
        return courant.energy(x), courant.gradient(x)[free]

    method = settings.method
    if method == "auto":
        method = "newton" if courant.density.d2w is not None else "lbfgs"
    if method == "newton":
        def hess(xf):
            x[free] = xf
            return courant.hessian(x)[free][:, free].tocsc()

        xf, E, it, gnorm, conv = _newton(fun_grad, hess, x[free], settings)
    else:
        xf, E, it, gnorm, conv = _lbfgs(fun_grad, x[free], settings)
    x[free] = xf
    return E, x.reshape(-1, courant.m), conv
