"""Discrete energy assembly and minimization over hybrid unknowns.

The discrete problem couples the density W applied to the reconstructed
gradient with linear load terms, optional stabilization (stabilized
variant) and an optional quadratic lower-order term 0.5*||zeta - v_T||^2.
Constrained (Dirichlet) side dofs are eliminated: the optimizers act on
the free dofs only, so prescribed values are met exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .hho import STABILIZED, GradField, HhoVector, _as_components
from .poly import reference_segment_rule


@dataclass
class SolverSettings:
    grad_tol: float = 1e-10
    step_tol: float = 1e-14
    energy_tol: float = 1e-15
    max_iter: int = 50000
    method: str = "auto"          # auto | newton | lbfgs
    memory: int = 10
    armijo_c1: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 60
    stall_limit: int = 50

    def validate(self):
        if min(self.grad_tol, self.step_tol, self.energy_tol) <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")


@dataclass
class DiscreteSolution:
    u: HhoVector
    energy: float
    iterations: int
    grad_norm: float
    converged: bool
    method: str


class DiscreteProblem:
    """Energy E_l(v) = int W(G v) - int f.v_T - int_GammaN g.v_F
    (+ s(v;v)/p when stabilized, + 0.5*||zeta - v_T||^2 when active).

    Parameters
    ----------
    space : HhoSpace (its dirichlet_mask defines the constrained dofs)
    density : EnergyDensity
    f : volume load closure, points (n, 2) -> (n,) or (n, m); or None
    g : Neumann flux closure on sides labeled "neumann"; or None
    u_dirichlet : boundary value closure for constrained side dofs; or None
    l2_weight, l2_data : weight and closure zeta of the lower-order term
    """

    def __init__(self, space, density, f=None, g=None, u_dirichlet=None,
                 l2_weight=0.0, l2_data=None):
        if density.m != space.m:
            raise ValueError("density component count does not match space")
        self.space = space
        self.density = density
        self.f = f
        self.g = g
        self.u_dirichlet = u_dirichlet
        self.l2_weight = float(l2_weight)
        self.l2_data = l2_data
        self.stabilized = space.variant == STABILIZED
        self.p = density.p

        k = space.k
        self.energy_degree = max(density.quad_growth * (k + 1), 2 * (k + 1))
        self.data_degree = self.energy_degree + 4

        self._assemble_static()

    # -- static data -------------------------------------------------------------

    def _assemble_static(self):
        space = self.space
        ops = space.ops
        m = space.m
        self.load = np.zeros(space.ndof)
        if self.f is not None:
            pts, w = ops._volume_rule(self.data_degree)
            vals = _as_components(self.f(pts.reshape(-1, 2)), m)
            vals = vals.reshape(pts.shape[0], pts.shape[1], m)
            phi = ops.cell_eval(ops.exps_k, pts)
            mom = np.einsum("tq,tqi,tqm->tmi", w, phi, vals)
            self.load[:space.ncell_dofs] = mom.reshape(-1)

        mesh = space.mesh
        neumann = mesh.boundary_sides("neumann")
        if self.g is not None and len(neumann):
            t_ref, w_ref = reference_segment_rule(self.data_degree)
            chi = t_ref[:, None] ** np.arange(space.k + 1)
            d = (mesh.vertices[mesh.sides[neumann, 1]]
                 - mesh.vertices[mesh.sides[neumann, 0]])
            spts = (ops.s_mid[neumann][:, None, :]
                    + t_ref[None, :, None] * d[:, None, :])
            gv = eval_neumann(self.g, spts, mesh.normals[neumann], m)
            mom = np.einsum("q,qi,sqm->smi", w_ref, chi, gv) \
                * ops.h_f[neumann][:, None, None]
            for idx, s in enumerate(neumann):
                for c in range(m):
                    self.load[space.side_dof_indices(s, c)] = mom[idx, c]

        # Dirichlet values
        self.dirichlet_idx = space.dirichlet_dofs()
        self.dirichlet_values = np.zeros(len(self.dirichlet_idx))
        if len(self.dirichlet_idx) and self.u_dirichlet is not None:
            vals = self._project_dirichlet()
            self.dirichlet_values = vals
        self.free_mask = np.ones(space.ndof, dtype=bool)
        self.free_mask[self.dirichlet_idx] = False
        self.free_idx = np.nonzero(self.free_mask)[0]

        # lower-order term data
        if self.l2_weight > 0.0:
            pts, w = ops._volume_rule(self.data_degree)
            zv = _as_components(self.l2_data(pts.reshape(-1, 2)), m)
            zv = zv.reshape(pts.shape[0], pts.shape[1], m)
            phi = ops.cell_eval(ops.exps_k, pts)
            self.zeta_mom = np.einsum("tq,tqi,tqm->tmi", w, phi, zv)
            self.zeta_sq = float(np.einsum("tq,tqm,tqm->", w, zv, zv))
            self.cell_gram = ops.gram_k
        self._ed = ops.energy_data(self.energy_degree)
        if self.stabilized:
            k = space.k
            deg = max(2 * (k + 1) + k, int(np.ceil(self.p)) * (k + 1))
            t_ref, w_ref, chi = ops.stab_side_rule(deg)
            self._stab_chi = chi
            self._stab_wref = w_ref
            # S_B[t,j,q,l]: value of S_{K,S} basis response at side points
            self._stab_B = np.einsum("qn,tjnl->tjql", chi, ops.S_op)

    def _project_dirichlet(self):
        space = self.space
        ops = space.ops
        mesh = space.mesh
        m = space.m
        t_ref, w_ref = reference_segment_rule(self.data_degree)
        chi = t_ref[:, None] ** np.arange(space.k + 1)
        gram = np.einsum("q,qi,qj->ij", w_ref, chi, chi)
        out = []
        for s, c in zip(*np.nonzero(space.dirichlet_mask)):
            a = mesh.vertices[mesh.sides[s, 0]]
            b = mesh.vertices[mesh.sides[s, 1]]
            pts = 0.5 * (a + b) + np.outer(t_ref, b - a)
            vals = _as_components(self.u_dirichlet(pts), m)[:, c]
            mom = chi.T @ (w_ref * vals)
            out.append(np.linalg.solve(gram, mom))
        if not out:
            return np.zeros(0)
        return np.concatenate(out)

    # -- energy, gradient, hessian --------------------------------------------------

    def apply_dirichlet(self, v):
        v.data[self.dirichlet_idx] = self.dirichlet_values

    def initial_guess(self):
        """Cell and skeleton unknowns equal to one, Dirichlet dofs set to
        the projected boundary values."""
        v = self.space.zero_vector()
        v.cells[:, :, 0] = 1.0
        v.sides[:, :, 0] = 1.0
        self.apply_dirichlet(v)
        return v

    def _grad_values(self, v):
        """G v at the energy quadrature points, (nt, nq, m, 2)."""
        loc = self.space.ops.gather_local(v.data)
        return np.einsum("tqdl,tml->tqmd", self._ed["B"], loc)

    def energy(self, v):
        ops = self.space.ops
        Gv = self._grad_values(v)
        E = float(np.sum(self._ed["w"] * self.density.w(Gv)))
        E -= float(self.load @ v.data)
        if self.stabilized:
            E += self.space.stabilization(v, v, self.p) / self.p
        if self.l2_weight > 0.0:
            vM = np.einsum("tij,tmj->tmi", self.cell_gram, v.cells)
            quad = np.einsum("tmi,tmi->", v.cells, vM)
            cross = np.einsum("tmi,tmi->", self.zeta_mom, v.cells)
            E += 0.5 * self.l2_weight * (self.zeta_sq - 2 * cross + quad)
        return E

    def energy_gradient(self, v, reduced=True):
        ops = self.space.ops
        Gv = self._grad_values(v)
        dW = self.density.dw(Gv)
        wdW = self._ed["w"][..., None, None] * dW
        g_loc = np.einsum("tqmd,tqdl->tml", wdW, self._ed["B"])
        grad = np.zeros(self.space.ndof)
        ops.scatter_add(grad, g_loc)
        grad -= self.load
        if self.stabilized:
            grad += self._stab_gradient(v)
        if self.l2_weight > 0.0:
            vM = np.einsum("tij,tmj->tmi", self.cell_gram, v.cells)
            gl = self.l2_weight * (vM - self.zeta_mom)
            grad[:self.space.ncell_dofs] += gl.reshape(-1)
        if reduced:
            return grad[self.free_idx]
        return grad

    def _stab_values(self, v):
        loc = self.space.ops.gather_local(v.data)
        return np.einsum("tjql,tml->tjmq", self._stab_B, loc)

    def _stab_gradient(self, v):
        ops = self.space.ops
        p = self.p
        S = self._stab_values(v)
        mag = np.sqrt(np.einsum("tjmq,tjmq->tjq", S, S))
        fac = _pow_safe(mag, p - 2)
        h = ops.h_f[ops.sot]
        wq = h[..., None] * self._stab_wref * h[..., None] ** (1.0 - p)
        g_loc = np.einsum("tjq,tjq,tjmq,tjql->tml", wq, fac, S, self._stab_B)
        grad = np.zeros(self.space.ndof)
        ops.scatter_add(grad, g_loc)
        return grad

    def energy_hessian(self, v):
        """Sparse Hessian over all dofs (regularized where the density
        needs it); used by the Newton fast path."""
        space = self.space
        ops = space.ops
        m = space.m
        nloc = ops.nloc
        Gv = self._grad_values(v)
        d2 = self.density.d2w(Gv)
        wd2 = self._ed["w"][..., None, None, None, None] * d2
        B = self._ed["B"]
        Hloc = np.einsum("tqdl,tqmdne,tqef->tmlnf", B, wd2, B, optimize=True)
        if self.l2_weight > 0.0:
            eye_m = np.eye(m)
            Hloc[:, :, :ops.ncb, :, :ops.ncb] += (
                self.l2_weight * np.einsum("mn,tij->tminj", eye_m,
                                           self.cell_gram))
        if self.stabilized:
            Hloc = Hloc + self._stab_hessian_local(v)
        idx = ops.loc2glob  # (nt, m, nloc)
        rows = np.broadcast_to(idx[:, :, :, None, None],
                               Hloc.shape).reshape(-1)
        cols = np.broadcast_to(idx[:, None, None, :, :],
                               Hloc.shape).reshape(-1)
        H = sp.coo_matrix((Hloc.reshape(-1), (rows, cols)),
                          shape=(space.ndof, space.ndof)).tocsc()
        return H

    def _stab_hessian_local(self, v):
        ops = self.space.ops
        p = self.p
        S = self._stab_values(v)                       # (nt,3,m,q)
        mag = np.sqrt(np.einsum("tjmq,tjmq->tjq", S, S))
        f1 = _pow_safe(mag, p - 2)
        h = ops.h_f[ops.sot]
        wq = h[..., None] ** (2.0 - p) * self._stab_wref
        m = self.space.m
        eye_m = np.eye(m)
        term1 = np.einsum("tjq,tjq,mn,tjql,tjqf->tmlnf", wq, f1, eye_m,
                          self._stab_B, self._stab_B, optimize=True)
        if p != 2:
            f2 = (p - 2) * _pow_safe(mag, p - 4)
            term1 += np.einsum("tjq,tjq,tjmq,tjnq,tjql,tjqf->tmlnf", wq, f2,
                               S, S, self._stab_B, self._stab_B,
                               optimize=True)
        return term1

    # -- stress -----------------------------------------------------------------------

    def discrete_stress(self, u):
        """sigma = projection of DW(G u) onto the local gradient space,
        consistent with the energy quadrature rule."""
        ops = self.space.ops
        Gv = self._grad_values(u)
        dW = self.density.dw(Gv)
        tau = ops.grad_basis_eval(self._ed["pts"])
        rhs = np.einsum("tq,tqid,tqmd->tim", self._ed["w"], tau, dW)
        coeffs = np.linalg.solve(ops.grad_gram, rhs).transpose(0, 2, 1)
        return GradField(self.space, coeffs)


def _pow_safe(mag, e):
    if e == 0:
        return np.ones_like(mag)
    if e > 0:
        return mag ** e
    out = np.zeros_like(mag)
    nz = mag > 0
    out[nz] = mag[nz] ** e
    return out


def eval_neumann(g, side_points, side_normals, m):
    """Evaluate a Neumann closure g(points, normals) on per-side point
    arrays (ns, nq, 2) with unit normals (ns, 2); returns (ns, nq, m)."""
    ns, nq = side_points.shape[:2]
    normals = np.broadcast_to(side_normals[:, None, :],
                              side_points.shape).reshape(-1, 2)
    vals = _as_components(g(side_points.reshape(-1, 2), normals), m)
    return vals.reshape(ns, nq, m)


# -- optimizers -----------------------------------------------------------------------

def _lbfgs(fun_grad, x0, settings):
    """Limited-memory BFGS with Armijo backtracking; deterministic."""
    x = x0.copy()
    E, g = fun_grad(x)
    svecs, yvecs, rhos = [], [], []
    n_iter = 0
    stalls = 0
    gnorm = np.linalg.norm(g)
    while n_iter < settings.max_iter:
        if gnorm <= settings.grad_tol:
            return x, E, n_iter, gnorm, True
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(svecs), reversed(yvecs),
                             reversed(rhos)):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if yvecs:
            gamma = (svecs[-1] @ yvecs[-1]) / (yvecs[-1] @ yvecs[-1])
            q *= gamma
        for (s, y, rho), a in zip(zip(svecs, yvecs, rhos),
                                  reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        d = -q
        gd = g @ d
        if gd >= 0:
            d = -g
            gd = -(g @ g)
        step = 1.0 if yvecs else min(1.0, 1.0 / max(gnorm, 1e-30))
        ok = False
        for _ in range(settings.max_backtracks):
            x_new = x + step * d
            E_new, g_new = fun_grad(x_new)
            if E_new <= E + settings.armijo_c1 * step * gd:
                ok = True
                break
            step *= settings.backtrack
        if not ok:
            return x, E, n_iter, gnorm, gnorm <= settings.grad_tol
        s_vec = x_new - x
        y_vec = g_new - g
        sy = s_vec @ y_vec
        if sy > 1e-12 * np.linalg.norm(s_vec) * np.linalg.norm(y_vec):
            svecs.append(s_vec)
            yvecs.append(y_vec)
            rhos.append(1.0 / sy)
            if len(svecs) > settings.memory:
                svecs.pop(0)
                yvecs.pop(0)
                rhos.pop(0)
        dE = E - E_new
        dx = np.linalg.norm(s_vec)
        x, E, g = x_new, E_new, g_new
        gnorm = np.linalg.norm(g)
        n_iter += 1
        if dE <= settings.energy_tol * (1.0 + abs(E)) \
                and dx <= settings.step_tol * (1.0 + np.linalg.norm(x)):
            stalls += 1
            if stalls >= settings.stall_limit:
                return x, E, n_iter, gnorm, gnorm <= settings.grad_tol
        else:
            stalls = 0
    return x, E, n_iter, gnorm, gnorm <= settings.grad_tol


def _newton(fun_grad, hess, x0, settings):
    """Damped Newton with a regularization ladder and Armijo search."""
    x = x0.copy()
    E, g = fun_grad(x)
    n_iter = 0
    stalls = 0
    gnorm = np.linalg.norm(g)
    while n_iter < settings.max_iter:
        if gnorm <= settings.grad_tol:
            return x, E, n_iter, gnorm, True
        H = hess(x)
        scale = max(abs(H.diagonal()).max(), 1e-30)
        d = None
        for reg in (1e-14, 1e-10, 1e-6, 1e-2):
            Hreg = H + (reg * scale) * sp.eye(H.shape[0], format="csc")
            try:
                cand = spla.spsolve(Hreg, -g)
            except RuntimeError:
                continue
            if np.all(np.isfinite(cand)) and g @ cand < 0:
                d = cand
                break
        if d is None:
            d = -g
        gd = g @ d
        noise = 100.0 * np.finfo(float).eps * (1.0 + abs(E))
        if abs(gd) <= noise:
            # the predicted decrease is below the float64 resolution of
            # the energy: accept steps on gradient contraction instead
            ok = False
            for step in (1.0, 0.5, 0.25):
                x_new = x + step * d
                E_new, g_new = fun_grad(x_new)
                if np.all(np.isfinite(g_new)) \
                        and np.linalg.norm(g_new) < gnorm:
                    ok = True
                    break
            if not ok:
                return x, E, n_iter, gnorm, gnorm <= settings.grad_tol
            x, E, g = x_new, E_new, g_new
            gnorm = np.linalg.norm(g)
            n_iter += 1
            continue
        step = 1.0
        ok = False
        for _ in range(settings.max_backtracks):
            x_new = x + step * d
            E_new, g_new = fun_grad(x_new)
            if np.isfinite(E_new) and \
                    E_new <= E + settings.armijo_c1 * step * gd:
                ok = True
                break
            step *= settings.backtrack
        if not ok:
            # fall back to a gradient step before giving up
            step = 1.0 / max(gnorm, 1.0)
            x_new = x - step * g
            E_new, g_new = fun_grad(x_new)
            if not np.isfinite(E_new) or E_new >= E:
                return x, E, n_iter, gnorm, gnorm <= settings.grad_tol
        dE = E - E_new
        x, E, g = x_new, E_new, g_new
        gnorm = np.linalg.norm(g)
        n_iter += 1
        # the energy flattens quadratically before the gradient bottoms
        # out, so a stagnation exit needs several consecutive stalls
        if dE <= settings.energy_tol * (1.0 + abs(E)):
            stalls += 1
            if stalls >= 5:
                return x, E, n_iter, gnorm, gnorm <= settings.grad_tol
        else:
            stalls = 0
    return x, E, n_iter, gnorm, gnorm <= settings.grad_tol


def minimize(problem, initial=None, settings=None):
    """Minimize the discrete energy over the free dofs.

    Deterministic: identical inputs produce the identical iterate sequence.
    """
    settings = settings or SolverSettings()
    settings.validate()
    if initial is None:
        initial = problem.initial_guess()
    v = initial.copy()
    problem.apply_dirichlet(v)
    full = v.data.copy()
    free = problem.free_idx

    def fun_grad(xf):
        full[free] = xf
        w = HhoVector(problem.space, full)
        return problem.energy(w), problem.energy_gradient(w)

    method = settings.method
    if method == "auto":
        method = "newton" if problem.density.d2w is not None else "lbfgs"

    if method == "newton":
        def hess(xf):
            full[free] = xf
            w = HhoVector(problem.space, full)
            H = problem.energy_hessian(w).tocsr()
            return H[free][:, free].tocsc()

        x, E, it, gnorm, conv = _newton(fun_grad, hess, v.data[free],
                                        settings)
    elif method == "lbfgs":
        x, E, it, gnorm, conv = _lbfgs(fun_grad, v.data[free], settings)
    else:
        raise ValueError(f"unknown solver method {settings.method!r}")

    full[free] = x
    u = HhoVector(problem.space, full.copy())
    return DiscreteSolution(u, E, it, gnorm, conv, method)
