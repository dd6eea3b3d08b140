"""Hybrid high-order spaces and reconstruction operators.

A :class:`HhoSpace` couples polynomial unknowns on cells and on the mesh
skeleton.  All element-local operators (gradient and potential
reconstruction, stabilization traces, companion machinery) are dense
matrices acting on the local scalar dof vector

    [cell basis coefficients | side 0 | side 1 | side 2]

and are precomputed in batched arrays over all triangles.  Vector-valued
problems (m > 1) reuse the same operators componentwise.
"""

from __future__ import annotations

import numpy as np

from .poly import (cell_dim, monomial_exponents, reference_segment_rule,
                   reference_triangle_rule)

RT = "rt"
STABILIZED = "stabilized"


def _batch_eval(exps, loc):
    """Scaled monomial values; loc (..., 2) -> (..., ndim)."""
    a = exps[:, 0]
    b = exps[:, 1]
    return loc[..., 0:1] ** a * loc[..., 1:2] ** b


def _batch_laplace(exps, loc, h):
    a = exps[:, 0]
    b = exps[:, 1]
    x = loc[..., 0:1]
    y = loc[..., 1:2]
    dxx = np.where(a > 1, a * (a - 1) * x ** np.maximum(a - 2, 0) * y ** b, 0.0)
    dyy = np.where(b > 1, b * (b - 1) * x ** a * y ** np.maximum(b - 2, 0), 0.0)
    return (dxx + dyy) / (h ** 2)[..., None, None]


def lattice_nodes(degree):
    """Uniform barycentric lattice on the triangle, shape (dim, 3)."""
    nodes = []
    for i in range(degree + 1):
        for j in range(degree + 1 - i):
            nodes.append((degree - i - j, j, i))
    return np.array(nodes, dtype=float) / degree


class SpaceOps:
    """Batched geometry, quadrature, and local operators for one space."""

    def __init__(self, space):
        mesh = space.mesh
        k = space.k
        self.space = space
        nt = mesh.num_triangles
        ns = mesh.num_sides

        self.corners = mesh.corners()
        self.area = mesh.areas()
        self.centroid = self.corners.mean(axis=1)
        self.h_t = np.sqrt(self.area)
        d = mesh.vertices[mesh.sides[:, 1]] - mesh.vertices[mesh.sides[:, 0]]
        self.h_f = np.sqrt(np.einsum("sd,sd->s", d, d))
        self.s_mid = 0.5 * (mesh.vertices[mesh.sides[:, 0]]
                            + mesh.vertices[mesh.sides[:, 1]])
        self.s_tang = d / self.h_f[:, None]

        self.sot = mesh.side_of_triangle
        # +1 where the triangle is T_plus of the side (normal points outward)
        self.nu_sign = np.where(
            mesh.adjacency[self.sot, 0] == np.arange(nt)[:, None], 1.0, -1.0)
        self.nu = (mesh.normals[self.sot] * self.nu_sign[..., None])

        self.exps_k = monomial_exponents(k)
        self.exps_k1 = monomial_exponents(k + 1)
        self.exps_k3 = monomial_exponents(k + 3)
        self.ncb = cell_dim(k)
        self.nk1 = cell_dim(k + 1)
        self.nk3 = cell_dim(k + 3)
        self.nsb = k + 1
        self.nloc = self.ncb + 3 * self.nsb

        # volume geometry rule, exact to degree 2k+3
        self.vol_deg = 2 * k + 3
        self.vol_pts, self.vol_w = self._volume_rule(self.vol_deg)
        # side geometry rule, exact to degree 2k+2
        self.side_deg = 2 * k + 2
        t_ref, w_ref = reference_segment_rule(self.side_deg)
        self.side_t = t_ref
        self.side_wref = w_ref
        self.side_pts = (self.s_mid[:, None, :]
                         + t_ref[None, :, None]
                         * (d[:, None, :]))          # (ns, nqs, 2)
        self.side_w = self.h_f[:, None] * w_ref[None, :]
        self.chi_ref = t_ref[:, None] ** np.arange(self.nsb)  # (nqs, nsb)

        self._build_local_maps()
        self._build_projections()
        self._build_gradient_op()
        self._build_potential_op()
        self._build_stabilization_op()
        self._energy_cache = {}
        self._companion_geom = None

    # -- rules ---------------------------------------------------------------

    def _volume_rule(self, degree):
        ref_pts, ref_w = reference_triangle_rule(degree)
        p0 = self.corners[:, 0]
        e1 = self.corners[:, 1] - p0
        e2 = self.corners[:, 2] - p0
        det = np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
        pts = (ref_pts[None, :, 0:1] * e1[:, None, :]
               + ref_pts[None, :, 1:2] * e2[:, None, :] + p0[:, None, :])
        return pts, det[:, None] * ref_w[None, :]

    def local_coords(self, pts):
        """(x - centroid)/h_T for per-triangle point arrays (nt, ..., 2)."""
        extra = pts.ndim - 2
        c = self.centroid.reshape((-1,) + (1,) * extra + (2,))
        h = self.h_t.reshape((-1,) + (1,) * (extra + 1))
        return (pts - c) / h

    def cell_eval(self, exps, pts):
        return _batch_eval(exps, self.local_coords(pts))

    def cell_grad(self, exps, pts):
        loc = self.local_coords(pts)
        a = exps[:, 0]
        b = exps[:, 1]
        x = loc[..., 0:1]
        y = loc[..., 1:2]
        gx = np.where(a > 0, a * x ** np.maximum(a - 1, 0) * y ** b, 0.0)
        gy = np.where(b > 0, b * x ** a * y ** np.maximum(b - 1, 0), 0.0)
        g = np.stack([gx, gy], axis=-1)
        extra = pts.ndim - 2
        h = self.h_t.reshape((-1,) + (1,) * (extra + 2))
        return g / h

    # -- RT / gradient-space basis --------------------------------------------

    def grad_space_dim(self):
        if self.space.variant == RT:
            return (self.space.k + 1) * (self.space.k + 3)
        return 2 * self.ncb

    def grad_basis_eval(self, pts):
        """Vector fields of the local gradient space, (nt, ..., ng, 2)."""
        k = self.space.k
        phi = self.cell_eval(self.exps_k, pts)
        shape = phi.shape[:-1]
        if self.space.variant == RT:
            ng = (k + 1) * (k + 3)
            out = np.zeros(shape + (ng, 2))
            out[..., :self.ncb, 0] = phi
            out[..., self.ncb:2 * self.ncb, 1] = phi
            loc = self.local_coords(pts)
            hom = np.array([(k - b, b) for b in range(k + 1)], dtype=np.int64)
            q = _batch_eval(hom, loc)
            out[..., 2 * self.ncb:, 0] = loc[..., 0:1] * q
            out[..., 2 * self.ncb:, 1] = loc[..., 1:2] * q
        else:
            out = np.zeros(shape + (2 * self.ncb, 2))
            out[..., :self.ncb, 0] = phi
            out[..., self.ncb:, 1] = phi
        return out

    def grad_basis_div(self, pts):
        """Divergence of the gradient-space fields (RT variant only)."""
        k = self.space.k
        gphi = self.cell_grad(self.exps_k, pts)
        shape = gphi.shape[:-2]
        if self.space.variant != RT:
            out = np.zeros(shape + (2 * self.ncb,))
            out[..., :self.ncb] = gphi[..., 0]
            out[..., self.ncb:] = gphi[..., 1]
            return out
        ng = (k + 1) * (k + 3)
        out = np.zeros(shape + (ng,))
        out[..., :self.ncb] = gphi[..., 0]
        out[..., self.ncb:2 * self.ncb] = gphi[..., 1]
        loc = self.local_coords(pts)
        hom = np.array([(k - b, b) for b in range(k + 1)], dtype=np.int64)
        q = _batch_eval(hom, loc)
        extra = pts.ndim - 2
        h = self.h_t.reshape((-1,) + (1,) * (extra + 1))
        out[..., 2 * self.ncb:] = (2 + k) * q / h
        return out

    # -- local dof bookkeeping -------------------------------------------------

    def _build_local_maps(self):
        space = self.space
        mesh = space.mesh
        nt = mesh.num_triangles
        m = space.m
        loc2glob = np.empty((nt, m, self.nloc), dtype=np.int64)
        t_idx = np.arange(nt)
        for c in range(m):
            base = (t_idx * m + c)[:, None] * self.ncb
            loc2glob[:, c, :self.ncb] = base + np.arange(self.ncb)
            for j in range(3):
                s = self.sot[:, j]
                off = space.ncell_dofs + (s * m + c)[:, None] * self.nsb
                loc2glob[:, c, self.ncb + j * self.nsb:
                         self.ncb + (j + 1) * self.nsb] = (
                    off + np.arange(self.nsb))
        self.loc2glob = loc2glob

    def gather_local(self, data):
        """(ndof,) -> (nt, m, nloc)."""
        return data[self.loc2glob]

    def scatter_add(self, out, local):
        np.add.at(out, self.loc2glob, local)

    # -- projections and Gram matrices ------------------------------------------

    def _build_projections(self):
        # cell Gram of P_k and P_{k+1}, exact
        phi_k = self.cell_eval(self.exps_k, self.vol_pts)
        phi_k1 = self.cell_eval(self.exps_k1, self.vol_pts)
        w = self.vol_w
        self.phi_k_vol = phi_k
        self.phi_k1_vol = phi_k1
        self.gram_k = np.einsum("tq,tqi,tqj->tij", w, phi_k, phi_k)
        self.gram_k1 = np.einsum("tq,tqi,tqj->tij", w, phi_k1, phi_k1)
        # moments of P_{k+1} against P_k -> projection operator
        mom = np.einsum("tq,tqi,tqj->tij", w, phi_k, phi_k1)
        self.proj_k_of_k1 = np.linalg.solve(self.gram_k, mom)  # (nt,ncb,nk1)
        # side Gram (same reference basis on every side, scaled by h_F)
        gram_side_ref = np.einsum("q,qi,qj->ij", self.side_wref,
                                  self.chi_ref, self.chi_ref)
        self.gram_side_ref = gram_side_ref
        # traces of the cell bases at the side points of each triangle
        side_pts_t = self.side_pts[self.sot]          # (nt, 3, nqs, 2)
        self.side_pts_t = side_pts_t
        self.phi_k_side = self.cell_eval(self.exps_k, side_pts_t)
        self.phi_k1_side = self.cell_eval(self.exps_k1, side_pts_t)
        # projection of a P_k / P_{k+1} cell trace onto the side basis
        inv = np.linalg.inv(gram_side_ref)
        momk = np.einsum("q,qi,tjqn->tjin", self.side_wref, self.chi_ref,
                         self.phi_k_side)
        momk1 = np.einsum("q,qi,tjqn->tjin", self.side_wref, self.chi_ref,
                          self.phi_k1_side)
        self.trace_proj_k = np.einsum("in,tjnl->tjil", inv, momk)
        self.trace_proj_k1 = np.einsum("in,tjnl->tjil", inv, momk1)

    # -- gradient reconstruction -------------------------------------------------

    def _build_gradient_op(self):
        w = self.vol_w
        tau_vol = self.grad_basis_eval(self.vol_pts)       # (nt,nq,ng,2)
        gram = np.einsum("tq,tqid,tqjd->tij", w, tau_vol, tau_vol)
        div = self.grad_basis_div(self.vol_pts)            # (nt,nq,ng)
        rhs_cell = -np.einsum("tq,tqi,tqj->tij", w, div, self.phi_k_vol)
        ng = gram.shape[1]
        nt = gram.shape[0]
        rhs = np.zeros((nt, ng, self.nloc))
        rhs[:, :, :self.ncb] = rhs_cell
        tau_side = self.grad_basis_eval(self.side_pts_t)   # (nt,3,nqs,ng,2)
        taun = np.einsum("tjqid,tjd->tjqi", tau_side, self.nu)
        wside = (self.h_f[self.sot] * 1.0)[:, :, None] * self.side_wref
        for j in range(3):
            blk = np.einsum("tq,tqi,qn->tin", wside[:, j], taun[:, j],
                            self.chi_ref)
            rhs[:, :, self.ncb + j * self.nsb:
                self.ncb + (j + 1) * self.nsb] = blk
        self.grad_gram = gram
        self.G_op = np.linalg.solve(gram, rhs)             # (nt, ng, nloc)

    # -- potential reconstruction --------------------------------------------------

    def _build_potential_op(self):
        w = self.vol_w
        gphi = self.cell_grad(self.exps_k1, self.vol_pts)   # (nt,nq,nk1,2)
        stiff = np.einsum("tq,tqid,tqjd->tij", w, gphi, gphi)
        lap = _batch_laplace(self.exps_k1, self.local_coords(self.vol_pts),
                             self.h_t)
        rhs_cell = -np.einsum("tq,tqi,tqj->tij", w, lap, self.phi_k_vol)
        nt, nk1 = stiff.shape[0], self.nk1
        rhs = np.zeros((nt, nk1, self.nloc))
        rhs[:, :, :self.ncb] = rhs_cell
        gphi_side = self.cell_grad(self.exps_k1, self.side_pts_t)
        gn = np.einsum("tjqid,tjd->tjqi", gphi_side, self.nu)
        wside = self.h_f[self.sot][:, :, None] * self.side_wref
        for j in range(3):
            blk = np.einsum("tq,tqi,qn->tin", wside[:, j], gn[:, j],
                            self.chi_ref)
            rhs[:, :, self.ncb + j * self.nsb:
                self.ncb + (j + 1) * self.nsb] = blk
        # mean-value constraint by a Lagrange multiplier row
        mean = np.einsum("tq,tqi->ti", w, self.phi_k1_vol)
        aug = np.zeros((nt, nk1 + 1, nk1 + 1))
        aug[:, :nk1, :nk1] = stiff
        aug[:, :nk1, nk1] = mean
        aug[:, nk1, :nk1] = mean
        rhs_aug = np.zeros((nt, nk1 + 1, self.nloc))
        rhs_aug[:, :nk1] = rhs
        rhs_aug[:, nk1, :self.ncb] = np.einsum("tq,tqi->ti", w,
                                               self.phi_k_vol)
        sol = np.linalg.solve(aug, rhs_aug)
        self.R_op = sol[:, :nk1]                            # (nt, nk1, nloc)

    # -- stabilization -----------------------------------------------------------

    def _build_stabilization_op(self):
        # S_{K,S} v = Pi_S^k ( v_S - v_K - (1 - Pi_K^k)(R v)|_K )
        nt = self.space.mesh.num_triangles
        S = np.zeros((nt, 3, self.nsb, self.nloc))
        # R composed with (1 - Pi_K^k), then traced and projected
        R_proj = np.einsum("tci,til->tcl", self.proj_k_of_k1, self.R_op)
        for j in range(3):
            # v_S identity block
            sl = slice(self.ncb + j * self.nsb, self.ncb + (j + 1) * self.nsb)
            S[:, j, :, sl] += np.eye(self.nsb)
            # -v_K trace
            S[:, j] -= np.pad(self.trace_proj_k[:, j],
                              ((0, 0), (0, 0), (0, self.nloc - self.ncb)))
            # -(R v - Pi_K R v) trace
            S[:, j] -= (np.einsum("tin,tnl->til", self.trace_proj_k1[:, j],
                                  self.R_op)
                        - np.einsum("tin,tnl->til", self.trace_proj_k[:, j],
                                    R_proj))
        self.S_op = S

    # -- energy-rule data (degree depends on the density) ---------------------------

    def energy_data(self, degree):
        degree = max(degree, 2 * (self.space.k + 1))
        if degree not in self._energy_cache:
            pts, w = self._volume_rule(degree)
            tau = self.grad_basis_eval(pts)
            B = np.einsum("tqid,til->tqdl", tau, self.G_op)
            phi = self.cell_eval(self.exps_k, pts)
            self._energy_cache[degree] = {
                "pts": pts, "w": w, "B": B, "phi": phi}
        return self._energy_cache[degree]

    def stab_side_rule(self, degree):
        t_ref, w_ref = reference_segment_rule(degree)
        chi = t_ref[:, None] ** np.arange(self.nsb)
        return t_ref, w_ref, chi

class _CompanionGeometry:
    """Node tables and bubble systems for the conforming companion."""

    def __init__(self, ops, bary_matrix):
        self.ops = ops
        space = ops.space
        mesh = space.mesh
        k = space.k
        nt = mesh.num_triangles
        # lambda(x) = solve(A, [x, y, 1]) with A rows [corners^T; 1 1 1]
        self.bary_inv = np.linalg.inv(bary_matrix)          # (nt, 3, 3)

        self.bary_k1 = lattice_nodes(k + 1)                  # (nn1, 3)
        self.bary_k3 = lattice_nodes(k + 3)                  # (nn3, 3)
        self.nodes_k1 = np.einsum("nj,tjd->tnd", self.bary_k1,
                                  ops.corners)               # (nt, nn1, 2)
        self.nodes_k3 = np.einsum("nj,tjd->tnd", self.bary_k3, ops.corners)

        self.node_gid = self._global_node_ids(mesh, k + 1, self.bary_k1)
        self.n_global = self.node_gid.max() + 1

        phi1 = ops.cell_eval(ops.exps_k1, self.nodes_k1)     # (nt, nn1, nk1)
        self.vand_k1 = phi1
        phi3 = ops.cell_eval(ops.exps_k3, self.nodes_k3)
        self.vand_k3_inv = np.linalg.inv(phi3)

        # side bubble Gram: int_F bF chi_i chi_j with bF(t) = 1/4 - t^2
        t = ops.side_t
        bub = 0.25 - t ** 2
        gram_ref = np.einsum("q,q,qi,qj->ij", ops.side_wref, bub,
                             ops.chi_ref, ops.chi_ref)
        self.side_bubble_gram = gram_ref                     # scaled by h_F later

        # cell bubble Gram: int_T bT phi_i phi_j, bT = lambda1 lambda2 lambda3
        lam_vol = self._bary_at(ops.vol_pts)                 # (nt, nq, 3)
        bT = lam_vol.prod(axis=-1)
        self.bT_vol = bT
        self.cell_bubble_gram = np.einsum("tq,tq,tqi,tqj->tij", ops.vol_w, bT,
                                          ops.phi_k_vol, ops.phi_k_vol)

    def _bary_at(self, pts):
        """Barycentric coordinates of per-triangle points (nt, ..., 2)."""
        shape = pts.shape
        aug = np.concatenate([pts, np.ones(shape[:-1] + (1,))], axis=-1)
        return np.einsum("t...d,tjd->t...j", aug, self.bary_inv)

    def _global_node_ids(self, mesh, degree, bary):
        nt = mesh.num_triangles
        nn = len(bary)
        gid = np.full((nt, nn), -1, dtype=np.int64)
        next_id = mesh.num_vertices
        edge_nodes = {}
        for n, lam in enumerate(bary):
            zero = np.nonzero(np.abs(lam) < 1e-12)[0]
            if len(zero) == 2:
                v_loc = [i for i in range(3) if i not in zero][0]
                gid[:, n] = mesh.triangles[:, v_loc]
            elif len(zero) == 1:
                j = zero[0]           # node on the edge opposite vertex j
                a_loc, b_loc = (j + 1) % 3, (j + 2) % 3
                for t in range(nt):
                    s = mesh.side_of_triangle[t, j]
                    va, vb = mesh.triangles[t, a_loc], mesh.triangles[t, b_loc]
                    frac = lam[b_loc]
                    # position measured from the side's lower vertex index
                    if mesh.sides[s, 0] == va:
                        key = (s, round(frac * degree))
                    else:
                        key = (s, degree - round(frac * degree))
                    if key not in edge_nodes:
                        edge_nodes[key] = next_id
                        next_id += 1
                    gid[t, n] = edge_nodes[key]
            else:
                gid[:, n] = next_id + np.arange(nt)
                next_id += nt
        return gid


class HhoVector:
    """Coefficient vector of a hybrid space, with cell and side views."""

    def __init__(self, space, data=None):
        self.space = space
        if data is None:
            data = np.zeros(space.ndof)
        data = np.asarray(data, dtype=float)
        if data.shape != (space.ndof,):
            raise ValueError("coefficient vector has wrong length")
        self.data = data

    @property
    def cells(self):
        """(nt, m, ncb) view."""
        s = self.space
        return self.data[:s.ncell_dofs].reshape(
            s.mesh.num_triangles, s.m, s.ops.ncb)

    @property
    def sides(self):
        """(ns, m, nsb) view."""
        s = self.space
        return self.data[s.ncell_dofs:].reshape(
            s.mesh.num_sides, s.m, s.ops.nsb)

    def copy(self):
        return HhoVector(self.space, self.data.copy())


class GradField:
    """Piecewise field in the local gradient space, coefficients (nt, m, ng)."""

    def __init__(self, space, coeffs):
        self.space = space
        self.coeffs = coeffs

    def at_points(self, pts):
        """Values at per-triangle points (nt, ..., 2) -> (nt, ..., m, 2)."""
        tau = self.space.ops.grad_basis_eval(pts)
        return np.einsum("t...id,tmi->t...md", tau, self.coeffs)

    def at_points_of(self, t, pts):
        """Values on one triangle at physical points (nq, 2) -> (nq, m, 2)."""
        ops = self.space.ops
        k = self.space.k
        loc = (pts - ops.centroid[t]) / ops.h_t[t]
        phi = _batch_eval(monomial_exponents(k), loc)
        ncb = phi.shape[-1]
        out = np.zeros((len(pts), self.space.m, 2))
        out[..., 0] += np.einsum("qi,mi->qm", phi, self.coeffs[t, :, :ncb])
        out[..., 1] += np.einsum("qi,mi->qm", phi,
                                 self.coeffs[t, :, ncb:2 * ncb])
        if self.space.variant == RT:
            hom = np.array([(k - b, b) for b in range(k + 1)],
                           dtype=np.int64)
            q = _batch_eval(hom, loc)
            rad = np.einsum("qi,mi->qm", q, self.coeffs[t, :, 2 * ncb:])
            out += rad[..., None] * loc[:, None, :]
        return out

    def div_at_points(self, pts):
        dv = self.space.ops.grad_basis_div(pts)
        return np.einsum("t...i,tmi->t...m", dv, self.coeffs)

    def lp_norm(self, p, degree=None):
        ops = self.space.ops
        data = ops.energy_data(degree or (2 * (self.space.k + 1)))
        vals = np.einsum("tqid,tmi->tqmd", ops.grad_basis_eval(data["pts"]),
                         self.coeffs)
        frob = np.sqrt(np.einsum("tqmd,tqmd->tq", vals, vals))
        return (np.sum(data["w"] * frob ** p)) ** (1.0 / p)


class PiecewisePoly:
    """Piecewise polynomial on the mesh, coefficients (nt, m, dim) in the
    per-element scaled monomial basis."""

    def __init__(self, space, degree, coeffs, continuous=False):
        self.space = space
        self.degree = degree
        self.coeffs = coeffs
        self.continuous = continuous
        self.exps = monomial_exponents(degree)

    def at_points(self, pts):
        """(nt, ..., 2) -> (nt, ..., m)."""
        phi = self.space.ops.cell_eval(self.exps, pts)
        return np.einsum("t...i,tmi->t...m", phi, self.coeffs)

    def grad_at_points(self, pts):
        g = self.space.ops.cell_grad(self.exps, pts)
        return np.einsum("t...id,tmi->t...md", g, self.coeffs)

    def at_points_of(self, tri_idx, pts):
        """Evaluate on selected triangles: pts (n, ..., 2), tri_idx (n,)."""
        ops = self.space.ops
        c = ops.centroid[tri_idx].reshape((len(tri_idx),) + (1,) * (pts.ndim - 2)
                                          + (2,))
        h = ops.h_t[tri_idx].reshape((len(tri_idx),) + (1,) * (pts.ndim - 1))
        loc = (pts - c) / h
        phi = _batch_eval(self.exps, loc)
        return np.einsum("n...i,nmi->n...m", phi, self.coeffs[tri_idx])


class HhoSpace:
    """Hybrid high-order space P_k(T; R^m) x P_k(F; R^m).

    Parameters
    ----------
    mesh : Triangulation
    k : polynomial degree >= 0
    m : number of components
    variant : "rt" (Raviart-Thomas gradients, no stabilization) or
        "stabilized" (broken P_k matrix gradients with stabilization)
    dirichlet_mask : (ns, m) bool array marking constrained side dofs
    """

    def __init__(self, mesh, k, m=1, variant=RT, dirichlet_mask=None):
        if k < 0:
            raise ValueError("k must be >= 0")
        if variant not in (RT, STABILIZED):
            raise ValueError(f"unknown variant {variant!r}")
        self.mesh = mesh
        self.k = k
        self.m = m
        self.variant = variant
        self.ncell_dofs = mesh.num_triangles * m * cell_dim(k)
        self.nside_dofs = mesh.num_sides * m * (k + 1)
        self.ndof = self.ncell_dofs + self.nside_dofs
        if dirichlet_mask is None:
            dirichlet_mask = np.zeros((mesh.num_sides, m), dtype=bool)
        self.dirichlet_mask = np.asarray(dirichlet_mask, dtype=bool)
        boundary = mesh.adjacency[:, 1] < 0
        if np.any(self.dirichlet_mask[~boundary]):
            raise ValueError("Dirichlet mask set on an interior side")
        self.ops = SpaceOps(self)

    # -- dof helpers -----------------------------------------------------------

    def zero_vector(self):
        return HhoVector(self)

    def side_dof_indices(self, side, comp):
        off = self.ncell_dofs + (side * self.m + comp) * (self.k + 1)
        return np.arange(off, off + self.k + 1)

    def dirichlet_dofs(self):
        """Indices of all constrained side dofs."""
        idx = []
        for s, c in zip(*np.nonzero(self.dirichlet_mask)):
            idx.append(self.side_dof_indices(s, c))
        if not idx:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(idx)

    # -- interpolation -----------------------------------------------------------

    def interpolate(self, fn, degree=None):
        """I_l v = (cell L2 projections, side L2 projections).

        ``fn(points (..., 2)) -> (..., m)`` (or (...,) when m == 1).
        """
        ops = self.ops
        degree = degree or (2 * self.k + 8)
        pts, w = ops._volume_rule(max(degree, 2 * self.k))
        vals = _as_components(fn(pts.reshape(-1, 2)), self.m)
        vals = vals.reshape(pts.shape[0], pts.shape[1], self.m)
        phi = ops.cell_eval(ops.exps_k, pts)
        mom = np.einsum("tq,tqi,tqm->tim", w, phi, vals)
        gram = np.einsum("tq,tqi,tqj->tij", w, phi, phi)
        cells = np.linalg.solve(gram, mom).transpose(0, 2, 1)

        t_ref, w_ref = reference_segment_rule(max(degree, 2 * self.k))
        chi = t_ref[:, None] ** np.arange(self.k + 1)
        mesh = self.mesh
        d = mesh.vertices[mesh.sides[:, 1]] - mesh.vertices[mesh.sides[:, 0]]
        spts = ops.s_mid[:, None, :] + t_ref[None, :, None] * d[:, None, :]
        svals = _as_components(fn(spts.reshape(-1, 2)), self.m)
        svals = svals.reshape(spts.shape[0], spts.shape[1], self.m)
        gram_s = np.einsum("q,qi,qj->ij", w_ref, chi, chi)
        mom_s = np.einsum("q,qi,sqm->smi", w_ref, chi, svals)
        sides = np.linalg.solve(gram_s, mom_s[..., None])[..., 0]

        v = self.zero_vector()
        v.cells[:] = cells
        v.sides[:] = sides
        return v

    # -- reconstructions -----------------------------------------------------------

    def gradient_reconstruction(self, v):
        loc = self.ops.gather_local(v.data)
        coeffs = np.einsum("til,tml->tmi", self.ops.G_op, loc)
        return GradField(self, coeffs)

    def potential_reconstruction(self, v):
        loc = self.ops.gather_local(v.data)
        coeffs = np.einsum("til,tml->tmi", self.ops.R_op, loc)
        return PiecewisePoly(self, self.k + 1, coeffs)

    def stab_trace_coeffs(self, v):
        """S_{K,S} v in the side basis, shape (nt, 3, m, nsb)."""
        loc = self.ops.gather_local(v.data)
        return np.einsum("tjnl,tml->tjmn", self.ops.S_op, loc)

    def stabilization(self, u, v, p, return_parts=False):
        """s_l(u; v) = sum_K sum_S h_S^{1-p} int_S |S u|^(p-2) S u . S v."""
        ops = self.ops
        k = self.k
        deg = max(2 * (k + 1) + k, int(np.ceil(p)) * (k + 1))
        t_ref, w_ref, chi = ops.stab_side_rule(deg)
        Su = np.einsum("tjmn,qn->tjmq", self.stab_trace_coeffs(u), chi)
        Sv = np.einsum("tjmn,qn->tjmq", self.stab_trace_coeffs(v), chi)
        mag = np.sqrt(np.einsum("tjmq,tjmq->tjq", Su, Su))
        h = ops.h_f[ops.sot]
        wq = h[..., None] * w_ref
        integrand = np.einsum("tjq,tjmq,tjmq->tjq",
                              _safe_pow(mag, p - 2), Su, Sv)
        per_side = h ** (1.0 - p) * np.einsum("tjq,tjq->tj", wq, integrand)
        per_elem = per_side.sum(axis=1)
        total = float(per_elem.sum())
        if return_parts:
            return total, per_elem, per_side
        return total

    def companion(self, v, dirichlet_data=None):
        """Conforming post-processing J v: globally continuous, preserves
        all cell and side moments of degree <= k.

        ``dirichlet_data`` is accepted for interface symmetry; the moment
        conditions determine J completely.
        """
        ops = self.ops
        geom = self._companion_geometry()
        m = self.m
        mesh = self.mesh
        nt = mesh.num_triangles

        R = self.potential_reconstruction(v)
        r_nodes = R.at_points(geom.nodes_k1)                 # (nt, nn1, m)
        acc = np.zeros((geom.n_global, m))
        cnt = np.zeros(geom.n_global)
        np.add.at(acc, geom.node_gid, r_nodes)
        np.add.at(cnt, geom.node_gid, 1.0)
        avg = acc / cnt[:, None]
        w_nodal = avg[geom.node_gid]                         # (nt, nn1, m)
        w_coef = np.linalg.solve(geom.vand_k1[:, None],
                                 w_nodal.transpose(0, 2, 1)[..., None]
                                 )[..., 0]                   # (nt, m, nk1)
        w_poly = PiecewisePoly(self, self.k + 1, w_coef)

        # side corrections: bF * q_F with q_F in P_k(F)
        tplus = mesh.adjacency[:, 0]
        w_side = w_poly.at_points_of(tplus, ops.side_pts)    # (ns, nqs, m)
        vF_vals = np.einsum("smn,qn->sqm", v.sides, ops.chi_ref)
        rhs = np.einsum("q,qi,sqm->sim", ops.side_wref, ops.chi_ref,
                        vF_vals - w_side)
        qF = np.linalg.solve(geom.side_bubble_gram, rhs)     # (ns, nsb, m)

        # evaluate corrections at volume points and k+3 nodes
        def side_corrections_at(pts, lam):
            """Sum of the three side corrections at per-triangle points."""
            out = np.zeros(pts.shape[:-1] + (m,))
            for j in range(3):
                s = ops.sot[:, j]
                a_loc, b_loc = (j + 1) % 3, (j + 2) % 3
                bub = lam[..., a_loc] * lam[..., b_loc]
                t_par = (np.einsum("t...d,td->t...", pts
                                   - ops.s_mid[s].reshape((nt,) + (1,)
                                                          * (pts.ndim - 2)
                                                          + (2,)),
                                   ops.s_tang[s]) / ops.h_f[s].reshape(
                                       (nt,) + (1,) * (pts.ndim - 2)))
                chi = t_par[..., None] ** np.arange(self.k + 1)
                qvals = np.einsum("t...n,tnm->t...m", chi, qF[s])
                out += bub[..., None] * qvals
            return out

        lam_vol = geom._bary_at(ops.vol_pts)
        corr_vol = side_corrections_at(ops.vol_pts, lam_vol)
        w_vol = w_poly.at_points(ops.vol_pts)
        v_T_vals = np.einsum("tmi,tqi->tqm", v.cells, ops.phi_k_vol)
        resid = v_T_vals - w_vol - corr_vol
        rhs_T = np.einsum("tq,tqi,tqm->tim", ops.vol_w, ops.phi_k_vol, resid)
        qT = np.linalg.solve(geom.cell_bubble_gram, rhs_T)    # (nt, ncb, m)

        # assemble everything at the P_{k+3} lattice nodes
        lam3 = geom._bary_at(geom.nodes_k3)
        total = (w_poly.at_points(geom.nodes_k3)
                 + side_corrections_at(geom.nodes_k3, lam3))
        bT3 = lam3.prod(axis=-1)
        phi_k_n3 = ops.cell_eval(ops.exps_k, geom.nodes_k3)
        total += bT3[..., None] * np.einsum("tni,tim->tnm", phi_k_n3, qT)
        coeffs = np.einsum("tin,tnm->tmi", geom.vand_k3_inv, total)
        return PiecewisePoly(self, self.k + 3, coeffs, continuous=True)

    def _companion_geometry(self):
        if self.ops._companion_geom is None:
            ones = np.ones((self.mesh.num_triangles, 1, 3))
            A = np.concatenate([self.ops.corners.transpose(0, 2, 1), ones],
                               axis=1)
            self.ops._companion_geom = _CompanionGeometry(self.ops, A)
        return self.ops._companion_geom

    # -- seminorm ------------------------------------------------------------------

    def seminorm(self, v, p):
        """||v||_l^p = ||grad_pw v_T||_p^p + sum_T sum_F h_F^{1-p}
        ||v_T - v_F||_{L^p(F)}^p, returned as the p-th root."""
        ops = self.ops
        gphi = ops.cell_grad(ops.exps_k, ops.vol_pts)
        gv = np.einsum("tqid,tmi->tqmd", gphi, v.cells)
        frob = np.sqrt(np.einsum("tqmd,tqmd->tq", gv, gv))
        total = np.sum(ops.vol_w * frob ** p)
        vT_side = np.einsum("tmi,tjqi->tjqm", v.cells, ops.phi_k_side)
        vF = np.einsum("smn,qn->sqm", v.sides, ops.chi_ref)[ops.sot]
        diff = vT_side - vF
        mag = np.sqrt(np.einsum("tjqm,tjqm->tjq", diff, diff))
        h = ops.h_f[ops.sot]
        per_side = np.einsum("tjq,q->tj", mag ** p, ops.side_wref) * h
        total += np.sum(h ** (1.0 - p) * per_side)
        return total ** (1.0 / p)


def _as_components(vals, m):
    """Normalize function output to shape (npts, m)."""
    vals = np.asarray(vals, dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
    if vals.shape[-1] != m:
        raise ValueError(f"expected {m} components, got shape {vals.shape}")
    return vals


def _safe_pow(mag, e):
    """mag**e with the p < 2 singularity at 0 regularized to 0."""
    if e == 0:
        return np.ones_like(mag)
    if e > 0:
        return mag ** e
    out = np.zeros_like(mag)
    nz = mag > 0
    out[nz] = mag[nz] ** e
    return out
