"""Element-local recovery of locally conservative fluxes.

Every element gets an auxiliary N x N system whose unknowns are the nodal
coefficients of a corrected field. Row xi balances the flux of the corrected
field through the dual (control-volume) segments of subcell xi against
source, stiffness, and averaged-boundary-flux data computed from the global
solution. The system matrix annihilates constants from both sides, so the
solution is fixed only up to an additive constant; the gradient, and with
it the recovered flux, is unique. The mean of the corrected coefficients is
pinned to the mean of the global solution's coefficients on the element,
which makes the two fields directly comparable but has no effect on fluxes.

On facets shared by two elements the normal flux of the global solution is
averaged between the two one-sided traces; on the domain boundary the
one-sided trace is used. Identical segment quadrature on both sides makes
these contributions cancel exactly when control volumes are assembled
across elements, which is what drives the conservation defect down to
rounding level.
"""

from __future__ import annotations

import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import basis, dualmesh, solver
from .quadrature import segment_rule

THREADS_ENV = "CONSERVAFLUX_THREADS"
_DEFECT_RTOL = 1e-10
_SOLVE_RTOL = 1e-10
_CHUNK = 1024


class PostprocessError(Exception):
    """Elemental flux recovery failure (carries the element index)."""


def _rot(v):
    out = np.empty_like(v)
    out[..., 0] = v[..., 1]
    out[..., 1] = -v[..., 0]
    return out


def _thread_count(threads):
    if threads is None:
        env = os.environ.get(THREADS_ENV, "")
        threads = int(env) if env.strip() else 1
    return max(1, int(threads))


class AssemblyContext:
    """Precomputed, solution-independent data for elemental assembly.

    Holds the reference dual tabulation, segment quadrature tables, basis
    evaluations (including evaluations inside facet neighbors), per-element
    stiffness and load blocks, and subcell source integrals. Everything is
    read-only, so chunks of elements can be processed concurrently.
    """

    def __init__(self, mesh, dofmap, problem, exactness=None, seg_points=None):
        k = dofmap.degree
        if exactness is None:
            exactness = solver.default_exactness(k)
        if seg_points is None:
            seg_points = solver.default_segment_points(k)
        self.mesh = mesh
        self.dofmap = dofmap
        self.problem = problem
        self.degree = k
        self.n = basis.N_NODES[k]
        self.exactness = int(exactness)
        self.seg_points = int(seg_points)
        self.ref = dualmesh._ref_dual(k)
        self.v0, self.jac, self.inv_jac, self.det_jac = mesh.element_maps()

        self.k_loc = solver.local_stiffness(mesh, k, problem, self.exactness)
        self.b_loc = solver.local_load(mesh, k, problem, self.exactness)
        self.f_sub, f_sub_abs = solver.subcell_source_integrals(
            mesh, k, problem, self.exactness)
        self.f_scale = f_sub_abs.sum(axis=1)

        srule = segment_rule(self.seg_points)
        self.sw = srule.weights
        tpar = srule.points

        ref = self.ref
        n = self.n
        nt = mesh.n_triangles

        # Control-volume segments: gauss points, basis gradients, and the
        # length-scaled normal direction rot(J d) folded into mm = invJ rot(J d)
        # so that grad(phi).n dl integrates as refgrad(phi).mm per unit weight.
        dcv = ref.cv_end - ref.cv_start                        # (S, 2)
        cv_pts = ref.cv_start[:, None, :] + tpar[None, :, None] * dcv[:, None, :]
        s, ns = cv_pts.shape[0], cv_pts.shape[1]
        _, grads = basis.eval_basis(k, cv_pts.reshape(-1, 2))
        self.g_cv = grads.reshape(s, ns, n, 2)
        rotd = _rot(np.einsum("tab,sb->tsa", self.jac, dcv))   # (nt, S, 2)
        self.rotd_cv = rotd
        self.mm_cv = np.einsum("tab,tsb->tsa", self.inv_jac, rotd)
        phys = self.v0[:, None, None, :] + np.einsum(
            "tab,snb->tsna", self.jac, cv_pts)
        self.xp_cv = phys
        kap = np.asarray(problem.kappa(phys[..., 0], phys[..., 1]), dtype=float)
        self.kap_cv = np.broadcast_to(kap, phys.shape[:3])
        sgn = np.zeros((n, s))
        sgn[ref.cv_plus, np.arange(s)] = -1.0
        sgn[ref.cv_minus, np.arange(s)] += 1.0
        self.sgn_cv = sgn

        # Element-boundary segments: same layout, plus neighbor-side data.
        dbd = ref.bd_end - ref.bd_start
        bd_pts = ref.bd_start[:, None, :] + tpar[None, :, None] * dbd[:, None, :]
        nb, nsb = bd_pts.shape[0], bd_pts.shape[1]
        vals_b, grads_b = basis.eval_basis(k, bd_pts.reshape(-1, 2))
        self.phi_bd = vals_b.reshape(nb, nsb, n)
        self.g_bd = grads_b.reshape(nb, nsb, n, 2)
        rotd_b = _rot(np.einsum("tab,sb->tsa", self.jac, dbd))  # (nt, B, 2)
        self.rotd_bd = rotd_b
        self.mm_bd = np.einsum("tab,tsb->tsa", self.inv_jac, rotd_b)
        phys_b = self.v0[:, None, None, :] + np.einsum(
            "tab,snb->tsna", self.jac, bd_pts)
        self.xp_bd = phys_b
        kap_b = np.asarray(problem.kappa(phys_b[..., 0], phys_b[..., 1]),
                           dtype=float)
        self.kap_bd = np.broadcast_to(kap_b, phys_b.shape[:3])
        own = np.zeros((n, nb))
        own[ref.bd_owner, np.arange(nb)] = 1.0
        self.own_bd = own

        nbr = mesh.tri_neighbors[:, ref.bd_facet]               # (nt, B)
        self.nbr_bd = nbr
        valid = nbr >= 0
        self.valid_bd = valid
        t_idx, s_idx = np.nonzero(valid)
        self.pair_t = t_idx
        self.pair_s = s_idx
        nbrs = nbr[t_idx, s_idx]
        self.pair_nbr = nbrs
        x_pair = phys_b[t_idx, s_idx]                           # (K, nsb, 2)
        rel = x_pair - self.v0[nbrs][:, None, :]
        r_pair = np.einsum("kab,kib->kia", self.inv_jac[nbrs], rel)
        _, grads_n = basis.eval_basis(k, r_pair.reshape(-1, 2))
        self.g_nbr = grads_n.reshape(len(t_idx), nsb, n, 2)
        self.mm_nbr = np.einsum("kab,kb->ka", self.inv_jac[nbrs],
                                rotd_b[t_idx, s_idx])


_CTX_LOCK = threading.Lock()
_CTX_CACHE = {}


def get_context(mesh, dofmap, problem, exactness=None, seg_points=None):
    """Context factory with identity-based caching (meshes are immutable)."""
    key = (id(mesh), id(dofmap), id(problem), exactness, seg_points)
    with _CTX_LOCK:
        ctx = _CTX_CACHE.get(key)
        if ctx is None or ctx.mesh is not mesh or ctx.dofmap is not dofmap \
                or ctx.problem is not problem:
            ctx = AssemblyContext(mesh, dofmap, problem, exactness, seg_points)
            if len(_CTX_CACHE) > 16:
                _CTX_CACHE.clear()
            _CTX_CACHE[key] = ctx
    return ctx


def _boundary_flux_terms(ctx, u_values, t0, t1):
    """Averaged normal-flux data on element-boundary segments.

    Returns (q_seg, e_phi): per-segment integrals of {kappa grad u_h}.n dl,
    shape (ct, B), and the rows e(u_h, phi_xi) = int_bd {kappa grad u_h}.n
    phi_xi dl, shape (ct, N).
    """
    sl = slice(t0, t1)
    cell = ctx.dofmap.cell_dofs
    u_loc = u_values[cell[sl]]
    q_own = np.einsum("tn,sinb,tsb->tsi", u_loc, ctx.g_bd, ctx.mm_bd[sl])

    q_nbr = q_own.copy()
    sel = (ctx.pair_t >= t0) & (ctx.pair_t < t1)
    if np.any(sel):
        kt = ctx.pair_t[sel] - t0
        ks = ctx.pair_s[sel]
        u_n = u_values[cell[ctx.pair_nbr[sel]]]
        qn = np.einsum("kn,kinb,kb->ki", u_n, ctx.g_nbr[sel], ctx.mm_nbr[sel])
        q_nbr[kt, ks] = qn
    q_avg = ctx.kap_bd[sl] * 0.5 * (q_own + q_nbr)

    q_seg = np.einsum("tsi,i->ts", q_avg, ctx.sw)
    e_phi = np.einsum("tsi,i,six->tx", q_avg, ctx.sw, ctx.phi_bd)
    return q_seg, e_phi


def _elemental_blocks(ctx, u_values, t0, t1):
    """Matrices, right-hand sides, defects, and boundary data for a chunk."""
    sl = slice(t0, t1)
    u_loc = u_values[ctx.dofmap.cell_dofs[sl]]
    a_term = np.einsum("tij,tj->ti", ctx.k_loc[sl], u_loc)
    q_seg, e_phi = _boundary_flux_terms(ctx, u_values, t0, t1)
    e_char = np.einsum("xs,ts->tx", ctx.own_bd, q_seg)
    e_term = e_char - e_phi

    beta = ctx.f_sub[sl] - ctx.b_loc[sl] + a_term + e_term
    bflux = ctx.b_loc[sl] - a_term - e_term
    defect = np.abs(beta.sum(axis=1))
    scale = np.linalg.norm(beta, axis=1) + ctx.f_scale[sl]

    c1 = ctx.sw[None, None, :] * ctx.kap_cv[sl]
    v = np.einsum("tsi,sinb,tsb->tsn", c1, ctx.g_cv, ctx.mm_cv[sl])
    mats = np.einsum("xs,tsn->txn", ctx.sgn_cv, v)
    gauge = u_loc.mean(axis=1)
    return mats, beta, gauge, defect, scale, bflux


def _solve_chunk(mats, beta, gauge, defect, scale, t0, gauge_shift):
    ct, n = beta.shape
    bad = defect > _DEFECT_RTOL * (scale + 1e-30)
    if np.any(bad):
        t = int(np.argmax(np.where(bad, defect, -np.inf)))
        raise PostprocessError(
            f"element {t0 + t}: compatibility defect {defect[t]:.3e} exceeds "
            f"{_DEFECT_RTOL:.0e} * scale ({scale[t]:.3e}); the elemental "
            "system is not solvable")
    bordered = np.zeros((ct, n + 1, n + 1))
    bordered[:, :n, :n] = mats
    bordered[:, :n, n] = 1.0
    bordered[:, n, :n] = 1.0
    rhs = np.empty((ct, n + 1))
    rhs[:, :n] = beta
    rhs[:, n] = n * (gauge + gauge_shift)
    sol = np.linalg.solve(bordered, rhs[:, :, None])[:, :, 0]
    alpha = sol[:, :n]

    resid = np.einsum("txn,tn->tx", mats, alpha) - beta
    resid -= resid.mean(axis=1, keepdims=True)
    rnorm = np.linalg.norm(resid, axis=1)
    mat_scale = np.linalg.norm(mats.reshape(ct, -1), axis=1) \
        * (1.0 + np.abs(gauge + gauge_shift))
    tol = _SOLVE_RTOL * (scale + mat_scale) + 1e-30
    bad = rnorm > tol
    if np.any(bad):
        t = int(np.argmax(np.where(bad, rnorm, -np.inf)))
        raise PostprocessError(
            f"element {t0 + t}: singular-system residual {rnorm[t]:.3e} "
            f"exceeds tolerance {tol[t]:.3e} after gauge fixing")
    return alpha


@dataclass
class ElementalSystem:
    """Auxiliary system of one element: matrix, right-hand side, and the
    compatibility defect |sum(rhs)| with its tolerance scale."""
    element: int
    matrix: np.ndarray        # (N, N)
    rhs: np.ndarray           # (N,)
    gauge_target: float       # mean of the global solution's local coefficients
    defect: float
    scale: float
    boundary_flux: np.ndarray  # (N,) recovered flux datum per subcell on d(tau)


@dataclass
class PostprocessedField:
    """Elementwise corrected field; its gradient is the recovered flux.

    `coeffs[t]` are nodal coefficients on element t (values are
    discontinuous across elements; only the gradient is the deliverable).
    `boundary_flux[t, xi]` is the recovered outward flux integral of
    -kappa grad(u) through the element-boundary part of subcell xi.
    """
    mesh: object
    dofmap: object
    coeffs: np.ndarray         # (nt, N)
    boundary_flux: np.ndarray  # (nt, N)
    defects: np.ndarray        # (nt,)

    @property
    def degree(self):
        return self.dofmap.degree

    def local_coeffs(self, t):
        return self.coeffs[t]

    def value_on(self, t, ref_points):
        vals, _ = basis.eval_basis(self.degree, ref_points)
        return vals @ self.coeffs[t]

    def grad_on(self, t, ref_points):
        _, grads = basis.eval_basis(self.degree, ref_points)
        _, _, inv, _ = self.mesh.element_maps()
        ref = np.einsum("pnd,n->pd", grads, self.coeffs[t])
        return ref @ inv[t]


def local_coefficients(field):
    """Per-element coefficient table (nt, N) for either field type."""
    if isinstance(field, PostprocessedField):
        return field.coeffs
    return field.values[field.dofmap.cell_dofs]


def assemble_elemental_system(mesh, partition, u_h, problem,
                              exactness=None, seg_points=None):
    """Auxiliary system of one element (partition carries the element id)."""
    ctx = get_context(mesh, u_h.dofmap, problem, exactness, seg_points)
    t = partition.element
    mats, beta, gauge, defect, scale, bflux = _elemental_blocks(
        ctx, u_h.values, t, t + 1)
    return ElementalSystem(element=t, matrix=mats[0], rhs=beta[0],
                           gauge_target=float(gauge[0]),
                           defect=float(defect[0]), scale=float(scale[0]),
                           boundary_flux=bflux[0])


def solve_elemental(system, gauge_shift=0.0):
    """Nodal coefficients from one elemental system.

    The matrix has the constants as its nullspace, so the system is solved
    with the mean-value constraint appended; `gauge_shift` moves the target
    mean and must not change the gradient.
    """
    alpha = _solve_chunk(
        mats=system.matrix[None, :, :],
        beta=system.rhs[None, :],
        gauge=np.array([system.gauge_target]),
        defect=np.array([system.defect]),
        scale=np.array([system.scale]),
        t0=system.element,
        gauge_shift=gauge_shift,
    )
    return alpha[0]


def postprocess_all(mesh, dofmap, partitions, u_h, problem, threads=None,
                    gauge_shift=0.0, exactness=None, seg_points=None,
                    chunk_size=_CHUNK):
    """Recover the conservative flux field on every element.

    Elements are processed in fixed-size chunks; chunks are independent and
    may run on a thread pool (capped by the CONSERVAFLUX_THREADS environment
    variable when `threads` is None). Results are written to disjoint slices,
    so the output is bit-identical for any thread count.
    """
    dualmesh._as_geometry(mesh, partitions, dofmap.degree)  # validate inputs
    ctx = get_context(mesh, dofmap, problem, exactness, seg_points)
    nt = mesh.n_triangles
    n = ctx.n
    coeffs = np.empty((nt, n))
    bflux = np.empty((nt, n))
    defects = np.empty(nt)

    def work(t0):
        t1 = min(t0 + chunk_size, nt)
        mats, beta, gauge, defect, scale, bf = _elemental_blocks(
            ctx, u_h.values, t0, t1)
        coeffs[t0:t1] = _solve_chunk(mats, beta, gauge, defect, scale,
                                     t0, gauge_shift)
        bflux[t0:t1] = bf
        defects[t0:t1] = defect

    starts = range(0, nt, chunk_size)
    nthreads = _thread_count(threads)
    if nthreads == 1:
        for t0 in starts:
            work(t0)
    else:
        with ThreadPoolExecutor(max_workers=nthreads) as pool:
            for fut in [pool.submit(work, t0) for t0 in starts]:
                fut.result()
    return PostprocessedField(mesh=mesh, dofmap=dofmap, coeffs=coeffs,
                              boundary_flux=bflux, defects=defects)


def interp_piecewise_constant(partition, w):
    """Nodal values of w as a piecewise-constant field on the subcells.

    `w` may be a FemField (its nodal coefficients on this element are used),
    a length-N coefficient vector, or a callable evaluated at the nodes.
    Entry xi is the constant on subcell polygonal xi.
    """
    if hasattr(w, "local_coeffs"):
        return np.asarray(w.local_coeffs(partition.element), dtype=float)
    if callable(w):
        pts = partition.node_coords
        return np.asarray(w(pts[:, 0], pts[:, 1]), dtype=float)
    vals = np.asarray(w, dtype=float)
    if vals.shape != (partition.n_nodes,):
        raise ValueError(f"expected {partition.n_nodes} nodal values, "
                         f"got shape {vals.shape}")
    return vals


def edge_average_flux(mesh, problem, u_h, element, start, end, npoints=None):
    """Averaged normal flux {kappa grad u_h}.n on a segment of d(tau).

    The normal is the outward one of `element`; on interior facets the two
    one-sided traces are averaged, on the domain boundary the single trace
    is used. Returns (points, values) at the segment Gauss points.
    """
    if npoints is None:
        npoints = solver.default_segment_points(u_h.degree)
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    verts = mesh.triangle_vertices(element)
    facet = -1
    for m in range(3):
        a = verts[m]
        d = verts[(m + 1) % 3] - a
        dlen2 = d @ d
        ta = (start - a) @ d / dlen2
        tb = (end - a) @ d / dlen2
        tol = 1e-10
        cross_a = d[0] * (start - a)[1] - d[1] * (start - a)[0]
        cross_b = d[0] * (end - a)[1] - d[1] * (end - a)[0]
        if abs(cross_a) > tol * dlen2 or abs(cross_b) > tol * dlen2:
            continue
        if -tol <= ta <= 1 + tol and -tol <= tb <= 1 + tol:
            facet = m
            normal = _rot(d) / np.linalg.norm(d)
            break
    if facet < 0:
        raise ValueError(f"segment {start}..{end} does not lie on the "
                         f"boundary of element {element}")
    srule = segment_rule(npoints)
    pts = start[None, :] + srule.points[:, None] * (end - start)[None, :]
    kap = np.asarray(problem.kappa(pts[:, 0], pts[:, 1]), dtype=float)
    kap = np.broadcast_to(kap, (len(pts),))

    v0, _, inv, _ = mesh.element_maps()

    def one_sided(t):
        ref = (pts - v0[t]) @ inv[t].T
        _, grads = basis.eval_basis(u_h.degree, ref)
        g_ref = np.einsum("pnd,n->pd", grads, u_h.values[u_h.dofmap.cell_dofs[t]])
        return (g_ref @ inv[t]) @ normal

    flux = one_sided(element)
    nbr = mesh.tri_neighbors[element, facet]
    if nbr >= 0:
        flux = 0.5 * (flux + one_sided(int(nbr)))
    return pts, kap * flux


def segment_flux_split(mesh, u_h, problem, element, local_node,
                       exactness=None, seg_points=None):
    """Per-segment recovered flux on the element-boundary part of a subcell.

    Splits the subcell's boundary-flux datum across its two element-boundary
    segments: each gets half of the jump-corrected balance minus its own
    averaged-flux integral. Returns (starts, ends, values). Raises on
    interior-node subcells, whose boundary part is empty.
    """
    ctx = get_context(mesh, u_h.dofmap, problem, exactness, seg_points)
    segs = np.nonzero(ctx.ref.bd_owner == local_node)[0]
    if segs.size == 0:
        raise ValueError(f"local node {local_node} has no element-boundary "
                         "segments (interior-node subcell)")
    u_loc = u_h.values[u_h.dofmap.cell_dofs[element]]
    a_xi = float(ctx.k_loc[element, local_node] @ u_loc)
    ell_xi = float(ctx.b_loc[element, local_node])
    q_seg, e_phi = _boundary_flux_terms(ctx, u_h.values, element, element + 1)
    e_phi_xi = float(e_phi[0, local_node])
    values = (ell_xi - a_xi + e_phi_xi) / 2.0 - q_seg[0, segs]
    v0, jac, _, _ = mesh.element_maps()
    starts = ctx.ref.bd_start[segs] @ jac[element].T + v0[element]
    ends = ctx.ref.bd_end[segs] @ jac[element].T + v0[element]
    return starts, ends, values


def control_volume_flux(ctx, coeffs):
    """Outward flux of -kappa grad(field) through the dual segments of every
    subcell, shape (nt, N). Row (t, xi) integrates over the control-volume
    part of subcell xi's boundary."""
    c1 = ctx.sw[None, None, :] * ctx.kap_cv
    q = np.einsum("tsi,sinb,tn,tsb->ts", c1, ctx.g_cv, coeffs, ctx.mm_cv)
    return np.einsum("xs,ts->tx", ctx.sgn_cv, q)


def flux_along_polyline(mesh, field, problem, points, npoints=None):
    """Integral of -kappa grad(field).n over each polyline segment.

    Segments are split where they cross mesh edges, each piece is
    integrated with the element it lies in, and the pieces are summed.
    The normal is the -90 degree rotation of the walking direction.
    """
    if npoints is None:
        npoints = solver.default_segment_points(field.degree)
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
        raise ValueError("polyline needs at least two (x, y) points")
    srule = segment_rule(npoints)
    coeffs = local_coefficients(field)
    v0, _, inv, _ = mesh.element_maps()
    e0 = mesh.vertices[mesh.edges[:, 0]]
    e1 = mesh.vertices[mesh.edges[:, 1]]

    out = np.empty(len(pts) - 1)
    for i in range(len(pts) - 1):
        p, q = pts[i], pts[i + 1]
        d = q - p
        seg_len = np.linalg.norm(d)
        normal = _rot(d) / seg_len
        params = _edge_crossings(p, d, e0, e1)
        total = 0.0
        for a, b in zip(params[:-1], params[1:]):
            if b - a < 1e-14:
                continue
            mid = p + 0.5 * (a + b) * d
            t = int(mesh.locate(mid[None, :])[0])
            if t < 0:
                raise ValueError(f"polyline leaves the mesh near {mid}")
            gpts = p + (a + srule.points * (b - a))[:, None] * d[None, :]
            ref = (gpts - v0[t]) @ inv[t].T
            _, grads = basis.eval_basis(field.degree, ref)
            g_ref = np.einsum("pnd,n->pd", grads, coeffs[t])
            gphys = g_ref @ inv[t]
            kap = np.asarray(problem.kappa(gpts[:, 0], gpts[:, 1]), dtype=float)
            kap = np.broadcast_to(kap, (len(gpts),))
            vals = -kap * (gphys @ normal)
            total += seg_len * (b - a) * float(srule.weights @ vals)
        out[i] = total
    return out


def _edge_crossings(p, d, e0, e1):
    """Sorted parameters in [0, 1] where p + t d crosses any mesh edge."""
    r = e1 - e0
    denom = d[0] * r[:, 1] - d[1] * r[:, 0]
    rel = e0 - p
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (rel[:, 0] * r[:, 1] - rel[:, 1] * r[:, 0]) / denom
        s = (rel[:, 0] * d[1] - rel[:, 1] * d[0]) / -denom
    ok = np.isfinite(t) & (t > 1e-12) & (t < 1 - 1e-12) & (s >= -1e-12) \
        & (s <= 1 + 1e-12)
    params = np.concatenate([[0.0], np.sort(np.unique(t[ok])), [1.0]])
    return params


def export_postprocessed_csv(field, path):
    """Write the corrected coefficients as "element,local_dof,x,y,alpha"."""
    import csv as _csv
    geo = dualmesh.DualGeometry(field.mesh, field.degree)
    nodes_ref = geo.ref.nodes
    v0, jac, _, _ = field.mesh.element_maps()
    with open(path, "w", newline="") as f:
        writer = _csv.writer(f)
        writer.writerow(["element", "local_dof", "x", "y", "alpha"])
        for t in range(field.mesh.n_triangles):
            pts = nodes_ref @ jac[t].T + v0[t]
            for i in range(len(nodes_ref)):
                writer.writerow([t, i, repr(float(pts[i, 0])),
                                 repr(float(pts[i, 1])),
                                 repr(float(field.coeffs[t, i]))])
