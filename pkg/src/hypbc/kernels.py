"""Feedback-kernel computation on the triangle 0 <= xi <= x <= 1.

The matrix kernel K solves a first-order hyperbolic system along the
characteristics of (lambda_i(x), lambda_j(xi)), with data on the diagonal
(for i != j), a reflection relation at xi = 0 tying the negative block to the
positive one, and artificial data on x = 1 and xi = 0 for the remaining
components.  The solver iterates the characteristic integral form to a fixed
point: every sweep re-traces nothing (paths are precomputed), interpolates the
previous iterate along the stored paths, and applies trapezoid quadrature.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .grids import SpatialGrid, TriangleGrid
from .plant import LinearPlant, JACOBIAN_STEP

__all__ = [
    "ArtificialData",
    "KernelField",
    "ResolventField",
    "TargetCoupling",
    "DiscontinuityCurve",
    "ResidualReport",
    "CompatibilityReport",
    "KernelConvergenceError",
    "TraceGeometryError",
    "CompatibilityError",
    "diagonal_trace_function",
    "default_artificial_data",
    "compatibility_check",
    "solve_kernel",
    "kernel_residual",
    "target_coupling",
    "inverse_kernel",
    "volterra_identity_residual",
]

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 200
C0_COMPAT_TOL = 1e-9


class KernelConvergenceError(RuntimeError):
    def __init__(self, message: str, history: np.ndarray):
        super().__init__(message)
        self.history = history


class TraceGeometryError(RuntimeError):
    """A characteristic left the triangle through a boundary that carries no
    data for its component; the assignment table and the speeds disagree."""


class CompatibilityError(ValueError):
    pass


# --- boundary data ----------------------------------------------------------


def diagonal_trace_function(plant: LinearPlant, i: int, j: int) -> Callable:
    """Diagonal value sigma_ij(x) / (lambda_i(x) - lambda_j(x)), 0-based i != j."""
    if i == j:
        raise ValueError("diagonal trace is defined for i != j only")

    def k(x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        sig = plant.coupling.value_at(x)[i, j]
        lam = plant.speeds.value_at(x)
        return sig / (lam[i] - lam[j])

    return k


def x_edge_range(n: int, m: int) -> list[tuple[int, int]]:
    """Components with artificial data on x = 1 (0-based): strictly-lower
    negative block and strictly-upper positive block."""
    out = [(i, j) for j in range(m) for i in range(j + 1, m)]
    out += [(i, j) for i in range(m, n) for j in range(i + 1, n)]
    return out


def xi_edge_range(n: int, m: int) -> list[tuple[int, int]]:
    """Components with explicit artificial data on xi = 0 (0-based):
    lower-triangular positive block, diagonal included."""
    return [(i, j) for j in range(m, n) for i in range(j, n)]


def reflection_range(n: int, m: int) -> list[tuple[int, int]]:
    """Components tied to the positive block at xi = 0 (0-based): upper
    triangle of the negative block, diagonal included."""
    return [(i, j) for i in range(m) for j in range(i, m)]


@dataclass(frozen=True)
class ArtificialData:
    """Closure data on x = 1 and xi = 0 for the under-determined components.

    ``x_edge[(i, j)]`` maps xi -> data on the outlet edge, ``xi_edge[(i, j)]``
    maps x -> data on the inlet edge; keys are 0-based component indices in the
    ranges of :func:`x_edge_range` / :func:`xi_edge_range`.
    """

    n: int
    m: int
    x_edge: dict
    xi_edge: dict

    def validate_ranges(self) -> None:
        if set(self.x_edge) != set(x_edge_range(self.n, self.m)):
            raise ValueError("x-edge table keys do not match the required range")
        if set(self.xi_edge) != set(xi_edge_range(self.n, self.m)):
            raise ValueError("xi-edge table keys do not match the required range")


def corner_slope(plant: LinearPlant, i: int, j: int) -> float:
    """Slope in xi at the corner (1, 1) that joins the x-edge data to the
    diagonal trace with one continuous derivative.

    The characteristic equation transfers the diagonal slope through
    lambda_i k' plus the zero-order row coupling; the solution-determined
    diagonal component k_ii is not data and is omitted from the sum.
    """
    lam = plant.speeds.value_at(1.0)[:, 0]
    lamp = plant.speeds.derivative_at(1.0)[:, 0]
    sig = plant.coupling.value_at(1.0)[:, :, 0]
    d = JACOBIAN_STEP
    kij = diagonal_trace_function(plant, i, j)
    dk = float((kij(1.0 + d) - kij(1.0 - d))[0]) / (2.0 * d)
    acc = lam[i] * dk
    for k in range(plant.n):
        if k == i:
            continue
        kik1 = float(diagonal_trace_function(plant, i, k)(1.0)[0])
        acc += (sig[k, j] + (lamp[j] if k == j else 0.0)) * kik1
    return acc / (lam[i] - lam[j])


def default_artificial_data(plant: LinearPlant) -> ArtificialData:
    """Linear-in-xi x-edge rows matching the diagonal trace value and slope at
    (1, 1); constant xi-edge rows (diagonal-trace value at 0, zero on i = j)."""
    n, m = plant.n, plant.m
    x_edge = {}
    for (i, j) in x_edge_range(n, m):
        val = float(diagonal_trace_function(plant, i, j)(1.0)[0])
        slope = corner_slope(plant, i, j)

        def f(xi, a=val, s=slope):
            xi = np.asarray(xi, dtype=float)
            return a + (xi - 1.0) * s

        x_edge[(i, j)] = f
    xi_edge = {}
    for (i, j) in xi_edge_range(n, m):
        if i == j:
            xi_edge[(i, j)] = lambda x: np.zeros(np.asarray(x, dtype=float).shape)
        else:
            val = float(diagonal_trace_function(plant, i, j)(0.0)[0])

            def g(x, a=val):
                return np.full(np.asarray(x, dtype=float).shape, a)

            xi_edge[(i, j)] = g
    return ArtificialData(n, m, x_edge, xi_edge)


@dataclass(frozen=True)
class CompatibilityReport:
    """Corner-compatibility residuals of the x-edge table at (1, 1)."""

    c0: dict
    c1: dict

    @property
    def max_c0(self) -> float:
        return max(self.c0.values(), default=0.0)

    @property
    def max_c1(self) -> float:
        return max(self.c1.values(), default=0.0)


def compatibility_check(plant: LinearPlant, data: ArtificialData) -> CompatibilityReport:
    """Value and slope mismatch between the x-edge table and the diagonal trace
    at the corner (1, 1); slopes by central differences."""
    data.validate_ranges()
    c0, c1 = {}, {}
    d = JACOBIAN_STEP
    for (i, j), f in data.x_edge.items():
        k1_corner = float(np.asarray(f(1.0)))
        k_corner = float(diagonal_trace_function(plant, i, j)(1.0)[0])
        c0[(i, j)] = abs(k1_corner - k_corner)
        table_slope = float(np.asarray(f(1.0 + d)) - np.asarray(f(1.0 - d))) / (2.0 * d)
        c1[(i, j)] = abs(table_slope - corner_slope(plant, i, j))
    return CompatibilityReport(c0, c1)


# --- characteristic tracing --------------------------------------------------


def _component_geometry(i: int, j: int, m: int) -> tuple[float, bool, bool, bool]:
    """Trace direction and the boundaries that carry data for component (i, j)."""
    neg_i, neg_j = i < m, j < m
    if neg_i and neg_j:
        direction = 1.0 if i <= j else -1.0
    elif neg_i:
        direction = 1.0
    elif neg_j:
        direction = -1.0
    else:
        direction = 1.0 if i < j else -1.0
    diag_ok = i != j
    x_edge_ok = (j < i < m) or (m <= i < j)
    xi_edge_ok = (i <= j < m) or (m <= j <= i)
    return direction, diag_ok, x_edge_ok, xi_edge_ok


def _rk4(x, xi, ds, vel):
    k1x, k1s = vel(x, xi)
    k2x, k2s = vel(x + 0.5 * ds * k1x, xi + 0.5 * ds * k1s)
    k3x, k3s = vel(x + 0.5 * ds * k2x, xi + 0.5 * ds * k2s)
    k4x, k4s = vel(x + ds * k3x, xi + ds * k3s)
    xn = x + (ds / 6.0) * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
    xin = xi + (ds / 6.0) * (k1s + 2.0 * k2s + 2.0 * k3s + k4s)
    return xn, xin


@dataclass
class _ComponentTrace:
    i: int
    j: int
    direction: float
    seg: np.ndarray
    ds: np.ndarray
    idx4: np.ndarray
    w4: np.ndarray
    coeff: np.ndarray
    term_type: np.ndarray
    term_coord: np.ndarray
    term_value: np.ndarray
    refl_nodes: np.ndarray
    refl_lx: np.ndarray
    refl_w: np.ndarray
    refl_coef: np.ndarray


_TERM_DIAG, _TERM_X_EDGE, _TERM_XI_EDGE = 1, 2, 3
_RECORD_STRIDE = 2  # record every other substep: quadrature spacing ~ one cell


def _trace_component(i: int, j: int, plant: LinearPlant, tri: TriangleGrid):
    """Trace the characteristic of component (i, j) from every triangle node to
    its data boundary.  Returns entry arrays sorted per node plus terminal info.
    """
    N = tri.base.n_cells
    h = tri.h
    pp, qq = tri.node_indices()
    xs = tri.base.nodes
    X0, XI0 = xs[pp], xs[qq]
    M = X0.size
    m = plant.m
    direction, diag_ok, x_edge_ok, xi_edge_ok = _component_geometry(i, j, m)

    fi, fj = plant.speeds.funcs[i], plant.speeds.funcs[j]

    def vel(x, xi):
        xc = np.clip(x, 0.0, 1.0)
        xic = np.clip(xi, 0.0, 1.0)
        vx = direction * np.broadcast_to(np.asarray(fi(xc), dtype=float), x.shape)
        vs = direction * np.broadcast_to(np.asarray(fj(xic), dtype=float), xi.shape)
        return vx, vs

    vmax = plant.speeds.max_abs
    vmin = plant.speeds.min_abs
    ds_sub = h / (2.0 * vmax)
    max_sub = int(np.ceil(8.0 * vmax / vmin * max(N, 1) / min(_RECORD_STRIDE, 2))) + 64

    term_type = np.zeros(M, dtype=np.int8)
    term_coord = np.zeros(M)
    on_diag, on_xi, on_x1 = pp == qq, qq == 0, pp == N
    if diag_ok:
        term_type[on_diag] = _TERM_DIAG
        term_coord[on_diag] = X0[on_diag]
    if xi_edge_ok:
        sel = on_xi & (term_type == 0)
        term_type[sel] = _TERM_XI_EDGE
        term_coord[sel] = X0[sel]
    if x_edge_ok:
        sel = on_x1 & (term_type == 0)
        term_type[sel] = _TERM_X_EDGE
        term_coord[sel] = XI0[sel]

    ids = np.nonzero(term_type == 0)[0]
    Xa, XIa = X0[ids].copy(), XI0[ids].copy()
    acc = np.zeros(ids.size)

    ent_ids = [np.arange(M, dtype=np.int64)]
    ent_x = [X0.copy()]
    ent_xi = [XI0.copy()]
    ent_ds = [np.zeros(M)]
    ent_batch = [np.zeros(M, dtype=np.int32)]
    batch_no = 0
    sub = 0
    while ids.size:
        sub += 1
        if sub > max_sub:
            raise TraceGeometryError(
                f"component ({i + 1},{j + 1}): characteristic tracing exceeded "
                f"{max_sub} substeps without reaching a data boundary"
            )
        X1, XI1 = _rk4(Xa, XIa, ds_sub, vel)
        if not diag_ok:
            # the diagonal is invariant for equal indices; clamp grazing noise
            np.minimum(XI1, X1, out=XI1)
        ga = np.stack((1.0 - X1, XI1, X1 - XI1))
        crossed = (ga < 0.0).any(axis=0)
        if np.any(crossed):
            gb = np.stack((1.0 - Xa[crossed], XIa[crossed], Xa[crossed] - XIa[crossed]))
            gac = ga[:, crossed]
            with np.errstate(divide="ignore", invalid="ignore"):
                theta = np.where(gac < 0.0, gb / np.maximum(gb - gac, 1e-300), np.inf)
            which = np.argmin(theta, axis=0)
            tmin = np.clip(theta[which, np.arange(which.size)], 0.0, 1.0)
            allowed = np.array([x_edge_ok, xi_edge_ok, diag_ok])
            if not np.all(allowed[which]):
                bad = int(which[~allowed[which]][0])
                name = ("x = 1", "xi = 0", "the diagonal")[bad]
                raise TraceGeometryError(
                    f"component ({i + 1},{j + 1}) reached {name}, which carries "
                    "no data for it"
                )
            Xc, XIc = _rk4(Xa[crossed], XIa[crossed], ds_sub * tmin, vel)
            # land exactly on the detected boundary
            hit_x1 = which == 0
            hit_xi = which == 1
            hit_dg = which == 2
            Xc[hit_x1] = 1.0
            XIc[hit_x1] = np.clip(XIc[hit_x1], 0.0, 1.0)
            XIc[hit_xi] = 0.0
            Xc[hit_xi] = np.clip(Xc[hit_xi], 0.0, 1.0)
            mid = 0.5 * (Xc[hit_dg] + XIc[hit_dg])
            mid = np.clip(mid, 0.0, 1.0)
            Xc[hit_dg] = mid
            XIc[hit_dg] = mid
            cid = ids[crossed]
            ttype = np.where(hit_x1, _TERM_X_EDGE, np.where(hit_xi, _TERM_XI_EDGE, _TERM_DIAG))
            term_type[cid] = ttype
            term_coord[cid] = np.where(hit_x1, XIc, Xc)
            batch_no += 1
            ent_ids.append(cid)
            ent_x.append(Xc)
            ent_xi.append(XIc)
            ent_ds.append(acc[crossed] + tmin * ds_sub)
            ent_batch.append(np.full(cid.size, batch_no, dtype=np.int32))
        keep = ~crossed
        ids, Xa, XIa, acc = ids[keep], X1[keep], XI1[keep], acc[keep]
        if ids.size:
            if sub % _RECORD_STRIDE == 0:
                batch_no += 1
                ent_ids.append(ids.copy())
                ent_x.append(Xa.copy())
                ent_xi.append(XIa.copy())
                ent_ds.append(acc + ds_sub)
                ent_batch.append(np.full(ids.size, batch_no, dtype=np.int32))
                acc = np.zeros(ids.size)
            else:
                acc = acc + ds_sub

    seg = np.concatenate(ent_ids)
    ex = np.concatenate(ent_x)
    exi = np.concatenate(ent_xi)
    eds = np.concatenate(ent_ds)
    ebatch = np.concatenate(ent_batch)
    order = np.lexsort((ebatch, seg))
    seg = seg[order].astype(np.int64)
    ex, exi, eds = ex[order], exi[order], eds[order]
    # first entry of each node block carries no incoming interval
    first = np.ones(seg.size, dtype=bool)
    first[1:] = seg[1:] != seg[:-1]
    eds[first] = 0.0
    return seg, ex, exi, eds, term_type, term_coord, direction


def _interp4(x, xi, N):
    """Four-corner interpolation stencils on the triangle grid: bilinear in
    interior cells, linear on the three valid corners of diagonal cells."""
    P1 = N + 1
    h = 1.0 / N
    px = np.clip(np.floor(x / h).astype(np.int64), 0, N - 1)
    qx = np.clip(np.floor(xi / h).astype(np.int64), 0, N - 1)
    qx = np.minimum(qx, px)
    fx = np.clip(x / h - px, 0.0, 1.0)
    fq = np.clip(xi / h - qx, 0.0, 1.0)
    i00 = px * P1 + qx
    i10 = i00 + P1
    i01 = i00 + 1
    i11 = i10 + 1
    idx4 = np.stack((i00, i10, i01, i11), axis=1)
    w4 = np.empty((x.size, 4))
    w4[:, 0] = (1.0 - fx) * (1.0 - fq)
    w4[:, 1] = fx * (1.0 - fq)
    w4[:, 2] = (1.0 - fx) * fq
    w4[:, 3] = fx * fq
    dg = qx == px
    if np.any(dg):
        fqd = np.minimum(fq[dg], fx[dg])
        w4[dg, 0] = 1.0 - fx[dg]
        w4[dg, 1] = fx[dg] - fqd
        w4[dg, 2] = 0.0
        w4[dg, 3] = fqd
        idx4[dg, 2] = 0
    return idx4.astype(np.int32), w4


def _prepare_component(
    i: int, j: int, plant: LinearPlant, tri: TriangleGrid, data: ArtificialData
) -> _ComponentTrace:
    N = tri.base.n_cells
    seg, ex, exi, eds, term_type, term_coord, direction = _trace_component(
        i, j, plant, tri
    )
    idx4, w4 = _interp4(ex, exi, N)
    sig = plant.coupling.value_at(exi)
    coeff = np.ascontiguousarray(sig[:, j, :])
    del sig
    coeff[j] += plant.speeds.derivative_at(exi)[j]

    n, m = plant.n, plant.m
    M = term_type.size
    term_value = np.zeros(M)
    is_diag = term_type == _TERM_DIAG
    if np.any(is_diag):
        term_value[is_diag] = diagonal_trace_function(plant, i, j)(term_coord[is_diag])
    is_x1 = term_type == _TERM_X_EDGE
    if np.any(is_x1):
        term_value[is_x1] = np.asarray(data.x_edge[(i, j)](term_coord[is_x1]))
    is_xi = term_type == _TERM_XI_EDGE
    refl_nodes = np.zeros(0, dtype=np.int64)
    refl_lx = np.zeros(0, dtype=np.int64)
    refl_w = np.zeros(0)
    refl_coef = np.zeros(n - m)
    if np.any(is_xi):
        if (i, j) in data.xi_edge:
            term_value[is_xi] = np.asarray(data.xi_edge[(i, j)](term_coord[is_xi]))
        else:
            # reflection relation: filled from the previous iterate every sweep
            refl_nodes = np.nonzero(is_xi)[0]
            xt = term_coord[refl_nodes]
            refl_lx = np.clip(np.floor(xt * N).astype(np.int64), 0, N - 1)
            refl_w = xt * N - refl_lx
            lam0 = plant.speeds.value_at(0.0)[:, 0]
            refl_coef = -lam0[m:] * plant.reflection[:, j] / lam0[j]
    return _ComponentTrace(
        i, j, direction, seg, eds, idx4, w4, coeff,
        term_type, term_coord, term_value, refl_nodes, refl_lx, refl_w, refl_coef,
    )


# --- discontinuity curves -----------------------------------------------------


@dataclass(frozen=True)
class DiscontinuityCurve:
    """Characteristic polyline along which kernel regularity may drop.

    ``component`` is 0-based; ``origin`` names the emitting corner."""

    component: tuple[int, int]
    origin: str
    points: np.ndarray

    def __len__(self):
        return len(self.points)


def _characteristic_through(plant: LinearPlant, i: int, j: int, x0, xi0, tri):
    """Integrate d xi / d x = lambda_j(xi) / lambda_i(x) from (x0, xi0) in the
    direction of increasing or decreasing x until the triangle is left."""
    h = tri.h
    fi, fj = plant.speeds.funcs[i], plant.speeds.funcs[j]

    def slope(x, xi):
        lx = float(np.asarray(fi(np.clip(x, 0.0, 1.0))).reshape(-1)[0])
        ls = float(np.asarray(fj(np.clip(xi, 0.0, 1.0))).reshape(-1)[0])
        return ls / lx

    going_up = x0 < 0.5  # from (0,0) move right, from (1,1) move left
    dx = 0.5 * h if going_up else -0.5 * h
    pts = [(x0, xi0)]
    x, xi = x0, xi0
    for _ in range(int(4.0 / abs(dx)) + 4):
        k1 = slope(x, xi)
        k2 = slope(x + 0.5 * dx, xi + 0.5 * dx * k1)
        k3 = slope(x + 0.5 * dx, xi + 0.5 * dx * k2)
        k4 = slope(x + dx, xi + dx * k3)
        x_new = x + dx
        xi_new = xi + (dx / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if going_up and (x_new > 1.0 or xi_new > x_new):
            break
        if (not going_up) and (xi_new < 0.0 or x_new < 0.0):
            frac = xi / max(xi - xi_new, 1e-300)
            pts.append((x + frac * dx, 0.0))
            break
        x, xi = x_new, xi_new
        pts.append((x, xi))
        if going_up and x >= 1.0:
            break
    return np.asarray(pts)


C1_CURVE_TOL = 1e-6


def _discontinuity_curves(
    plant: LinearPlant,
    tri: TriangleGrid,
    data: ArtificialData,
    compat: CompatibilityReport,
    K: np.ndarray,
) -> tuple[DiscontinuityCurve, ...]:
    """Characteristic curves along which kernel regularity may drop.

    Same-sign index pairs always emit a curve from the origin corner (the
    diagonal and inlet-edge data meet there with no smoothness guarantee).
    An x-edge component emits a curve from the outlet corner when its table
    mismatches the diagonal trace in value, or in slope once the
    solution-determined corner term (unknowable before the solve) is added to
    the one-sided compatibility slope."""
    n, m = plant.n, plant.m
    curves = []
    for ii in range(m):
        for jj in range(ii + 1, m):
            pts = _characteristic_through(plant, ii, jj, 0.0, 0.0, tri)
            if len(pts) > 1:
                curves.append(DiscontinuityCurve((ii, jj), "origin-corner", pts))
    for jj in range(m, n):
        for ii in range(jj + 1, n):
            pts = _characteristic_through(plant, ii, jj, 0.0, 0.0, tri)
            if len(pts) > 1:
                curves.append(DiscontinuityCurve((ii, jj), "origin-corner", pts))
    lam1 = plant.speeds.value_at(1.0)[:, 0]
    sig1 = plant.coupling.value_at(1.0)[:, :, 0]
    d = JACOBIAN_STEP
    for (ii, jj) in x_edge_range(n, m):
        f = data.x_edge[(ii, jj)]
        table_slope = float(np.asarray(f(1.0 + d)) - np.asarray(f(1.0 - d))) / (2.0 * d)
        corner_term = sig1[ii, jj] * K[ii, ii, -1, -1] / (lam1[ii] - lam1[jj])
        c1_full = abs(table_slope - corner_slope(plant, ii, jj) - corner_term)
        if compat.c0[(ii, jj)] > C0_COMPAT_TOL or c1_full > C1_CURVE_TOL:
            pts = _characteristic_through(plant, ii, jj, 1.0, 1.0, tri)
            if len(pts) > 1:
                curves.append(
                    DiscontinuityCurve((ii, jj), "outlet-corner-mismatch", pts)
                )
    return tuple(curves)


CURVE_BAND_CELLS = 3


def curve_band_mask(tri: TriangleGrid, curves, width: int = CURVE_BAND_CELLS) -> np.ndarray:
    """Nodes within ``width`` cells (max-norm) of any of the given polylines.

    Transport of a jump through repeated stencil interpolation smears it over a
    fixed number of cells independent of resolution, so a fixed cell-width band
    covers the smeared zone at every grid while its area still vanishes as
    O(h)."""
    P1 = tri.base.n_nodes
    N = tri.base.n_cells
    mask = np.zeros((P1, P1), dtype=bool)
    offs = range(-width, width + 1)
    for curve in curves:
        pts = curve.points
        px = np.round(pts[:, 0] * N).astype(np.int64)
        qx = np.round(pts[:, 1] * N).astype(np.int64)
        for dp in offs:
            for dq in offs:
                a = np.clip(px + dp, 0, N)
                b = np.clip(qx + dq, 0, N)
                mask[a, b] = True
    return mask


# --- the solver ---------------------------------------------------------------


@dataclass(frozen=True)
class KernelField:
    """Converged kernel samples on the triangle plus iteration metadata."""

    tri: TriangleGrid
    m: int
    values: np.ndarray  # (n, n, P1, P1); entries with xi > x are zero padding
    curves: tuple
    iterations: int
    final_update: float
    update_history: np.ndarray
    tol: float

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def control_row(self) -> np.ndarray:
        """K at the controlled edge x = 1, shape (n, n, P1)."""
        return self.values[:, :, -1, :]

    @property
    def inlet_values(self) -> np.ndarray:
        """K at xi = 0, shape (n, n, P1)."""
        return self.values[:, :, :, 0]


def solve_kernel(
    plant: LinearPlant,
    n_cells: int | TriangleGrid | None = None,
    data: Optional[ArtificialData] = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    strict_compat: bool = True,
) -> KernelField:
    """Solve the kernel system to a fixed point of its characteristic integral
    form.

    Paths are traced once (classical 4-stage steps, half-cell substep),
    quadrature is trapezoid along each path, and every sweep reads only the
    previous iterate.  Stops when the max update drops below ``tol``.
    With ``strict_compat`` the x-edge table must match the diagonal trace at
    (1, 1); disable it to study deliberately mismatched data, in which case the
    mismatch curves from (1, 1) are recorded.
    """
    if n_cells is None:
        tri = TriangleGrid(plant.grid)
    elif isinstance(n_cells, TriangleGrid):
        tri = n_cells
    else:
        tri = TriangleGrid(SpatialGrid(int(n_cells)))
    if data is None:
        data = default_artificial_data(plant)
    data.validate_ranges()
    compat = compatibility_check(plant, data)
    if strict_compat and compat.max_c0 > C0_COMPAT_TOL:
        worst = max(compat.c0, key=compat.c0.get)
        raise CompatibilityError(
            f"x-edge data mismatches the diagonal trace at (1,1) by "
            f"{compat.max_c0:.3e} in component {tuple(k + 1 for k in worst)}; "
            "fix the table or pass strict_compat=False"
        )

    n, m = plant.n, plant.m
    P1 = tri.base.n_nodes
    pp, qq = tri.node_indices()
    traces = [
        [_prepare_component(i, j, plant, tri, data) for j in range(n)]
        for i in range(n)
    ]

    K = np.zeros((n, n, P1, P1))
    history = []
    converged = False
    iterations = 0
    for it in range(1, max_iter + 1):
        iterations = it
        Kflat = K.reshape(n, n, -1)
        Knew = np.zeros_like(K)
        delta = 0.0
        for i in range(n):
            for j in range(n):
                tr = traces[i][j]
                rhs = np.zeros(tr.seg.size)
                for k in range(n):
                    vals = np.take(Kflat[i, k], tr.idx4)
                    rhs -= tr.coeff[k] * np.einsum("ec,ec->e", vals, tr.w4)
                contrib = np.empty_like(rhs)
                contrib[0] = 0.0
                contrib[1:] = 0.5 * (rhs[1:] + rhs[:-1]) * tr.ds[1:]
                integral = np.bincount(tr.seg, weights=contrib, minlength=pp.size)
                tval = tr.term_value
                if tr.refl_nodes.size:
                    tval = tval.copy()
                    row = K[i, m:, :, 0]  # (n - m, P1)
                    left = row[:, tr.refl_lx]
                    right = row[:, tr.refl_lx + 1]
                    interp = left * (1.0 - tr.refl_w) + right * tr.refl_w
                    tval[tr.refl_nodes] = tr.refl_coef @ interp
                node_vals = tval - tr.direction * integral
                Knew[i, j, pp, qq] = node_vals
                delta = max(delta, float(np.max(np.abs(node_vals - K[i, j, pp, qq]))))
        history.append(delta)
        K = Knew
        if delta < tol:
            converged = True
            break
    history = np.asarray(history)
    if not converged:
        raise KernelConvergenceError(
            f"kernel iteration did not reach tol={tol:g} in {max_iter} sweeps "
            f"(last update {history[-1]:.3e})",
            history,
        )
    curves = _discontinuity_curves(plant, tri, data, compat, K)
    return KernelField(tri, m, K, curves, iterations, float(history[-1]), history, tol)


# --- residuals and derived objects ---------------------------------------------


@dataclass(frozen=True)
class ResidualReport:
    """Interior-equation and boundary residuals of a kernel field."""

    max_per_component: np.ndarray  # (n, n)
    l2_per_component: np.ndarray   # (n, n)
    reflection_max: float
    diagonal_max: float
    excluded_fraction: float

    @property
    def max_interior(self) -> float:
        return float(np.max(self.max_per_component))


def kernel_residual(field: KernelField, plant: LinearPlant) -> ResidualReport:
    """First-order one-sided finite-difference residual of the kernel system,
    excluding nodes within one cell of recorded discontinuity curves (and the
    two corner nodes whose stencils leave the triangle)."""
    tri = field.tri
    N = tri.base.n_cells
    h = tri.h
    P1 = N + 1
    xs = tri.base.nodes
    K = field.values
    n, m = plant.n, plant.m
    lam = plant.speeds.samples
    lamp = plant.speeds.derivative_at(xs)
    sig = plant.coupling.samples

    tril = tri.mask
    base_valid = tril.copy()
    base_valid[0, 0] = False
    base_valid[N, N] = False

    row_masks = []
    for i in range(n):
        row_curves = [c for c in field.curves if c.component[0] == i]
        row_masks.append(curve_band_mask(tri, row_curves))

    max_pc = np.zeros((n, n))
    l2_pc = np.zeros((n, n))
    excluded = 0
    total = 0
    for i in range(n):
        for j in range(n):
            Kij = K[i, j]
            dx = np.zeros((P1, P1))
            dx[:-1, :] = (Kij[1:, :] - Kij[:-1, :]) / h
            dx[N, :] = (Kij[N, :] - Kij[N - 1, :]) / h
            dxi = np.zeros((P1, P1))
            dxi[:, 1:] = (Kij[:, 1:] - Kij[:, :-1]) / h
            dxi[:, 0] = (Kij[:, 1] - Kij[:, 0]) / h
            res = lam[i][:, None] * dx + lam[j][None, :] * dxi
            for k in range(n):
                res += (sig[k, j][None, :] + (lamp[j][None, :] if k == j else 0.0)) * K[i, k]
            valid = base_valid & ~row_masks[i]
            total += int(np.sum(base_valid))
            excluded += int(np.sum(base_valid & row_masks[i]))
            vals = res[valid]
            max_pc[i, j] = float(np.max(np.abs(vals)))
            l2_pc[i, j] = float(np.sqrt(h * h * np.sum(vals**2)))

    # reflection relation at xi = 0 for the upper negative block; the origin
    # corner of an off-diagonal component stores the diagonal-trace limit (a
    # genuine two-limit point when data conflict there), so it is skipped
    lam0 = plant.speeds.value_at(0.0)[:, 0]
    refl_max = 0.0
    for (i, j) in reflection_range(n, m):
        pred = -(lam0[m:] * plant.reflection[:, j]) @ K[i, m:, :, 0] / lam0[j]
        lo = 1 if i != j else 0
        refl_max = max(refl_max, float(np.max(np.abs(K[i, j, lo:, 0] - pred[lo:]))))

    diag_max = 0.0
    didx = np.arange(P1)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            kij = diagonal_trace_function(plant, i, j)(xs)
            diag_max = max(diag_max, float(np.max(np.abs(K[i, j, didx, didx] - kij))))

    return ResidualReport(
        max_pc, l2_pc, refl_max, diag_max, excluded / max(total, 1)
    )


@dataclass(frozen=True)
class TargetCoupling:
    """Zero-order target coupling G(x): columns beyond the negative block are
    zero and the negative-negative block is strictly lower triangular."""

    grid: SpatialGrid
    m: int
    samples: np.ndarray  # (n, n, P1)

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def max_abs(self) -> float:
        return float(np.max(np.abs(self.samples)))

    def structure_residual(self) -> float:
        n, m = self.n, self.m
        worst = 0.0
        for i in range(n):
            for j in range(n):
                structural_zero = (j >= m) or (i < m and i <= j)
                if structural_zero:
                    worst = max(worst, float(np.max(np.abs(self.samples[i, j]))))
        return worst

    def value_at(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        xs = self.grid.nodes
        out = np.empty((self.n, self.n, x.size))
        for i in range(self.n):
            for j in range(self.n):
                out[i, j] = np.interp(x, xs, self.samples[i, j])
        return out


def target_coupling(field: KernelField, plant: LinearPlant) -> TargetCoupling:
    """G(x) = -K(x, 0) Lambda(0) [[I, 0], [Q, 0]] sampled at the grid nodes.

    At x = 0 the inlet-edge limit of the kernel is used: where the stored
    corner node carries the diagonal-trace limit instead, the reflection
    relation reconstructs the edge value from the positive-block row."""
    n, m = plant.n, plant.m
    lam0 = plant.speeds.value_at(0.0)[:, 0]
    inlet = field.inlet_values.copy()
    for (i, j) in reflection_range(n, m):
        if i != j:
            inlet[i, j, 0] = -(lam0[m:] * plant.reflection[:, j]) @ inlet[i, m:, 0] / lam0[j]
    tmat = np.zeros((n, n))
    tmat[:m, :m] = np.eye(m)
    tmat[m:, :m] = plant.reflection
    b = np.diag(lam0) @ tmat
    g = -np.einsum("ikp,kj->ijp", inlet, b)
    return TargetCoupling(field.tri.base, m, g)


@dataclass(frozen=True)
class ResolventField:
    """Inverse-transformation kernel on the same triangle."""

    tri: TriangleGrid
    values: np.ndarray
    iterations: int
    final_update: float


def _volterra_product(A: np.ndarray, B: np.ndarray, h: float) -> np.ndarray:
    """Trapezoid quadrature of integral_xi^x A(x, s) B(s, xi) ds at all nodes.

    A, B are (n, n, P1, P1) lower-triangle fields (zero where s > x)."""
    n, P1 = A.shape[0], A.shape[2]
    Ab = A.transpose(0, 2, 1, 3).reshape(n * P1, n * P1)
    Bb = B.transpose(0, 2, 1, 3).reshape(n * P1, n * P1)
    full = (Ab @ Bb).reshape(n, P1, n, P1).transpose(0, 2, 1, 3)
    # endpoint halving: subtract half of the s = xi and s = x terms
    diagB = np.einsum("kjqq->kjq", B)
    diagA = np.einsum("ikpp->ikp", A)
    low = np.einsum("ikpq,kjq->ijpq", A, diagB)
    high = np.einsum("ikp,kjpq->ijpq", diagA, B)
    out = h * (full - 0.5 * (low + high))
    tril = np.tril(np.ones((P1, P1), dtype=bool))
    out[:, :, ~tril] = 0.0
    return out


def inverse_kernel(
    field: KernelField, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER
) -> ResolventField:
    """Resolvent L of the forward kernel: the fixed point of
    L = K + integral K L, by successive approximation with trapezoid quadrature."""
    K = field.values
    h = field.tri.h
    L = K.copy()
    for it in range(1, max_iter + 1):
        Lnew = K + _volterra_product(K, L, h)
        delta = float(np.max(np.abs(Lnew - L)))
        L = Lnew
        if delta < tol:
            return ResolventField(field.tri, L, it, delta)
    raise KernelConvergenceError(
        f"inverse kernel iteration stalled at update {delta:.3e}", np.array([delta])
    )


def volterra_identity_residual(field: KernelField, resolvent: ResolventField) -> float:
    """Max residual of the reciprocal identity L = K + integral L K (the
    mirror of the defining equation; equality holds for exact kernels)."""
    K, L = field.values, resolvent.values
    res = L - K - _volterra_product(L, K, field.tri.h)
    return float(np.max(np.abs(res)))
