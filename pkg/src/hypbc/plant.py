"""Plant descriptions for 1-D first-order coupled hyperbolic systems.

The linear plant is  w_t + Lambda(x) w_x = Sigma(x) w  on 0 < x < 1 with m
negative-speed channels (controlled at x = 1) and n - m positive-speed channels
reflected at x = 0 through a constant matrix.  The quasilinear plant
u_t + A(x, u) u_x = F(x, u) carries evaluators plus optional analytic Jacobians
and is reduced to a linear plant (and a diagonal scaling that removes the
diagonal zero-order terms) by :func:`linearize`.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np

from .grids import SpatialGrid

__all__ = [
    "SpeedProfile",
    "CouplingProfile",
    "LinearPlant",
    "QuasilinearPlant",
    "ScalingProfile",
    "NonlinearResidual",
    "SpeedOrderingError",
    "validate_speeds",
    "diagonal_scaling",
    "linearize",
    "nonlinear_residuals",
    "coupling_jacobian_at",
    "reflection_jacobian",
]

SPEED_MARGIN = 1e-9      # reject |lambda_i| below this: the system degenerates
JACOBIAN_STEP = 1e-6     # central-difference step for numeric Jacobians


class SpeedOrderingError(ValueError):
    pass


@dataclass(frozen=True)
class SpeedProfile:
    """Per-channel transport speeds lambda_i(x) as callables on [0, 1].

    Channels 1..m travel leftward (negative speed), channels m+1..n rightward.
    """

    grid: SpatialGrid
    m: int
    funcs: tuple

    @property
    def n(self) -> int:
        return len(self.funcs)

    @cached_property
    def samples(self) -> np.ndarray:
        return self.value_at(self.grid.nodes)

    def value_at(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return np.stack([np.broadcast_to(f(x), x.shape) for f in self.funcs])

    def derivative_at(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        d = JACOBIAN_STEP
        return (self.value_at(x + d) - self.value_at(x - d)) / (2.0 * d)

    @property
    def max_abs(self) -> float:
        return float(np.max(np.abs(self.samples)))

    @property
    def min_abs(self) -> float:
        return float(np.min(np.abs(self.samples)))


def validate_speeds(speeds: SpeedProfile) -> None:
    """Check strict ordering lambda_1 < .. < lambda_m < 0 < .. < lambda_n at
    every grid node, with a hyperbolicity margin on |lambda_i|.

    Raises :class:`SpeedOrderingError` naming the first offending node.
    """
    vals = speeds.samples
    n, m = speeds.n, speeds.m
    if not 1 <= m < n:
        raise SpeedOrderingError(f"need n > m >= 1, got n={n}, m={m}")
    xs = speeds.grid.nodes
    small = np.abs(vals) < SPEED_MARGIN
    if np.any(small):
        i, k = np.argwhere(small)[0]
        raise SpeedOrderingError(
            f"speed {i + 1} at node {k} (x={xs[k]:.6g}) is {vals[i, k]:.3e}, "
            f"within {SPEED_MARGIN:g} of zero"
        )
    sign_bad = np.zeros_like(vals, dtype=bool)
    sign_bad[:m] = vals[:m] >= 0
    sign_bad[m:] = vals[m:] <= 0
    if np.any(sign_bad):
        i, k = np.argwhere(sign_bad)[0]
        side = "negative" if i < m else "positive"
        raise SpeedOrderingError(
            f"speed {i + 1} must be {side}; at node {k} (x={xs[k]:.6g}) "
            f"it is {vals[i, k]:.6g}"
        )
    gaps = np.diff(vals, axis=0)
    if np.any(gaps <= 0):
        i, k = np.argwhere(gaps <= 0)[0]
        raise SpeedOrderingError(
            f"speeds {i + 1} and {i + 2} are not strictly increasing at node {k} "
            f"(x={xs[k]:.6g}): {vals[i, k]:.6g} vs {vals[i + 1, k]:.6g}"
        )


@dataclass(frozen=True)
class CouplingProfile:
    """Zero-order coupling matrix Sigma(x); the diagonal is structurally zero."""

    grid: SpatialGrid
    n: int
    func: Callable[[np.ndarray], np.ndarray]

    @cached_property
    def samples(self) -> np.ndarray:
        return self.value_at(self.grid.nodes)

    def value_at(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.asarray(self.func(x), dtype=float)
        if out.shape != (self.n, self.n, x.size):
            raise ValueError(f"coupling evaluator returned shape {out.shape}")
        return out

    def validate(self) -> None:
        diag = np.abs(np.einsum("iik->ik", self.samples))
        if np.any(diag > 0):
            i = int(np.argwhere(diag > 0)[0][0])
            raise ValueError(f"coupling diagonal entry {i + 1},{i + 1} is nonzero")


def coupling_from_entries(
    grid: SpatialGrid, n: int, entries: dict[tuple[int, int], Callable]
) -> CouplingProfile:
    """Build Sigma(x) from per-entry callables keyed by 1-based (i, j), i != j."""
    for (i, j) in entries:
        if i == j:
            raise ValueError("coupling diagonal must stay zero")
        if not (1 <= i <= n and 1 <= j <= n):
            raise ValueError(f"coupling index ({i},{j}) out of range for n={n}")

    def func(x):
        out = np.zeros((n, n, x.size))
        for (i, j), f in entries.items():
            out[i - 1, j - 1] = np.broadcast_to(f(x), x.shape)
        return out

    return CouplingProfile(grid, n, func)


@dataclass(frozen=True)
class LinearPlant:
    """Linear hyperbolic plant: speeds, zero-order coupling, reflection matrix."""

    grid: SpatialGrid
    m: int
    speeds: SpeedProfile
    coupling: CouplingProfile
    reflection: np.ndarray  # (n - m, m), w_+(t,0) = reflection @ w_-(t,0)

    def __post_init__(self):
        q = np.asarray(self.reflection, dtype=float)
        object.__setattr__(self, "reflection", q)
        n = self.speeds.n
        if q.shape != (n - self.m, self.m):
            raise ValueError(
                f"reflection must be ({n - self.m}, {self.m}), got {q.shape}"
            )
        if self.speeds.m != self.m or self.coupling.n != n:
            raise ValueError("inconsistent channel split between profiles")

    @property
    def n(self) -> int:
        return self.speeds.n


@dataclass(frozen=True)
class QuasilinearPlant:
    """Evaluator bundle for u_t + A(x,u) u_x = F(x,u) with reflection u_+(0) = G(u_-(0)).

    ``a_eval(x, u) -> (n, n, M)``, ``f_eval(x, u) -> (n, M)`` with x shaped (M,)
    and u shaped (n, M); ``g_eval(u_minus) -> (n - m, M)``.  Analytic Jacobians of
    F and G at u = 0 may be supplied; otherwise central differences are used.
    F(x, 0) = 0 and G(0) = 0 are assumed (checked cheaply at the grid nodes).
    """

    n: int
    m: int
    a_eval: Callable
    f_eval: Callable
    g_eval: Callable
    f_jacobian: Optional[Callable] = None   # f_jacobian(x) -> (n, n, M)
    g_jacobian: Optional[np.ndarray] = None  # (n - m, m)

    def check_equilibrium(self, grid: SpatialGrid, tol: float = 1e-12) -> None:
        x = grid.nodes
        z = np.zeros((self.n, x.size))
        if np.max(np.abs(self.f_eval(x, z))) > tol:
            raise ValueError("F(x, 0) must vanish: u = 0 is not an equilibrium")
        if np.max(np.abs(self.g_eval(np.zeros((self.m, 1))))) > tol:
            raise ValueError("G(0) must vanish: u = 0 is not an equilibrium")

    @classmethod
    def from_linear(cls, plant: LinearPlant) -> "QuasilinearPlant":
        """Wrap a linear plant; the evaluators reproduce the linear right-hand
        side with the exact arithmetic the linear stepper uses."""
        n, m = plant.n, plant.m
        speeds, coupling, q = plant.speeds, plant.coupling, plant.reflection

        def a_eval(x, u):
            lam = speeds.value_at(x)
            out = np.zeros((n, n, lam.shape[1]))
            idx = np.arange(n)
            out[idx, idx] = lam
            return out

        def f_eval(x, u):
            sig = coupling.value_at(x)
            return np.einsum("ijk,jk->ik", sig, np.asarray(u, dtype=float))

        def g_eval(u_minus):
            return q @ np.asarray(u_minus, dtype=float)

        def f_jacobian(x):
            return coupling.value_at(x)

        return cls(n, m, a_eval, f_eval, g_eval, f_jacobian, q.copy())


@dataclass(frozen=True)
class ScalingProfile:
    """Diagonal state rescaling phi_i(x) = exp(-integral of f_ii / lambda_i).

    ``log_samples`` holds the cumulative integral at the grid nodes, so
    phi_i(0) = exp(-0) = 1 exactly and off-node values interpolate the exponent.
    """

    grid: SpatialGrid
    log_samples: np.ndarray  # (n, N+1) cumulative integral c with phi = exp(-c)

    @property
    def n(self) -> int:
        return self.log_samples.shape[0]

    @cached_property
    def samples(self) -> np.ndarray:
        return np.exp(-self.log_samples)

    def value_at(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        xs = self.grid.nodes
        out = np.empty((self.n, x.size))
        for i in range(self.n):
            out[i] = np.exp(-np.interp(x, xs, self.log_samples[i]))
        return out

    @classmethod
    def identity(cls, grid: SpatialGrid, n: int) -> "ScalingProfile":
        return cls(grid, np.zeros((n, grid.n_nodes)))


def _cumulative_simpson(g_nodes: np.ndarray, g_mids: np.ndarray, h: float) -> np.ndarray:
    """Cumulative integral at the nodes; per-cell Simpson with the midpoint."""
    inc = (h / 6.0) * (g_nodes[..., :-1] + 4.0 * g_mids + g_nodes[..., 1:])
    out = np.zeros(g_nodes.shape)
    np.cumsum(inc, axis=-1, out=out[..., 1:])
    return out


def coupling_jacobian_at(plant: QuasilinearPlant, x) -> np.ndarray:
    """d F_i / d u_j at u = 0, shape (n, n, M): analytic if supplied, else
    central differences."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if plant.f_jacobian is not None:
        out = np.asarray(plant.f_jacobian(x), dtype=float)
        if out.shape != (plant.n, plant.n, x.size):
            raise ValueError(f"f_jacobian returned shape {out.shape}")
        return out
    n = plant.n
    out = np.empty((n, n, x.size))
    d = JACOBIAN_STEP
    for j in range(n):
        up = np.zeros((n, x.size))
        up[j] = d
        out[:, j, :] = (plant.f_eval(x, up) - plant.f_eval(x, -up)) / (2.0 * d)
    return out


def reflection_jacobian(plant: QuasilinearPlant) -> np.ndarray:
    """d G_s / d u_r at 0, shape (n - m, m)."""
    if plant.g_jacobian is not None:
        q = np.asarray(plant.g_jacobian, dtype=float)
        if q.shape != (plant.n - plant.m, plant.m):
            raise ValueError(f"g_jacobian has shape {q.shape}")
        return q
    m = plant.m
    d = JACOBIAN_STEP
    out = np.empty((plant.n - m, m))
    for r in range(m):
        up = np.zeros((m, 1))
        up[r] = d
        out[:, r] = ((plant.g_eval(up) - plant.g_eval(-up)) / (2.0 * d))[:, 0]
    return out


def diagonal_scaling(plant: QuasilinearPlant, grid: SpatialGrid) -> ScalingProfile:
    """Scaling that removes the diagonal zero-order terms; cumulative Simpson."""
    xs, mids = grid.nodes, grid.midpoints

    def integrand(x):
        jac = coupling_jacobian_at(plant, x)
        a0 = plant.a_eval(x, np.zeros((plant.n, x.size)))
        idx = np.arange(plant.n)
        lam = a0[idx, idx]
        if np.any(np.abs(lam) < SPEED_MARGIN):
            raise SpeedOrderingError("frozen speed vanishes inside the domain")
        return jac[idx, idx] / lam

    c = _cumulative_simpson(integrand(xs), integrand(mids), grid.h)
    return ScalingProfile(grid, c)


def linearize(
    plant: QuasilinearPlant, grid: SpatialGrid
) -> tuple[LinearPlant, ScalingProfile]:
    """Frozen-coefficient linear plant at u = 0 in the rescaled state.

    Speeds are the diagonal of A(x, 0); the rescaled coupling is
    (phi_i / phi_j) dF_i/du_j with an exactly zero diagonal; the reflection
    matrix is the Jacobian of G at 0.
    """
    scaling = diagonal_scaling(plant, grid)
    n, m = plant.n, plant.m

    def speed_func(i):
        def f(x):
            x = np.atleast_1d(np.asarray(x, dtype=float))
            a0 = plant.a_eval(x, np.zeros((n, x.size)))
            return a0[i, i]

        return f

    speeds = SpeedProfile(grid, m, tuple(speed_func(i) for i in range(n)))

    def sigma_func(x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        jac = coupling_jacobian_at(plant, x)
        phi = scaling.value_at(x)
        out = jac * (phi[:, None, :] / phi[None, :, :])
        idx = np.arange(n)
        out[idx, idx] = 0.0
        return out

    coupling = CouplingProfile(grid, n, sigma_func)
    q = reflection_jacobian(plant)
    return LinearPlant(grid, m, speeds, coupling, q), scaling


@dataclass(frozen=True)
class NonlinearResidual:
    """Remainders after freezing coefficients: all vanish (to second order in the
    state) at u = 0.  Evaluators take x shaped (M,) and w shaped (n, M)."""

    advection: Callable      # Lambda(x) - Abar(x, w), shape (n, n, M)
    source: Callable         # Ftilde(x, w) - Sigma(x) w, shape (n, M)
    reflection: Callable     # G(w_-) - Q w_-, shape (n - m, M)


def nonlinear_residuals(
    plant: QuasilinearPlant, linear: LinearPlant, scaling: ScalingProfile
) -> NonlinearResidual:
    n = plant.n
    idx = np.arange(n)

    def abar(x, w):
        phi = scaling.value_at(x)
        u = np.asarray(w, dtype=float) / phi
        a = plant.a_eval(x, u)
        return a * (phi[:, None, :] / phi[None, :, :])

    def advection(x, w):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        lam = linear.speeds.value_at(x)
        out = -abar(x, w)
        out[idx, idx] += lam
        return out

    def source(x, w):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        w = np.asarray(w, dtype=float)
        phi = scaling.value_at(x)
        u = w / phi
        jac0 = coupling_jacobian_at(plant, x)
        a0 = plant.a_eval(x, np.zeros((n, x.size)))
        ratio = jac0[idx, idx] / a0[idx, idx]
        ftilde = phi * plant.f_eval(x, u) - np.einsum(
            "ijk,jk->ik", abar(x, w), ratio * w
        )
        sig = linear.coupling.value_at(x)
        return ftilde - np.einsum("ijk,jk->ik", sig, w)

    def reflection(w_minus):
        w_minus = np.asarray(w_minus, dtype=float)
        return plant.g_eval(w_minus) - linear.reflection @ w_minus

    return NonlinearResidual(advection, source, reflection)
