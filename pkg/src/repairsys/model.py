"""Core types for the three-state repairable system.

A unit is good (probability p0), degraded (density p1 over elapsed repair
time x in [0, L]) or failed (density p2).  Repair rates blow up at the
maximum repair time L, so every formula here is written in terms of the
survival function S(x) = exp(-int_0^x mu) and its exact derivative, which
stay bounded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Positivity checks tolerate this much quadrature noise.
NOISE_FLOOR = 1e-12


@dataclass(frozen=True)
class RepairRateSpec:
    """Repair-rate family mu(x) = c/(L - x) + c0.

    c >= 1 keeps the kernel -S'(x) = mu(x) S(x) bounded up to x = L even
    though mu itself diverges there (the repair is certain to finish by L).
    """

    c: float = 1.0
    c0: float = 0.0
    family: str = "inverse-linear"

    def __post_init__(self):
        if self.family != "inverse-linear":
            raise ValueError(f"unknown repair-rate family: {self.family!r}")
        if not self.c >= 1.0:
            raise ValueError(f"mu exponent c must be >= 1, got {self.c}")
        if not self.c0 >= 0.0:
            raise ValueError(f"mu baseline c0 must be >= 0, got {self.c0}")


class SurvivalCurve:
    """Survival function of an inverse-linear repair rate on [0, L].

    S(x) = ((L - x)/L)**c * exp(-c0 x), S(0) = 1, S(L) = 0.
    All methods accept scalars or arrays and never evaluate mu at x = L.
    """

    def __init__(self, spec: RepairRateSpec, L: float):
        if not L > 0:
            raise ValueError(f"L must be positive, got {L}")
        self.spec = spec
        self.L = float(L)

    def s(self, x):
        """S(x), the probability repair is still ongoing at elapsed time x."""
        rem = np.maximum(self.L - np.asarray(x, dtype=float), 0.0)
        return (rem / self.L) ** self.spec.c * np.exp(-self.spec.c0 * np.asarray(x, dtype=float))

    def ratio(self, x, y):
        """S(x)/S(y) for y <= x, computed without forming 1/S(y)."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        rx = np.maximum(self.L - x, 0.0)
        ry = np.maximum(self.L - y, NOISE_FLOOR * self.L)
        return (rx / ry) ** self.spec.c * np.exp(-self.spec.c0 * (x - y))

    def neg_ds(self, x):
        """-S'(x) = mu(x) S(x); finite on all of [0, L] for c >= 1."""
        x = np.asarray(x, dtype=float)
        rem = np.maximum(self.L - x, 0.0)
        c, c0, L = self.spec.c, self.spec.c0, self.L
        # rem**(c-1) evaluates to 1.0 at rem=0 when c == 1 (numpy 0**0), the
        # correct limit; for c > 1 it is 0.
        return (c * rem ** (c - 1.0) / L**c + c0 * (rem / L) ** c) * np.exp(-c0 * x)

    def mu(self, x):
        """Pointwise repair rate; diverges as x -> L, so x = L is rejected."""
        x = np.asarray(x, dtype=float)
        if np.any(x >= self.L):
            raise ValueError("mu(x) is singular at x = L; use neg_ds/ratio forms")
        return self.spec.c / (self.L - x) + self.spec.c0


def survival(spec: RepairRateSpec, x: float, L: float) -> float:
    """S(x) = exp(-int_0^x mu) for the given family, via the closed form."""
    if not 0.0 <= x <= L:
        raise ValueError(f"x={x} outside the repair-time domain [0, {L}]")
    return float(SurvivalCurve(spec, L).s(x))


@dataclass(frozen=True)
class ModelParams:
    """Failure rates, maximum repair time and the two repair-rate specs."""

    lambda1: float
    lambda2: float
    L: float
    mu1: RepairRateSpec
    mu2: RepairRateSpec

    def __post_init__(self):
        if not self.lambda1 > 0:
            raise ValueError(f"lambda1 must be positive, got {self.lambda1}")
        if not self.lambda2 > 0:
            raise ValueError(f"lambda2 must be positive, got {self.lambda2}")
        if not (self.L > 0 and np.isfinite(self.L)):
            raise ValueError(f"L must be finite and positive, got {self.L}")

    def survival1(self) -> SurvivalCurve:
        return SurvivalCurve(self.mu1, self.L)

    def survival2(self) -> SurvivalCurve:
        return SurvivalCurve(self.mu2, self.L)


def cfg_a() -> ModelParams:
    """Reference configuration: lambda1 = lambda2 = 1, L = 1, mu = 1/(1-x)."""
    return ModelParams(1.0, 1.0, 1.0, RepairRateSpec(1.0, 0.0), RepairRateSpec(1.0, 0.0))


@dataclass(frozen=True)
class Grid:
    """Uniform nodes x_k = k L / n, k = 0..n, with a marching time step."""

    n: int
    L: float
    dt: float | None = None

    def __post_init__(self):
        if self.n < 16:
            raise ValueError(f"grid needs n >= 16, got {self.n}")
        if not self.L > 0:
            raise ValueError(f"L must be positive, got {self.L}")
        if self.dt is None:
            object.__setattr__(self, "dt", self.L / self.n)
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")

    @property
    def dx(self) -> float:
        return self.L / self.n

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.L, self.n + 1)

    @property
    def aligned(self) -> bool:
        """True when delays t - x_k land exactly on marching times."""
        return abs(self.dt - self.dx) <= 1e-12 * self.dx


@dataclass
class SystemState:
    """One element of the state space: (p0, p1 on nodes, p2 on nodes)."""

    p0: float
    p1: np.ndarray
    p2: np.ndarray

    def __post_init__(self):
        # resolvent output at complex frequencies is complex-valued
        self.p1 = np.asarray(self.p1)
        self.p2 = np.asarray(self.p2)
        if not np.iscomplexobj(self.p1):
            self.p1 = self.p1.astype(float)
        if not np.iscomplexobj(self.p2):
            self.p2 = self.p2.astype(float)
        if self.p1.shape != self.p2.shape or self.p1.ndim != 1:
            raise ValueError("p1 and p2 must be 1-d arrays of equal length")

    def copy(self) -> "SystemState":
        return SystemState(self.p0, self.p1.copy(), self.p2.copy())


def pulse_state(grid: Grid) -> SystemState:
    """All probability in the good state: (1, 0, 0)."""
    z = np.zeros(grid.n + 1)
    return SystemState(1.0, z, z.copy())


def _check_shapes(state: SystemState, grid: Grid):
    if state.p1.shape[0] != grid.n + 1:
        raise ValueError(
            f"state sampled on {state.p1.shape[0]} nodes, grid has {grid.n + 1}"
        )


def trapz(values: np.ndarray, dx: float):
    """Composite trapezoid on uniformly spaced samples."""
    v = np.asarray(values)
    out = dx * (v.sum() - 0.5 * (v[0] + v[-1]))
    return complex(out) if np.iscomplexobj(v) else float(out)


def trapz_weights(n: int, dx: float) -> np.ndarray:
    w = np.full(n + 1, dx)
    w[0] = w[-1] = 0.5 * dx
    return w


def interval_trapz(nodes, node_values, a, b, value_a, value_b) -> float:
    """Trapezoid of f over [a, b] given samples at the grid nodes inside
    (a, b) plus one-sided values at the endpoints.

    Used wherever an integrand has a branch interface at an off-grid point:
    integrating each smooth piece separately keeps the O(dx^2) rate that a
    jump at an interior node would otherwise destroy.
    """
    if b <= a:
        return 0.0
    tol = 1e-12 * max(nodes[-1], 1.0)
    i0 = int(np.searchsorted(nodes, a + tol))
    i1 = int(np.searchsorted(nodes, b - tol))
    xs = np.concatenate(([a], nodes[i0:i1], [b]))
    vs = np.concatenate(([value_a], np.asarray(node_values, dtype=float)[i0:i1], [value_b]))
    return float(np.trapezoid(vs, xs))


def ratio_table(values: np.ndarray, s_values: np.ndarray) -> np.ndarray:
    """values/S on the nodes; the 0/0 endpoint at x = L is extrapolated."""
    values = np.asarray(values)
    values = values.astype(complex) if np.iscomplexobj(values) else values.astype(float)
    rho = np.empty_like(values)
    rho[:-1] = values[:-1] / s_values[:-1]
    rho[-1] = 2.0 * rho[-2] - rho[-3]
    return rho


def norm_x(state: SystemState, grid: Grid) -> float:
    """|p0| + ||p1||_L1 + ||p2||_L1 by composite trapezoid."""
    _check_shapes(state, grid)
    return float(
        abs(state.p0)
        + trapz(np.abs(state.p1), grid.dx)
        + trapz(np.abs(state.p2), grid.dx)
    )


def dist_x(a: SystemState, b: SystemState, grid: Grid) -> float:
    """X-norm distance between two states on the same grid."""
    return float(
        abs(a.p0 - b.p0)
        + trapz(np.abs(a.p1 - b.p1), grid.dx)
        + trapz(np.abs(a.p2 - b.p2), grid.dx)
    )


def marginals(state: SystemState, grid: Grid) -> tuple[float, float]:
    """Total degraded and failed probabilities (int p1, int p2)."""
    _check_shapes(state, grid)
    return trapz(state.p1, grid.dx), trapz(state.p2, grid.dx)


def availability(state: SystemState, grid: Grid, include_degraded: bool = False) -> float:
    """Probability the unit is usable: p0, plus the degraded mass if asked.

    Expects a normalized state; not enforced.
    """
    if include_degraded:
        return float(state.p0 + marginals(state, grid)[0])
    return float(state.p0)


def check_nonnegative(state: SystemState, floor: float = -NOISE_FLOOR):
    """Raise if any component dips below the quadrature noise floor."""
    low = min(state.p0, state.p1.min(), state.p2.min())
    if low < floor:
        raise ValueError(f"state has negative component {low:.3e}")


def boundary_residuals(state: SystemState, grid: Grid, params: ModelParams) -> tuple[float, float]:
    """Defects of the inflow conditions p1(0) = l1 p0,
    p2(0) = l2 p0 + l2 int p1 (zero for in-domain states)."""
    phat1, _ = marginals(state, grid)
    r1 = state.p1[0] - params.lambda1 * state.p0
    r2 = state.p2[0] - params.lambda2 * (state.p0 + phat1)
    return float(r1), float(r2)
