"""Open-loop dynamics with time-independent repair rates.

The transport equations are solved along characteristics, which turns the
good-state probability p0 into a delayed renewal equation: the coupling
integrals over the repair densities reduce to convolutions of the stored
p0 history against bounded kernels built from survival functions.  A
first-order upwind scheme in advected variables serves as an independent
cross-check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import (
    Grid,
    ModelParams,
    SystemState,
    dist_x,
    interval_trapz,
    ratio_table,
    trapz,
    trapz_weights,
)


class ConvergedBeforeWindow(RuntimeError):
    """Distances sit at the quadrature floor inside the fit window."""


@dataclass
class Trajectory:
    """States sampled along a solve, with solver-accurate norms."""

    times: np.ndarray
    states: list
    norms: np.ndarray
    grid: Grid

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")

    def dist_to(self, reference: SystemState) -> np.ndarray:
        return np.array([dist_x(s, reference, self.grid) for s in self.states])

    @property
    def final(self) -> SystemState:
        return self.states[-1]


@dataclass
class DecayFit:
    """Result of a log-linear fit dist(t) ~ m_amp * exp(-eps * t)."""

    m_amp: float
    eps: float
    window: tuple
    residual: float
    rel_residual: float


def steady_state(params: ModelParams, grid: Grid) -> SystemState:
    """Equilibrium distribution, normalized to unit X-norm.

    p1 = l1 p0 e^{-l2 x} S1(x), p2 = l2 p0 (1 + l1 C0) S2(x) with
    C0 = int e^{-l2 x} S1 and C1 = int S2; p0 = 1/((1+l1 C0)(1+l2 C1)).
    """
    x = grid.nodes
    s1, s2 = params.survival1(), params.survival2()
    c0 = trapz(np.exp(-params.lambda2 * x) * s1.s(x), grid.dx)
    c1 = trapz(s2.s(x), grid.dx)
    p0 = 1.0 / ((1.0 + params.lambda1 * c0) * (1.0 + params.lambda2 * c1))
    p1 = params.lambda1 * p0 * np.exp(-params.lambda2 * x) * s1.s(x)
    p2 = params.lambda2 * p0 * (1.0 + params.lambda1 * c0) * s2.s(x)
    return SystemState(p0, p1, p2)


def boundary_values(p0: float, p1: np.ndarray, grid: Grid, params: ModelParams) -> tuple[float, float]:
    """Inflow densities (p1(0), p2(0)) implied by the current state."""
    phat1 = trapz(np.asarray(p1, dtype=float), grid.dx)
    return params.lambda1 * p0, params.lambda2 * (p0 + phat1)


class OpenLoopSolution:
    """Characteristics march for the open-loop system.

    Keeps the full p0 and int-p1 histories; densities at any (x, t) follow
    from the boundary branch (t > x) or the initial-data branch (t <= x).
    With dt = dx the delayed lookups land exactly on stored history points.
    """

    def __init__(self, params: ModelParams, init: SystemState, t_end: float,
                 grid: Grid, survival1=None, survival2=None):
        if not t_end > 0:
            raise ValueError(f"t_end must be positive, got {t_end}")
        low = min(init.p0, init.p1.min(), init.p2.min())
        if low < -1e-12:
            raise ValueError(f"initial data has negative component {low:.3e}")
        if init.p1.shape[0] != grid.n + 1:
            raise ValueError("initial data not sampled on the grid")

        self.params = params
        self.grid = grid
        self.lam1, self.lam2, self.L = params.lambda1, params.lambda2, params.L
        self.s1 = survival1 if survival1 is not None else params.survival1()
        self.s2 = survival2 if survival2 is not None else params.survival2()

        x = grid.nodes
        self.x = x
        self.dx = grid.dx
        self.dt = grid.dt
        self.aligned = grid.aligned

        # kernels: e^{-l2 x}(-S1'), e^{-l2 x} S1, -S2', S2 on the nodes
        self.s1_vals = self.s1.s(x)
        self.s2_vals = self.s2.s(x)
        decay2 = np.exp(-self.lam2 * x)
        self.kern_j1 = decay2 * self.s1.neg_ds(x)
        self.kern_ph1 = decay2 * self.s1_vals
        self.kern_j2 = self.s2.neg_ds(x)

        # initial data as ratios phi_i / S_i (bounded for in-domain data)
        self.rho1 = ratio_table(init.p1, self.s1_vals)
        self.rho2 = ratio_table(init.p2, self.s2_vals)
        self.init = init

        n_steps = int(round(t_end / self.dt))
        if abs(n_steps * self.dt - t_end) > 1e-9 * max(t_end, 1.0):
            n_steps = int(math.ceil(t_end / self.dt - 1e-12))
        self.n_steps = max(n_steps, 1)
        self.times = np.arange(self.n_steps + 1) * self.dt
        self.p0_hist = np.empty(self.n_steps + 1)
        self.ph1_hist = np.empty(self.n_steps + 1)
        self.i_hist = np.empty(self.n_steps + 1)
        self.p0_hist[0] = init.p0
        self._march()

    # -- history lookups ---------------------------------------------------
    def _p0_at(self, taus, m):
        if self.aligned:
            idx = np.rint(np.asarray(taus) / self.dt).astype(int)
            return self.p0_hist[idx]
        return np.interp(taus, self.times[: m + 1], self.p0_hist[: m + 1])

    def _ph1_at(self, taus, m):
        if self.aligned:
            idx = np.rint(np.asarray(taus) / self.dt).astype(int)
            return self.ph1_hist[idx]
        return np.interp(taus, self.times[: m + 1], self.ph1_hist[: m + 1])

    def _boundary_part(self, kernel, hist_at, t, m):
        """int_0^min(t,L) kernel(x) h(t - x) dx with one-sided interface."""
        b = min(t, self.L)
        if b <= 0:
            return 0.0
        vals = np.zeros(self.grid.n + 1)
        k_in = int(np.searchsorted(self.x, b - 1e-12 * self.L))  # nodes < b
        vals[:k_in] = kernel[:k_in] * hist_at(t - self.x[:k_in], m)
        v_a = float(kernel[0]) * float(hist_at(np.array([t]), m)[0])
        v_b = float(np.interp(b, self.x, kernel)) * float(hist_at(np.array([t - b]), m)[0])
        return interval_trapz(self.x, vals, 0.0, b, v_a, v_b)

    def _initial_part(self, kernel, rho, t):
        """int_t^L kernel(x) rho(x - t) dx, the not-yet-swept initial data."""
        if t >= self.L:
            return 0.0
        vals = np.zeros(self.grid.n + 1)
        k0 = int(np.searchsorted(self.x, t + 1e-12 * self.L))  # nodes > t
        vals[k0:] = kernel[k0:] * np.interp(self.x[k0:] - t, self.x, rho)
        v_a = float(np.interp(t, self.x, kernel)) * float(rho[0])
        v_b = float(kernel[-1]) * float(np.interp(self.L - t, self.x, rho))
        return interval_trapz(self.x, vals, t, self.L, v_a, v_b)

    # -- aligned fast path -------------------------------------------------
    def _boundary_aligned(self, kernel, hist, m):
        if m == 0:
            return 0.0  # empty interval [0, 0]
        k = min(m, self.grid.n)
        w = trapz_weights(k, self.dx) if k < self.grid.n else self._w_full
        return float(np.dot(w * kernel[: k + 1], hist[m - k: m + 1][::-1]))

    def _initial_aligned(self, kernel, rho, m):
        if m >= self.grid.n:
            return 0.0
        k = self.grid.n - m
        w = trapz_weights(k, self.dx)
        return float(np.dot(w * kernel[m:], rho[: k + 1]))

    def _couplings(self, m, t):
        """(I, phat1) at time t using history up to index m (tentative)."""
        lam1, lam2 = self.lam1, self.lam2
        e2t = math.exp(-lam2 * t)
        if self.aligned:
            ph1 = lam1 * self._boundary_aligned(self.kern_ph1, self.p0_hist, m) \
                + e2t * self._initial_aligned(self.s1_vals, self.rho1, m)
            self.ph1_hist[m] = ph1
            j1 = lam1 * self._boundary_aligned(self.kern_j1, self.p0_hist, m) \
                + e2t * self._initial_aligned(self._negds1, self.rho1, m)
            j2 = lam2 * (self._boundary_aligned(self.kern_j2, self.p0_hist, m)
                         + self._boundary_aligned(self.kern_j2, self.ph1_hist, m)) \
                + self._initial_aligned(self.kern_j2, self.rho2, m)
        else:
            ph1 = lam1 * self._boundary_part(self.kern_ph1, self._p0_at, t, m) \
                + e2t * self._initial_part(self.s1_vals, self.rho1, t)
            self.ph1_hist[m] = ph1
            j1 = lam1 * self._boundary_part(self.kern_j1, self._p0_at, t, m) \
                + e2t * self._initial_part(self._negds1, self.rho1, t)
            j2 = lam2 * (self._boundary_part(self.kern_j2, self._p0_at, t, m)
                         + self._boundary_part(self.kern_j2, self._ph1_at, t, m)) \
                + self._initial_part(self.kern_j2, self.rho2, t)
        return j1 + j2, ph1

    def _march(self):
        lam_sum = self.lam1 + self.lam2
        decay = math.exp(-lam_sum * self.dt)
        self._w_full = trapz_weights(self.grid.n, self.dx)
        self._negds1 = self.s1.neg_ds(self.x)
        self.i_hist[0], _ = self._couplings(0, 0.0)
        for m in range(1, self.n_steps + 1):
            t = self.times[m]
            self.p0_hist[m] = self.p0_hist[m - 1]
            base = decay * (self.p0_hist[m - 1] + 0.5 * self.dt * self.i_hist[m - 1])
            for _ in range(2):
                i_new, _ = self._couplings(m, t)
                self.p0_hist[m] = base + 0.5 * self.dt * i_new
            self.i_hist[m], _ = self._couplings(m, t)

    # -- reconstruction ----------------------------------------------------
    def p0_at(self, t: float) -> float:
        return float(np.interp(t, self.times, self.p0_hist))

    def p1_at(self, x: float, t: float) -> float:
        """Pointwise degraded density; boundary branch for t > x."""
        if t > x:
            return float(self.lam1 * math.exp(-self.lam2 * x) * self.s1.s(x)
                         * np.interp(t - x, self.times, self.p0_hist))
        return float(math.exp(-self.lam2 * t) * self.s1.s(x)
                     * np.interp(x - t, self.x, self.rho1))

    def p2_at(self, x: float, t: float) -> float:
        """Pointwise failed density; inflow carries p0 and the p1 mass."""
        if t > x:
            u = t - x
            inflow = self.lam2 * (np.interp(u, self.times, self.p0_hist)
                                  + np.interp(u, self.times, self.ph1_hist))
            return float(self.s2.s(x) * inflow)
        return float(self.s2.s(x) * np.interp(x - t, self.x, self.rho2))

    def _profile(self, t: float, m: int):
        """Node arrays plus the branch interface for split quadrature."""
        x = self.x
        b = min(t, self.L)
        p1 = np.empty_like(x)
        p2 = np.empty_like(x)
        boundary = x < b - 1e-12 * self.L if t < self.L else np.ones_like(x, bool)
        e2t = math.exp(-self.lam2 * t)
        xb = x[boundary]
        p1[boundary] = self.lam1 * self.kern_ph1[boundary] * self._p0_at(t - xb, m)
        p2[boundary] = self.s2_vals[boundary] * self.lam2 * (
            self._p0_at(t - xb, m) + self._ph1_at(t - xb, m))
        rest = ~boundary
        xr = x[rest]
        p1[rest] = e2t * self.s1_vals[rest] * np.interp(xr - t, x, self.rho1)
        p2[rest] = self.s2_vals[rest] * np.interp(xr - t, x, self.rho2)
        if t >= self.L:
            return p1, p2, None
        # one-sided values on each side of the wavefront at x = t
        s1_b, s2_b = float(self.s1.s(b)), float(self.s2.s(b))
        left = (self.lam1 * math.exp(-self.lam2 * b) * s1_b * self.p0_hist[0],
                s2_b * self.lam2 * (self.p0_hist[0] + self.ph1_hist[0]))
        right = (e2t * s1_b * self.rho1[0], s2_b * self.rho2[0])
        return p1, p2, (b, left, right)

    def state_at(self, t: float) -> SystemState:
        m = min(int(round(t / self.dt)) if self.aligned else self.n_steps, self.n_steps)
        p1, p2, iface = self._profile(t, m)
        if iface is not None:
            b, left, right = iface
            k = int(np.searchsorted(self.x, b - 1e-12 * self.L))
            if k <= self.grid.n and abs(self.x[min(k, self.grid.n)] - b) < 1e-12 * self.L:
                p1[k] = 0.5 * (left[0] + right[0])
                p2[k] = 0.5 * (left[1] + right[1])
        return SystemState(self.p0_at(t), p1, p2)

    def norm_at(self, t: float) -> float:
        """X-norm with the wavefront treated as a branch interface."""
        m = min(int(round(t / self.dt)) if self.aligned else self.n_steps, self.n_steps)
        p1, p2, iface = self._profile(t, m)
        p0 = abs(self.p0_at(t))
        if iface is None:
            return p0 + trapz(np.abs(p1), self.dx) + trapz(np.abs(p2), self.dx)
        b, (l1, l2), (r1, r2) = iface
        x = self.x
        total = p0
        for vals, lv, rv in ((np.abs(p1), abs(l1), abs(r1)), (np.abs(p2), abs(l2), abs(r2))):
            total += interval_trapz(x, vals, 0.0, b, float(vals[0]), lv)
            total += interval_trapz(x, vals, b, self.L, rv, float(vals[-1]))
        return float(total)

    def trajectory(self, max_snapshots: int = 1001) -> Trajectory:
        stride = max(1, int(math.ceil(self.n_steps / max(max_snapshots - 1, 1))))
        idx = sorted(set(range(0, self.n_steps + 1, stride)) | {self.n_steps})
        times = self.times[idx]
        states = [self.state_at(t) for t in times]
        norms = np.array([self.norm_at(t) for t in times])
        return Trajectory(times, states, norms, self.grid)


def solve_open_loop(params: ModelParams, init: SystemState, t_end: float,
                    grid: Grid, max_snapshots: int = 1001,
                    survival1=None, survival2=None) -> Trajectory:
    """March the open-loop system; see OpenLoopSolution for the scheme."""
    sol = OpenLoopSolution(params, init, t_end, grid, survival1, survival2)
    traj = sol.trajectory(max_snapshots)
    traj.solution = sol
    return traj


def to_advected(state: SystemState, params: ModelParams, grid: Grid,
                survival1=None, survival2=None) -> tuple[np.ndarray, np.ndarray]:
    """Divide out the decay factors: q1 = p1/(e^{-l2 x} S1), q2 = p2/S2.

    In these variables the transport is pure unit-speed advection.  The
    x = L endpoint is extrapolated (S vanishes there).
    """
    s1 = survival1 if survival1 is not None else params.survival1()
    s2 = survival2 if survival2 is not None else params.survival2()
    x = grid.nodes
    q1 = ratio_table(state.p1 * np.exp(params.lambda2 * x), s1.s(x))
    q2 = ratio_table(state.p2, s2.s(x))
    return q1, q2


def from_advected(p0: float, q1: np.ndarray, q2: np.ndarray, params: ModelParams,
                  grid: Grid, survival1=None, survival2=None) -> SystemState:
    s1 = survival1 if survival1 is not None else params.survival1()
    s2 = survival2 if survival2 is not None else params.survival2()
    x = grid.nodes
    return SystemState(p0, np.exp(-params.lambda2 * x) * s1.s(x) * q1, s2.s(x) * q2)


def upwind_oracle(params: ModelParams, init: SystemState, t_end: float,
                  grid: Grid, max_snapshots: int = 1001,
                  survival1=None, survival2=None) -> Trajectory:
    """First-order cross-check: upwind advection of q_i at CFL = 1 (dt = dx),
    explicit Euler for p0 with the same survival-function kernels."""
    if not t_end > 0:
        raise ValueError(f"t_end must be positive, got {t_end}")
    low = min(init.p0, init.p1.min(), init.p2.min())
    if low < -1e-12:
        raise ValueError(f"initial data has negative component {low:.3e}")

    s1 = survival1 if survival1 is not None else params.survival1()
    s2 = survival2 if survival2 is not None else params.survival2()
    lam1, lam2 = params.lambda1, params.lambda2
    x = grid.nodes
    dx = grid.dx
    dt = dx  # CFL exactly 1: the shift is the exact advection
    kern_j1 = np.exp(-lam2 * x) * s1.neg_ds(x)
    kern_ph1 = np.exp(-lam2 * x) * s1.s(x)
    kern_j2 = s2.neg_ds(x)
    s2_vals = s2.s(x)

    q1, q2 = to_advected(init, params, grid, s1, s2)
    p0 = init.p0
    n_steps = max(int(round(t_end / dt)), 1)
    times = np.arange(n_steps + 1) * dt
    stride = max(1, int(math.ceil(n_steps / max(max_snapshots - 1, 1))))
    idx = sorted(set(range(0, n_steps + 1, stride)) | {n_steps})

    def snapshot():
        return SystemState(p0, kern_ph1 * q1, s2_vals * q2)

    states, norms, snap_times = [], [], []
    if 0 in idx:
        st = snapshot()
        states.append(st)
        norms.append(abs(p0) + trapz(np.abs(st.p1), dx) + trapz(np.abs(st.p2), dx))
        snap_times.append(0.0)
    want = set(idx)
    for m in range(1, n_steps + 1):
        coupling = lam1 * trapz(kern_j1 * q1, dx) + lam2 * trapz(kern_j2 * q2, dx)
        p0 = p0 + dt * (-(lam1 + lam2) * p0 + coupling)
        q1[1:] = q1[:-1]
        q2[1:] = q2[:-1]
        q1[0] = lam1 * p0
        phat1 = trapz(kern_ph1 * q1, dx)
        q2[0] = lam2 * (p0 + phat1)
        if m in want:
            st = snapshot()
            states.append(st)
            norms.append(abs(p0) + trapz(np.abs(st.p1), dx) + trapz(np.abs(st.p2), dx))
            snap_times.append(times[m])
    return Trajectory(np.array(snap_times), states, np.array(norms), grid)


def decay_rate_fit(traj: Trajectory, reference: SystemState,
                   window: tuple | None = None, floor: float | None = None) -> DecayFit:
    """Least-squares fit of log dist(t) over the window.

    floor defaults to dx^2, the bias scale of the second-order march;
    distances below 10x that level carry no decay information and raise
    ConvergedBeforeWindow.
    """
    t = traj.times
    if window is None:
        window = (t[-1] / 4.0, 3.0 * t[-1] / 4.0)
    if floor is None:
        floor = traj.grid.dx ** 2
    d = traj.dist_to(reference)
    mask = (t >= window[0]) & (t <= window[1])
    if mask.sum() < 3:
        raise ValueError(f"fit window {window} contains fewer than 3 samples")
    if np.any(d[mask] < 10.0 * floor):
        raise ConvergedBeforeWindow(
            f"distance reached the quadrature floor ({10 * floor:.2e}) inside {window}")
    tw, logd = t[mask], np.log(d[mask])
    slope, intercept = np.polyfit(tw, logd, 1)
    fitted = slope * tw + intercept
    residual = float(np.sqrt(np.mean((logd - fitted) ** 2)))
    spread = float(logd.max() - logd.min())
    rel = residual / spread if spread > 0 else np.inf
    return DecayFit(float(np.exp(intercept)), float(-slope), tuple(window), residual, rel)
