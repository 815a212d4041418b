"""Characteristic function of the generator, spectrum scans, resolvent.

The generator's spectrum consists of the zeros of a scalar analytic
function.  In factored form

    Phi(r) = r * (1 + l1 A1(r) + l2 A2(r) + l1 l2 A1(r) A2(r)),

with A1(r) = int e^{-(r+l2)x} S1(x) dx and A2(r) = int e^{-rx} S2(x) dx,
so Phi(0) = 0 exactly and the simple-zero check reduces to the derivative
at the origin.  The resolvent is evaluated by explicit Volterra formulas
whose kernels are survival-function ratios, bounded despite the repair
rates diverging at x = L.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import (
    Grid,
    ModelParams,
    SystemState,
    norm_x,
    ratio_table,
    trapz,
    trapz_weights,
)


class NearSingularResolvent(RuntimeError):
    """|Phi(r)| too small: r is numerically indistinguishable from spectrum."""


@dataclass(frozen=True)
class Region:
    """Axis-aligned rectangle in the complex plane (segments allowed)."""

    re_min: float
    re_max: float
    im_min: float
    im_max: float

    def contains_origin(self) -> bool:
        return self.re_min <= 0.0 <= self.re_max and self.im_min <= 0.0 <= self.im_max


@dataclass
class SpectralScanReport:
    region: Region
    samples: tuple
    exclusion_radius: float
    min_abs: float
    argmin: complex
    phi0: complex
    dphi0: complex
    n_evaluated: int


def _quad_factors(params: ModelParams, grid: Grid):
    x = grid.nodes
    w = trapz_weights(grid.n, grid.dx)
    f1 = w * np.exp(-params.lambda2 * x) * params.survival1().s(x)
    f2 = w * params.survival2().s(x)
    return x, f1, f2


def char_function(r, params: ModelParams, grid: Grid):
    """Phi(r) in factored form; vectorized over an array of frequencies."""
    r_arr = np.atleast_1d(np.asarray(r, dtype=complex))
    x, f1, f2 = _quad_factors(params, grid)
    out = np.empty(r_arr.shape, dtype=complex)
    chunk = max(1, int(4e6 / (grid.n + 1)))
    for i in range(0, r_arr.size, chunk):
        rs = r_arr[i:i + chunk, None]
        e = np.exp(-rs * x[None, :])
        a1 = e @ f1
        a2 = e @ f2
        out[i:i + chunk] = rs[:, 0] * (
            1.0
            + params.lambda1 * a1
            + params.lambda2 * a2
            + params.lambda1 * params.lambda2 * a1 * a2
        )
    if np.isscalar(r) or np.asarray(r).ndim == 0:
        return complex(out[0])
    return out


def verify_simple_zero(params: ModelParams, grid: Grid, h: float = 1e-3) -> tuple[complex, complex]:
    """Phi(0) (zero by construction) and a central-difference dPhi/dr(0).

    A nonzero derivative certifies the zero at the origin is simple; by the
    factored form it equals 1 + l1 A1(0) + l2 A2(0) + l1 l2 A1(0) A2(0) > 1.
    """
    phi0 = char_function(0.0, params, grid)
    dphi0 = (char_function(h, params, grid) - char_function(-h, params, grid)) / (2.0 * h)
    return phi0, dphi0


def scan_region(params: ModelParams, grid: Grid, region: Region,
                samples: tuple = (200, 400), exclusion_radius: float = 0.05) -> SpectralScanReport:
    """Evaluate |Phi| on a sample grid over the region.

    A strictly positive minimum witnesses that the region is free of
    spectrum.  The origin is a legitimate zero, so regions containing it
    must carry a positive exclusion radius.
    """
    if region.contains_origin() and not exclusion_radius > 0.0:
        raise ValueError("region contains the origin; set a positive exclusion radius")
    n_re, n_im = samples
    res = np.linspace(region.re_min, region.re_max, max(n_re, 1))
    ims = np.linspace(region.im_min, region.im_max, max(n_im, 1))
    rr, ii = np.meshgrid(res, ims, indexing="ij")
    pts = (rr + 1j * ii).ravel()
    pts = pts[np.abs(pts) >= exclusion_radius]
    if pts.size == 0:
        raise ValueError("no sample points remain outside the exclusion disc")
    vals = np.abs(char_function(pts, params, grid))
    k = int(np.argmin(vals))
    phi0, dphi0 = verify_simple_zero(params, grid)
    return SpectralScanReport(
        region=region,
        samples=(n_re, n_im),
        exclusion_radius=exclusion_radius,
        min_abs=float(vals[k]),
        argmin=complex(pts[k]),
        phi0=phi0,
        dphi0=dphi0,
        n_evaluated=int(pts.size),
    )


def _volterra_matrix(curve, shift: complex, x: np.ndarray, dx: float) -> np.ndarray:
    """K[k, j] = e^{-shift (x_k - x_j)} S(x_k)/S(x_j) for j <= k, else 0.

    The ratio is evaluated in closed form so no singular 1/S is formed;
    the diagonal is exactly 1.
    """
    diff = x[:, None] - x[None, :]
    kern = np.asarray(curve.ratio(x[:, None], x[None, :]), dtype=complex)
    np.fill_diagonal(kern, 1.0)
    kern = kern * np.exp(-shift * diff)
    return np.tril(kern)


def _cumulative_weights(n: int, dx: float) -> np.ndarray:
    """W[k, j]: trapezoid weights of int_0^{x_k}; row 0 is empty."""
    w = np.full((n + 1, n + 1), dx)
    w[:, 0] = 0.5 * dx
    idx = np.arange(n + 1)
    w[idx, idx] = 0.5 * dx
    return np.tril(w) * (idx[:, None] > 0)


def resolvent_apply(r, y: SystemState, params: ModelParams, grid: Grid,
                    threshold: float = 1e-8) -> SystemState:
    """Solve (r I - A) p = y through the explicit Volterra formulas.

    p0 = F_r(y)/Phi(r), then p1, p2 by forward integration; the output
    satisfies the inflow boundary conditions by construction (p2 uses the
    discrete integral of the already-built p1).
    """
    r = complex(r)
    phi_r = char_function(r, params, grid)
    if abs(phi_r) <= threshold:
        raise NearSingularResolvent(f"|Phi({r})| = {abs(phi_r):.2e} <= {threshold}")

    lam1, lam2 = params.lambda1, params.lambda2
    x = grid.nodes
    dx = grid.dx
    w = trapz_weights(grid.n, dx)
    s1, s2 = params.survival1(), params.survival2()
    s1_vals, s2_vals = s1.s(x), s2.s(x)

    a1 = np.dot(w, np.exp(-(r + lam2) * x) * s1_vals)
    a2 = np.dot(w, np.exp(-r * x) * s2_vals)

    k1 = _volterra_matrix(s1, r + lam2, x, dx)
    k2 = _volterra_matrix(s2, r, x, dx)
    # H_i[j] = int_{x_j}^L kernel(x, x_j) dx: column sums of the triangular
    # matrices with trapezoid end corrections (rows below j are zero)
    h1 = dx * k1.sum(axis=0) - 0.5 * dx * (np.diag(k1) + k1[-1, :])
    h2 = dx * k2.sum(axis=0) - 0.5 * dx * (np.diag(k2) + k2[-1, :])
    h1[-1] = h2[-1] = 0.0

    f_r = (
        complex(y.p0)
        + np.dot(w, (1.0 - r * (1.0 + lam2 * a2) * h1) * y.p1)
        + np.dot(w, (1.0 - r * h2) * y.p2)
    )
    p0 = f_r / phi_r

    w_lo = _cumulative_weights(grid.n, dx)
    v1 = (k1 * w_lo) @ y.p1
    v2 = (k2 * w_lo) @ y.p2
    p1 = lam1 * p0 * np.exp(-(r + lam2) * x) * s1_vals + v1
    phat1 = np.dot(w, p1)
    p2 = lam2 * (p0 + phat1) * np.exp(-r * x) * s2_vals + v2

    if abs(p0.imag) < 1e-13 and np.abs(p1.imag).max() < 1e-13 and np.abs(p2.imag).max() < 1e-13:
        return SystemState(p0.real, p1.real, p2.real)
    return SystemState(p0, p1, p2)


def apply_generator(state: SystemState, params: ModelParams, grid: Grid) -> SystemState:
    """Numerical action of the generator: finite differences for d/dx and
    survival-kernel quadrature for the coupling integrals.

    Independent of the resolvent construction; used to check residuals
    (r I - A) R(r) y = y.
    """
    x = grid.nodes
    dx = grid.dx
    lam1, lam2 = params.lambda1, params.lambda2
    s1, s2 = params.survival1(), params.survival2()
    negds1, negds2 = s1.neg_ds(x), s2.neg_ds(x)

    rho1 = ratio_table(state.p1, s1.s(x))
    rho2 = ratio_table(state.p2, s2.s(x))
    mu1_p1 = negds1 * rho1
    mu2_p2 = negds2 * rho2

    a0 = -(lam1 + lam2) * state.p0 + trapz(mu1_p1, dx) + trapz(mu2_p2, dx)

    def ddx(v):
        d = np.empty_like(v)
        d[1:-1] = (v[2:] - v[:-2]) / (2.0 * dx)
        d[0] = (v[1] - v[0]) / dx  # one-sided, first order at the ends
        d[-1] = (v[-1] - v[-2]) / dx
        return d

    a1 = -ddx(state.p1) - mu1_p1 - lam2 * state.p1
    a2 = -ddx(state.p2) - mu2_p2
    return SystemState(a0, a1, a2)


def resolvent_residual(r, y: SystemState, params: ModelParams, grid: Grid) -> float:
    """X-norm of (r I - A) R(r) y - y via the numerical generator."""
    p = resolvent_apply(r, y, params, grid)
    ap = apply_generator(p, params, grid)
    res = SystemState(
        r * p.p0 - ap.p0 - y.p0,
        r * p.p1 - ap.p1 - y.p1,
        r * p.p2 - ap.p2 - y.p2,
    )
    return norm_x(res, grid)
