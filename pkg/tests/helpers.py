"""Shared test utilities."""

import numpy as np

from repairsys.model import Grid, SystemState


def smooth_random_state(grid: Grid, rng: np.random.Generator) -> SystemState:
    """Random nonnegative state with smooth densities vanishing at x = L.

    Squared random quadratic times (1 - x/L): smooth enough for the stated
    convergence rates and compatible with the survival-kernel quadrature.
    """
    xi = grid.nodes / grid.L

    def profile():
        c = rng.uniform(0.2, 1.0, size=3)
        return (c[0] + c[1] * xi + c[2] * xi**2) ** 2 * (1.0 - xi)

    return SystemState(float(rng.uniform(0.1, 1.0)), profile(), profile())


def normalized(state: SystemState, grid: Grid) -> SystemState:
    from repairsys.model import norm_x

    total = norm_x(state, grid)
    return SystemState(state.p0 / total, state.p1 / total, state.p2 / total)
