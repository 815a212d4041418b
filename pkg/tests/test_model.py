import numpy as np
import pytest

from repairsys.model import (
    Grid,
    ModelParams,
    RepairRateSpec,
    SurvivalCurve,
    SystemState,
    availability,
    cfg_a,
    interval_trapz,
    marginals,
    norm_x,
    survival,
    trapz,
)


def test_survival_endpoints_and_closed_form():
    spec = RepairRateSpec(c=1.0, c0=0.0)
    assert survival(spec, 0.0, 1.0) == 1.0
    # hand integration of 1/(1-x) up to 0.5 gives ln 2, so S = 1/2
    assert survival(spec, 0.5, 1.0) == pytest.approx(0.5, abs=1e-15)
    assert survival(RepairRateSpec(c=2.0), 1.0, 1.0) == 0.0


def test_survival_monotone_and_domain():
    curve = SurvivalCurve(RepairRateSpec(c=1.5, c0=0.3), L=2.0)
    x = np.linspace(0.0, 2.0, 257)
    s = curve.s(x)
    assert s[0] == 1.0
    assert s[-1] == 0.0
    assert np.all(np.diff(s) < 0)
    with pytest.raises(ValueError):
        survival(RepairRateSpec(), -0.1, 1.0)
    with pytest.raises(ValueError):
        survival(RepairRateSpec(), 1.1, 1.0)


def test_survival_ratio_matches_quotient():
    curve = SurvivalCurve(RepairRateSpec(c=2.0, c0=0.5), L=1.0)
    x = np.array([0.3, 0.7, 0.95])
    y = np.array([0.1, 0.6, 0.9])
    assert curve.ratio(x, y) == pytest.approx(curve.s(x) / curve.s(y), rel=1e-12)


@pytest.mark.parametrize("c,c0", [(1.0, 0.0), (1.0, 0.7), (2.0, 0.0), (3.5, 1.2)])
def test_kernel_integrates_to_one(c, c0):
    # int_0^L mu S dx = 1 - S(L) = 1; trapezoid of -S' must reproduce it
    curve = SurvivalCurve(RepairRateSpec(c, c0), L=1.0)
    n = 4096
    x = np.linspace(0.0, 1.0, n + 1)
    total = trapz(curve.neg_ds(x), 1.0 / n)
    assert total == pytest.approx(1.0, abs=1e-6)


def test_mu_rejects_endpoint():
    curve = SurvivalCurve(RepairRateSpec(), L=1.0)
    assert curve.mu(0.5) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        curve.mu(1.0)


def test_spec_validation():
    with pytest.raises(ValueError):
        RepairRateSpec(c=0.5)
    with pytest.raises(ValueError):
        RepairRateSpec(c0=-0.1)
    with pytest.raises(ValueError):
        RepairRateSpec(family="tabulated")
    with pytest.raises(ValueError):
        ModelParams(-1.0, 1.0, 1.0, RepairRateSpec(), RepairRateSpec())
    with pytest.raises(ValueError):
        ModelParams(1.0, 1.0, np.inf, RepairRateSpec(), RepairRateSpec())


def test_grid_defaults_and_validation():
    g = Grid(n=400, L=1.0)
    assert g.dt == pytest.approx(1.0 / 400)
    assert g.aligned
    assert g.nodes[0] == 0.0 and g.nodes[-1] == 1.0
    assert np.all(np.diff(g.nodes) > 0)
    with pytest.raises(ValueError):
        Grid(n=8, L=1.0)
    with pytest.raises(ValueError):
        Grid(n=32, L=1.0, dt=-0.1)


def test_norm_x_basic():
    g = Grid(n=16, L=1.0)
    z = np.zeros(17)
    assert norm_x(SystemState(1.0, z, z), g) == 1.0
    assert norm_x(SystemState(0.0, z, z), g) == 0.0
    quarter = np.full(17, 0.25)
    assert norm_x(SystemState(0.5, quarter, quarter), g) == pytest.approx(1.0)


def test_norm_x_shape_error():
    g = Grid(n=16, L=1.0)
    with pytest.raises(ValueError):
        norm_x(SystemState(0.0, np.zeros(10), np.zeros(10)), g)


def test_norm_x_is_a_norm():
    # absolute homogeneity and the triangle inequality on sampled states
    g = Grid(n=64, L=2.0)
    rng = np.random.default_rng(42)
    for _ in range(25):
        a = SystemState(rng.normal(), rng.normal(size=65), rng.normal(size=65))
        b = SystemState(rng.normal(), rng.normal(size=65), rng.normal(size=65))
        t = float(rng.normal())
        scaled = SystemState(t * a.p0, t * a.p1, t * a.p2)
        assert norm_x(scaled, g) == pytest.approx(abs(t) * norm_x(a, g), rel=1e-12)
        summed = SystemState(a.p0 + b.p0, a.p1 + b.p1, a.p2 + b.p2)
        assert norm_x(summed, g) <= norm_x(a, g) + norm_x(b, g) + 1e-12


def test_marginals():
    g = Grid(n=100, L=1.0)
    z = np.zeros(101)
    assert marginals(SystemState(1.0, z, z), g) == (0.0, 0.0)
    p1 = 1.0 - g.nodes
    got = marginals(SystemState(0.0, p1, z), g)
    assert got[0] == pytest.approx(0.5, abs=1e-15)  # trapezoid exact on linear
    assert got[1] == 0.0


def test_availability():
    g = Grid(n=50, L=1.0)
    z = np.zeros(51)
    assert availability(SystemState(1.0, z, z), g) == 1.0
    p2 = np.full(51, 1.0)
    assert availability(SystemState(0.0, z, p2), g, include_degraded=True) == 0.0


def test_interval_trapz_split_restores_second_order():
    # f jumps at b; integrating the pieces with one-sided values keeps O(dx^2)
    left = lambda x: np.sin(x)
    right = lambda x: 2.0 + x**2
    b = 0.377
    exact = (1.0 - np.cos(b)) + (2.0 * (1.0 - b) + (1.0 - b**3) / 3.0)
    errs = []
    for n in (100, 200, 400):
        xs = np.linspace(0.0, 1.0, n + 1)
        got = interval_trapz(xs, left(xs), 0.0, b, left(0.0), left(b)) + interval_trapz(
            xs, right(xs), b, 1.0, right(b), right(1.0)
        )
        errs.append(abs(got - exact))
    assert errs[2] < errs[0] / 8  # better than first order
    assert errs[2] < 1e-6


def test_interval_trapz_endpoint_on_node():
    xs = np.linspace(0.0, 1.0, 11)
    vals = xs**2
    got = interval_trapz(xs, vals, 0.0, 0.5, 0.0, 0.25)
    direct = np.trapezoid(vals[:6], xs[:6])
    assert got == pytest.approx(direct, abs=1e-15)


def test_cfg_a_roundtrip():
    p = cfg_a()
    assert p.lambda1 == p.lambda2 == 1.0
    assert p.survival1().s(0.5) == pytest.approx(0.5)
