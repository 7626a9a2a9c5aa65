"""Numerical kernels: reference formulas, finite differences, and parity
between the pure-numpy backend and the compiled one."""

import numpy as np
import pytest

from gridsynth.grid import load_bundled_case
from gridsynth.kernels import _pure

try:
    from gridsynth.kernels import _fast
except ImportError:
    _fast = None

BACKENDS = [_pure] if _fast is None else [_pure, _fast]
IDS = ["pure"] if _fast is None else ["pure", "fast"]


def _random_states(grid, m, seed):
    rng = np.random.default_rng(seed)
    v = 1.0 + 0.08 * rng.standard_normal((m, grid.n))
    theta = 0.3 * rng.standard_normal((m, grid.n))
    return v, theta


def _injections_reference(grid, v, theta):
    """Complex power S = diag(U) conj(Y U) with U = V e^{j theta}."""
    y = grid.ybus.g + 1j * grid.ybus.b
    u = v * np.exp(1j * theta)
    s = u * np.conj(u @ y.T)
    return s.real, s.imag


def _flows_reference(grid, v, theta):
    adm = grid.branch_adm
    u = v * np.exp(1j * theta)
    uf = u[:, adm.f]
    ut = u[:, adm.t]
    yff = adm.gff + 1j * adm.bff
    yft = adm.gft + 1j * adm.bft
    ytf = adm.gtf + 1j * adm.btf
    ytt = adm.gtt + 1j * adm.btt
    sf = uf * np.conj(yff * uf + yft * ut)
    st = ut * np.conj(ytf * uf + ytt * ut)
    return np.abs(sf), np.abs(st)


@pytest.mark.parametrize("impl", BACKENDS, ids=IDS)
@pytest.mark.parametrize("name", ["case6", "case24"])
def test_injections_match_complex_reference(impl, name):
    grid = load_bundled_case(name)
    v, theta = _random_states(grid, 7, seed=3)
    pc, qc = impl.calc_injections(grid.ybus.g, grid.ybus.b, v, theta)
    pref, qref = _injections_reference(grid, v, theta)
    np.testing.assert_allclose(pc, pref, atol=1e-12)
    np.testing.assert_allclose(qc, qref, atol=1e-12)


@pytest.mark.parametrize("impl", BACKENDS, ids=IDS)
@pytest.mark.parametrize("name", ["case6", "case24"])
def test_branch_flows_match_complex_reference(impl, name):
    grid = load_bundled_case(name)
    v, theta = _random_states(grid, 7, seed=4)
    sf, st = impl.branch_flow(grid.branch_adm, v, theta)
    sfr, str_ = _flows_reference(grid, v, theta)
    np.testing.assert_allclose(sf, sfr, atol=1e-12)
    np.testing.assert_allclose(st, str_, atol=1e-12)


@pytest.mark.parametrize("impl", BACKENDS, ids=IDS)
def test_balance_vjp_matches_finite_differences(impl):
    grid = load_bundled_case("case6")
    rng = np.random.default_rng(5)
    v, theta = _random_states(grid, 3, seed=5)
    wp = rng.standard_normal(v.shape)
    wq = rng.standard_normal(v.shape)

    def f(vv, tt):
        pc, qc = impl.calc_injections(grid.ybus.g, grid.ybus.b, vv, tt)
        return float((wp * pc + wq * qc).sum())

    gv, gth = impl.balance_vjp(grid.ybus.g, grid.ybus.b, v, theta, wp, wq)
    eps = 1e-7
    for arr, grad in ((v, gv), (theta, gth)):
        for idx in [(0, 0), (1, 3), (2, 5)]:
            bump = np.zeros_like(arr)
            bump[idx] = eps
            num = (f(v + (bump if arr is v else 0), theta + (bump if arr is theta else 0))
                   - f(v - (bump if arr is v else 0), theta - (bump if arr is theta else 0))) / (2 * eps)
            assert grad[idx] == pytest.approx(num, rel=1e-6, abs=1e-8)


@pytest.mark.parametrize("impl", BACKENDS, ids=IDS)
def test_branch_flow_vjp_matches_finite_differences(impl):
    grid = load_bundled_case("case6")
    rng = np.random.default_rng(6)
    v, theta = _random_states(grid, 2, seed=6)
    nb = len(grid.branches)
    wf = np.abs(rng.standard_normal((2, nb)))
    wt = np.abs(rng.standard_normal((2, nb)))

    def f(vv, tt):
        sf, st = impl.branch_flow(grid.branch_adm, vv, tt)
        return float((wf * sf + wt * st).sum())

    gv, gth = impl.branch_flow_vjp(grid.branch_adm, v, theta, wf, wt)
    eps = 1e-7
    for i in range(2):
        for j in range(grid.n):
            bump = np.zeros_like(v)
            bump[i, j] = eps
            num_v = (f(v + bump, theta) - f(v - bump, theta)) / (2 * eps)
            num_t = (f(v, theta + bump) - f(v, theta - bump)) / (2 * eps)
            assert gv[i, j] == pytest.approx(num_v, rel=1e-6, abs=1e-8)
            assert gth[i, j] == pytest.approx(num_t, rel=1e-6, abs=1e-8)


@pytest.mark.parametrize("impl", BACKENDS, ids=IDS)
def test_zero_flow_contributes_zero_gradient(impl):
    grid = load_bundled_case("case6")
    # flat profile with no shunts on branch ends gives tiny flows on some
    # branches; weights on an exactly-zero flow must not produce NaN
    v = np.ones((1, grid.n))
    theta = np.zeros((1, grid.n))
    nb = len(grid.branches)
    wf = np.ones((1, nb))
    wt = np.ones((1, nb))
    gv, gth = impl.branch_flow_vjp(grid.branch_adm, v, theta, wf, wt)
    assert np.isfinite(gv).all() and np.isfinite(gth).all()


@pytest.mark.parametrize("impl", BACKENDS, ids=IDS)
def test_jacobian_blocks_match_finite_differences(impl):
    grid = load_bundled_case("case6")
    v, theta = _random_states(grid, 1, seed=8)
    v, theta = v[0], theta[0]
    dp_dth, dp_dv, dq_dth, dq_dv = impl.jacobian_blocks(grid.ybus.g, grid.ybus.b, v, theta)

    eps = 1e-7
    for j in range(grid.n):
        bump = np.zeros(grid.n)
        bump[j] = eps
        pc_p, qc_p = impl.calc_injections(grid.ybus.g, grid.ybus.b, (v + bump)[None], theta[None])
        pc_m, qc_m = impl.calc_injections(grid.ybus.g, grid.ybus.b, (v - bump)[None], theta[None])
        np.testing.assert_allclose(dp_dv[:, j], (pc_p[0] - pc_m[0]) / (2 * eps), atol=1e-6)
        np.testing.assert_allclose(dq_dv[:, j], (qc_p[0] - qc_m[0]) / (2 * eps), atol=1e-6)
        pc_p, qc_p = impl.calc_injections(grid.ybus.g, grid.ybus.b, v[None], (theta + bump)[None])
        pc_m, qc_m = impl.calc_injections(grid.ybus.g, grid.ybus.b, v[None], (theta - bump)[None])
        np.testing.assert_allclose(dp_dth[:, j], (pc_p[0] - pc_m[0]) / (2 * eps), atol=1e-6)
        np.testing.assert_allclose(dq_dth[:, j], (qc_p[0] - qc_m[0]) / (2 * eps), atol=1e-6)


@pytest.mark.skipif(_fast is None, reason="compiled backend not built")
@pytest.mark.parametrize("name", ["case6", "case24"])
def test_backends_agree(name):
    grid = load_bundled_case(name)
    rng = np.random.default_rng(9)
    v, theta = _random_states(grid, 11, seed=9)
    wp = rng.standard_normal(v.shape)
    wq = rng.standard_normal(v.shape)
    nb = len(grid.branches)
    wf = np.abs(rng.standard_normal((11, nb)))
    wt = np.abs(rng.standard_normal((11, nb)))

    for a, b in zip(
        _pure.calc_injections(grid.ybus.g, grid.ybus.b, v, theta),
        _fast.calc_injections(grid.ybus.g, grid.ybus.b, v, theta),
    ):
        np.testing.assert_allclose(a, b, atol=1e-12)
    for a, b in zip(
        _pure.balance_vjp(grid.ybus.g, grid.ybus.b, v, theta, wp, wq),
        _fast.balance_vjp(grid.ybus.g, grid.ybus.b, v, theta, wp, wq),
    ):
        np.testing.assert_allclose(a, b, atol=1e-12)
    for a, b in zip(
        _pure.branch_flow(grid.branch_adm, v, theta),
        _fast.branch_flow(grid.branch_adm, v, theta),
    ):
        np.testing.assert_allclose(a, b, atol=1e-12)
    for a, b in zip(
        _pure.branch_flow_vjp(grid.branch_adm, v, theta, wf, wt),
        _fast.branch_flow_vjp(grid.branch_adm, v, theta, wf, wt),
    ):
        np.testing.assert_allclose(a, b, atol=1e-12)
    for a, b in zip(
        _pure.jacobian_blocks(grid.ybus.g, grid.ybus.b, v[0], theta[0]),
        _fast.jacobian_blocks(grid.ybus.g, grid.ybus.b, v[0], theta[0]),
    ):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_backend_env_var_selects_pure(monkeypatch):
    import importlib
    import gridsynth.kernels as K

    monkeypatch.setenv("GRIDSYNTH_KERNELS", "pure")
    mod = importlib.reload(K)
    assert mod.BACKEND == "pure"
    monkeypatch.delenv("GRIDSYNTH_KERNELS")
    importlib.reload(K)
