"""AC power-flow equations, operating limits, penalties, and solvers.

A grid state is the flat vector x = [P | Q | V | theta] of length 4n: net
active/reactive injection, voltage magnitude, and voltage angle per bus, all
per-unit / radians.  Feasibility has two layers:

* equality H(x) = 0: specified minus calculated injection at every bus
  (2n equations);
* inequality G(x) <= 0: voltage-band, generator-capability, and
  branch-rating constraints, expressed as signed slack values.

The soft penalties r_h = ||H||^2 and r_g = ||max(G, 0)||^2 and their exact
gradient drive the sampler's guidance step; the Newton solver provides data
generation and the projection step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DimensionMismatch, SingularJacobian
from .grid import GridCase


@dataclass
class StateVector:
    """Named view of one operating state.

    P, Q are net bus injections (generation minus demand), V magnitudes,
    theta angles.  All arrays have length n.
    """

    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    theta: np.ndarray

    @property
    def n(self) -> int:
        return self.p.size

    @classmethod
    def from_flat(cls, x: np.ndarray) -> "StateVector":
        x = np.asarray(x, dtype=float)
        if x.ndim != 1 or x.size % 4:
            raise DimensionMismatch(f"flat state must have length 4n, got {x.shape}")
        n = x.size // 4
        return cls(x[:n].copy(), x[n : 2 * n].copy(), x[2 * n : 3 * n].copy(), x[3 * n :].copy())

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.p, self.q, self.v, self.theta])


@dataclass
class ResidualReport:
    """Feasibility residuals of one state.

    h is the signed power-balance mismatch (2n,), g the clipped inequality
    violations max(G, 0), and r_h / r_g their squared 2-norms.
    """

    h: np.ndarray
    g: np.ndarray
    r_h: float
    r_g: float


@dataclass
class PFSolution:
    """Outcome of a Newton power-flow solve or a feasibility projection."""

    state: StateVector
    iterations: int
    final_mismatch: float
    converged: bool
    distance: float | None = None


def split_states(x: np.ndarray, grid: GridCase):
    """Split flat states (m, 4n) or (4n,) into (p, q, v, theta) blocks.

    The blocks are contiguous copies, which the compiled kernels require.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = grid.n
    if x.shape[1] != 4 * n:
        raise DimensionMismatch(f"state has {x.shape[1]} features, grid needs {4 * n}")
    return (
        np.ascontiguousarray(x[:, :n]),
        np.ascontiguousarray(x[:, n : 2 * n]),
        np.ascontiguousarray(x[:, 2 * n : 3 * n]),
        np.ascontiguousarray(x[:, 3 * n :]),
    )


def batch_mismatch(x: np.ndarray, grid: GridCase) -> np.ndarray:
    """Power-balance mismatch h = [P - Pc | Q - Qc] for states (m, 4n)."""
    p, q, v, theta = split_states(x, grid)
    pc, qc = kernels.calc_injections(grid.ybus.g, grid.ybus.b, v, theta)
    return np.concatenate([p - pc, q - qc], axis=1)


def batch_limits(x: np.ndarray, grid: GridCase, line_limits: bool = True) -> np.ndarray:
    """Signed operating-limit slack values G(x) for states (m, 4n).

    Ordering: V - Vmax (n), Vmin - V (n), then per generator
    [Pg - Pmax, Pmin - Pg, Qg - Qmax, Qmin - Qg] with Pg, Qg recovered by
    adding the case's baseline demand at the host bus, then per rated branch
    (smax > 0) the overloads [Sf - Smax, St - Smax].  line_limits=False
    drops the branch block (box constraints only).
    """
    p, q, v, theta = split_states(x, grid)
    m = x.shape[0] if x.ndim == 2 else 1

    parts = [v - grid.vmax, grid.vmin - v]
    if grid.n_gen:
        gb = grid.gen_bus
        pg = p[:, gb] + grid.pd[gb]
        qg = q[:, gb] + grid.qd[gb]
        gen = np.stack(
            [pg - grid.gen_pmax, grid.gen_pmin - pg, qg - grid.gen_qmax, grid.gen_qmin - qg],
            axis=2,
        ).reshape(m, 4 * grid.n_gen)
        parts.append(gen)
    rated = grid.branch_adm.smax > 0
    if line_limits and rated.any():
        sf, st = kernels.branch_flow(grid.branch_adm, v, theta)
        smax = grid.branch_adm.smax[rated]
        br = np.stack([sf[:, rated] - smax, st[:, rated] - smax], axis=2)
        parts.append(br.reshape(m, 2 * rated.sum()))
    return np.concatenate(parts, axis=1)


def limit_labels(grid: GridCase) -> list[str]:
    """Human-readable labels matching the batch_limits column order."""
    ids = grid.bus_ids
    labels = [f"V_hi_{b}" for b in ids] + [f"V_lo_{b}" for b in ids]
    for g in grid.gens:
        labels += [f"Pg_hi_{g.bus}", f"Pg_lo_{g.bus}", f"Qg_hi_{g.bus}", f"Qg_lo_{g.bus}"]
    for br in grid.branches:
        if br.smax > 0:
            labels += [
                f"S_from_{br.from_bus}_{br.to_bus}",
                f"S_to_{br.from_bus}_{br.to_bus}",
            ]
    return labels


def batch_penalties(x: np.ndarray, grid: GridCase):
    """(r_h, r_g, h, gviol) for states (m, 4n); penalties are squared 2-norms."""
    h = batch_mismatch(x, grid)
    gviol = np.maximum(batch_limits(x, grid), 0.0)
    return (h * h).sum(axis=1), (gviol * gviol).sum(axis=1), h, gviol


def batch_grad_penalties(x: np.ndarray, grid: GridCase, line_limits: bool = True) -> np.ndarray:
    """Exact gradient of r_h + r_g for states (m, 4n), returned as (m, 4n).

    Chain rule over the injection map and branch flows; at inactive
    constraints (G <= 0) the clipped penalty contributes a zero subgradient.
    line_limits=False excludes the branch-overload terms from r_g, matching
    batch_limits(..., line_limits=False).
    """
    x2 = np.atleast_2d(np.asarray(x, dtype=float))
    p, q, v, theta = split_states(x2, grid)
    n = grid.n
    m = x2.shape[0]

    pc, qc = kernels.calc_injections(grid.ybus.g, grid.ybus.b, v, theta)
    hp = p - pc
    hq = q - qc

    gp = 2.0 * hp
    gq = 2.0 * hq
    # dh/d(V,theta) = -d(Pc,Qc)/d(V,theta)
    gv_bal, gth_bal = kernels.balance_vjp(grid.ybus.g, grid.ybus.b, v, theta, hp, hq)
    gv = -2.0 * gv_bal
    gth = -2.0 * gth_bal

    gv += 2.0 * np.maximum(v - grid.vmax, 0.0)
    gv -= 2.0 * np.maximum(grid.vmin - v, 0.0)

    if grid.n_gen:
        gb = grid.gen_bus
        pg = p[:, gb] + grid.pd[gb]
        qg = q[:, gb] + grid.qd[gb]
        dpg = 2.0 * (np.maximum(pg - grid.gen_pmax, 0.0) - np.maximum(grid.gen_pmin - pg, 0.0))
        dqg = 2.0 * (np.maximum(qg - grid.gen_qmax, 0.0) - np.maximum(grid.gen_qmin - qg, 0.0))
        # one generator per bus after aggregation, so plain fancy indexing is safe
        gp[:, gb] += dpg
        gq[:, gb] += dqg

    rated = grid.branch_adm.smax > 0
    if line_limits and rated.any():
        sf, st = kernels.branch_flow(grid.branch_adm, v, theta)
        wf = np.zeros_like(sf)
        wt = np.zeros_like(st)
        smax = grid.branch_adm.smax
        wf[:, rated] = 2.0 * np.maximum(sf[:, rated] - smax[rated], 0.0)
        wt[:, rated] = 2.0 * np.maximum(st[:, rated] - smax[rated], 0.0)
        if wf.any() or wt.any():
            gv_br, gth_br = kernels.branch_flow_vjp(grid.branch_adm, v, theta, wf, wt)
            gv += gv_br
            gth += gth_br

    out = np.concatenate([gp, gq, gv, gth], axis=1)
    return out if np.asarray(x).ndim == 2 else out[0]


# -- single-state conveniences ------------------------------------------------


def eval_H(state: np.ndarray | StateVector, grid: GridCase) -> np.ndarray:
    """Power-balance residual (2n,) of one state."""
    x = state.flatten() if isinstance(state, StateVector) else np.asarray(state)
    return batch_mismatch(x, grid)[0]


def eval_G(state: np.ndarray | StateVector, grid: GridCase, line_limits: bool = True) -> np.ndarray:
    """Signed operating-limit slacks of one state (<= 0 means satisfied)."""
    x = state.flatten() if isinstance(state, StateVector) else np.asarray(state)
    return batch_limits(x, grid, line_limits=line_limits)[0]


def residual_penalties(state: np.ndarray | StateVector, grid: GridCase) -> ResidualReport:
    """Full feasibility report of one state."""
    x = state.flatten() if isinstance(state, StateVector) else np.asarray(state)
    r_h, r_g, h, gviol = batch_penalties(x, grid)
    return ResidualReport(h=h[0], g=gviol[0], r_h=float(r_h[0]), r_g=float(r_g[0]))


def grad_penalties(
    state: np.ndarray | StateVector, grid: GridCase, line_limits: bool = True
) -> np.ndarray:
    """Gradient (4n,) of r_h + r_g at one state."""
    x = state.flatten() if isinstance(state, StateVector) else np.asarray(state)
    return batch_grad_penalties(x, grid, line_limits=line_limits)


# -- Newton-Raphson -----------------------------------------------------------


def _nr_core(grid, p_spec, q_spec, v, theta, tol, max_iter):
    """Polar Newton-Raphson on the reduced unknowns (theta at non-slack,
    V at pq).  Mutates v/theta in place and returns (iterations, mismatch,
    converged)."""
    ns = np.array([i for i in range(grid.n) if i != grid.slack], dtype=np.int64)
    pq = grid.pq
    it = 0
    while True:
        pc, qc = kernels.calc_injections(
            grid.ybus.g, grid.ybus.b, v[None, :], theta[None, :]
        )
        f = np.concatenate([(p_spec - pc[0])[ns], (q_spec - qc[0])[pq]])
        norm = float(np.abs(f).max()) if f.size else 0.0
        if not np.isfinite(norm) or (v <= 0).any():
            return it, norm, False
        if norm < tol:
            return it, norm, True
        if it >= max_iter:
            return it, norm, False

        dp_dth, dp_dv, dq_dth, dq_dv = kernels.jacobian_blocks(
            grid.ybus.g, grid.ybus.b, v, theta
        )
        top = np.concatenate([dp_dth[np.ix_(ns, ns)], dp_dv[np.ix_(ns, pq)]], axis=1)
        bot = np.concatenate([dq_dth[np.ix_(pq, ns)], dq_dv[np.ix_(pq, pq)]], axis=1)
        jac = np.concatenate([top, bot], axis=0)
        try:
            step = np.linalg.solve(jac, f)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobian(f"singular Jacobian at iteration {it}") from exc
        theta[ns] += step[: ns.size]
        v[pq] += step[ns.size :]
        it += 1


def _assemble_state(grid, p_spec, q_spec, v, theta) -> StateVector:
    """Final state carries the specified injections exactly; only the free
    quantities (slack P, slack/pv Q) come from the calculated values.  This
    keeps structurally-zero injections at exactly 0.0."""
    pc, qc = kernels.calc_injections(grid.ybus.g, grid.ybus.b, v[None, :], theta[None, :])
    p = p_spec.copy()
    q = q_spec.copy()
    p[grid.slack] = pc[0, grid.slack]
    q[grid.slack] = qc[0, grid.slack]
    q[grid.pv] = qc[0, grid.pv]
    return StateVector(p=p, q=q, v=v.copy(), theta=theta.copy())


def newton_raphson(
    grid: GridCase,
    pd: np.ndarray,
    qd: np.ndarray,
    pg: np.ndarray,
    *,
    tol: float = 1e-8,
    max_iter: int = 30,
    warm_start: tuple[np.ndarray, np.ndarray] | None = None,
    slack_theta: float = 0.0,
) -> PFSolution:
    """Solve the power flow for given demands and generator dispatch.

    pd, qd are per-bus demand vectors (n,); pg is per-generator active
    dispatch (n_gen,) of which the slack generator's entry is ignored (slack
    P absorbs losses).  Voltage magnitudes at generator buses are held at
    their setpoints; the slack angle is held at slack_theta.  warm_start, if
    given, is a (v, theta) pair; the default is a flat start.

    Raises SingularJacobian when the Jacobian cannot be factored; ordinary
    non-convergence is flagged on the returned PFSolution instead.
    """
    pd = np.asarray(pd, dtype=float)
    qd = np.asarray(qd, dtype=float)
    pg = np.asarray(pg, dtype=float)
    if pd.shape != (grid.n,) or qd.shape != (grid.n,):
        raise DimensionMismatch("pd/qd must have shape (n,)")
    if pg.shape != (grid.n_gen,):
        raise DimensionMismatch("pg must have shape (n_gen,)")

    p_spec = -pd.copy()
    q_spec = -qd.copy()
    for k, bus in enumerate(grid.gen_bus):
        if bus != grid.slack:
            p_spec[bus] += pg[k]

    if warm_start is None:
        v = np.ones(grid.n)
        v[grid.gen_bus] = grid.gen_vset
        theta = np.full(grid.n, slack_theta)
    else:
        v = np.array(warm_start[0], dtype=float)
        theta = np.array(warm_start[1], dtype=float)
    theta[grid.slack] = slack_theta

    it, norm, ok = _nr_core(grid, p_spec, q_spec, v, theta, tol, max_iter)
    return PFSolution(
        state=_assemble_state(grid, p_spec, q_spec, v, theta),
        iterations=it,
        final_mismatch=norm,
        converged=ok,
    )


def project_to_feasible(
    state: np.ndarray | StateVector,
    grid: GridCase,
    *,
    tol: float = 1e-8,
    max_iter: int = 30,
) -> PFSolution:
    """Project a state onto the power-flow manifold by re-solving around it.

    The sample's injections at pq buses, active injections and voltage
    magnitudes at pv buses, and the slack bus voltage and angle are held
    fixed; V/theta elsewhere are re-solved starting from the sample's own
    values.  A state that already satisfies the balance equations to tol is
    returned unchanged (zero iterations).

    Non-convergence (including a singular Jacobian) is flagged, not raised:
    the original state comes back with converged=False and distance NaN.
    """
    sv = state if isinstance(state, StateVector) else StateVector.from_flat(np.asarray(state))
    x0 = sv.flatten()

    p_spec = sv.p.copy()
    q_spec = sv.q.copy()
    v = sv.v.copy()
    theta = sv.theta.copy()
    try:
        it, norm, ok = _nr_core(grid, p_spec, q_spec, v, theta, tol, max_iter)
    except SingularJacobian:
        it, norm, ok = 0, float("inf"), False
    if not ok:
        return PFSolution(sv, it, norm, False, distance=float("nan"))

    proj = _assemble_state(grid, p_spec, q_spec, v, theta)
    dist = float(np.linalg.norm(proj.flatten() - x0))
    return PFSolution(proj, it, norm, True, distance=dist)
