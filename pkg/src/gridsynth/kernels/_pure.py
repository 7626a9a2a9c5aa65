"""Pure numpy implementation of the numeric kernels.

All functions take batched inputs: V and theta are (m, n) float64 arrays.
The trig/bilinear forms used throughout:

    A_ij = G_ij cos(th_i - th_j) + B_ij sin(th_i - th_j)
    D_ij = G_ij sin(th_i - th_j) - B_ij cos(th_i - th_j)

give calculated injections Pc_i = V_i sum_j V_j A_ij and
Qc_i = V_i sum_j V_j D_ij.
"""

import numpy as np

BACKEND_NAME = "pure"


def _ad(g, b, theta):
    dt = theta[:, :, None] - theta[:, None, :]
    ct = np.cos(dt)
    st = np.sin(dt)
    return g * ct + b * st, g * st - b * ct


def calc_injections(g, b, v, theta):
    """Calculated net injections (Pc, Qc), each (m, n)."""
    a, d = _ad(g, b, theta)
    ra = np.einsum("mij,mj->mi", a, v)
    rd = np.einsum("mij,mj->mi", d, v)
    return v * ra, v * rd


def balance_vjp(g, b, v, theta, wp, wq):
    """Vector-Jacobian product of the injection map.

    Returns (gv, gth) with gv_k = sum_i wp_i dPc_i/dV_k + wq_i dQc_i/dV_k
    and likewise for theta.  Weights wp, wq are (m, n).
    """
    a, d = _ad(g, b, theta)
    ra = np.einsum("mij,mj->mi", a, v)
    rd = np.einsum("mij,mj->mi", d, v)
    pc = v * ra
    qc = v * rd
    vwp = v * wp
    vwq = v * wq

    gv = wp * ra + wq * rd
    gv += np.einsum("mi,mik->mk", vwp, a)
    gv += np.einsum("mi,mik->mk", vwq, d)

    gdiag = np.diagonal(g, axis1=-2, axis2=-1)
    bdiag = np.diagonal(b, axis1=-2, axis2=-1)
    # column sums excluding the i = k diagonal term
    sd = np.einsum("mi,mik->mk", vwp, d) - vwp * (-bdiag)
    sa = np.einsum("mi,mik->mk", vwq, a) - vwq * gdiag
    gth = wp * (-qc - v * v * bdiag) + wq * (pc - v * v * gdiag)
    gth += v * (sd - sa)
    return gv, gth


def jacobian_blocks(g, b, v, theta):
    """Dense power-flow Jacobian blocks for a single state.

    v, theta are (n,).  Returns (dP_dth, dP_dv, dQ_dth, dQ_dv), each (n, n),
    with entry [i, k] = d(injection_i)/d(unknown_k).
    """
    dt = theta[:, None] - theta[None, :]
    ct = np.cos(dt)
    st = np.sin(dt)
    a = g * ct + b * st
    d = g * st - b * ct
    ra = a @ v
    rd = d @ v
    pc = v * ra
    qc = v * rd
    gdiag = np.diag(g)
    bdiag = np.diag(b)

    vv = v[:, None] * v[None, :]
    dp_dth = vv * d
    np.fill_diagonal(dp_dth, -qc - v * v * bdiag)
    dq_dth = -vv * a
    np.fill_diagonal(dq_dth, pc - v * v * gdiag)
    dp_dv = v[:, None] * a
    dp_dv[np.diag_indices_from(dp_dv)] += ra
    dq_dv = v[:, None] * d
    dq_dv[np.diag_indices_from(dq_dv)] += rd
    return dp_dth, dp_dv, dq_dth, dq_dv


def branch_flow(adm, v, theta):
    """Apparent power magnitude at both ends of every branch.

    adm carries the per-branch two-port terms; returns (sf, st_), each
    (m, nb).
    """
    f, t = adm.f, adm.t
    vf = v[:, f]
    vt = v[:, t]
    dt = theta[:, f] - theta[:, t]
    c = np.cos(dt)
    s = np.sin(dt)
    pf = vf * vf * adm.gff + vf * vt * (adm.gft * c + adm.bft * s)
    qf = -vf * vf * adm.bff + vf * vt * (adm.gft * s - adm.bft * c)
    pt = vt * vt * adm.gtt + vf * vt * (adm.gtf * c - adm.btf * s)
    qt = -vt * vt * adm.btt + vf * vt * (-adm.gtf * s - adm.btf * c)
    return np.hypot(pf, qf), np.hypot(pt, qt)


def branch_flow_vjp(adm, v, theta, wf, wt):
    """Vector-Jacobian product of branch_flow with weights (wf, wt).

    Returns (gv, gth), each (m, n): the gradient of
    sum_k wf_k Sf_k + wt_k St_k with respect to bus voltages and angles.
    Branches where S is zero contribute nothing (their weight is zero in
    every caller, since a zero flow cannot exceed a positive rating).
    """
    f, t = adm.f, adm.t
    vf = v[:, f]
    vt = v[:, t]
    dt = theta[:, f] - theta[:, t]
    c = np.cos(dt)
    s = np.sin(dt)

    pf = vf * vf * adm.gff + vf * vt * (adm.gft * c + adm.bft * s)
    qf = -vf * vf * adm.bff + vf * vt * (adm.gft * s - adm.bft * c)
    pt = vt * vt * adm.gtt + vf * vt * (adm.gtf * c - adm.btf * s)
    qt = -vt * vt * adm.btt + vf * vt * (-adm.gtf * s - adm.btf * c)
    sf = np.hypot(pf, qf)
    st_ = np.hypot(pt, qt)

    with np.errstate(divide="ignore", invalid="ignore"):
        uf = np.where(sf > 0, wf / np.where(sf > 0, sf, 1.0), 0.0)
        ut = np.where(st_ > 0, wt / np.where(st_ > 0, st_, 1.0), 0.0)

    # d(Sf)/du = (Pf dPf/du + Qf dQf/du) / Sf, folded into uf
    dpf_dvf = 2 * vf * adm.gff + vt * (adm.gft * c + adm.bft * s)
    dpf_dvt = vf * (adm.gft * c + adm.bft * s)
    dpf_dth = vf * vt * (-adm.gft * s + adm.bft * c)  # wrt th_f; wrt th_t is -this
    dqf_dvf = -2 * vf * adm.bff + vt * (adm.gft * s - adm.bft * c)
    dqf_dvt = vf * (adm.gft * s - adm.bft * c)
    dqf_dth = vf * vt * (adm.gft * c + adm.bft * s)

    dpt_dvt = 2 * vt * adm.gtt + vf * (adm.gtf * c - adm.btf * s)
    dpt_dvf = vt * (adm.gtf * c - adm.btf * s)
    dpt_dth = vf * vt * (-adm.gtf * s - adm.btf * c)
    dqt_dvt = -2 * vt * adm.btt + vf * (-adm.gtf * s - adm.btf * c)
    dqt_dvf = vt * (-adm.gtf * s - adm.btf * c)
    dqt_dth = vf * vt * (-adm.gtf * c + adm.btf * s)

    cf_vf = uf * (pf * dpf_dvf + qf * dqf_dvf)
    cf_vt = uf * (pf * dpf_dvt + qf * dqf_dvt)
    cf_th = uf * (pf * dpf_dth + qf * dqf_dth)
    ct_vf = ut * (pt * dpt_dvf + qt * dqt_dvf)
    ct_vt = ut * (pt * dpt_dvt + qt * dqt_dvt)
    ct_th = ut * (pt * dpt_dth + qt * dqt_dth)

    m, n = v.shape
    gv = np.zeros((m, n))
    gth = np.zeros((m, n))
    rows = np.arange(m)[:, None]
    np.add.at(gv, (rows, f[None, :]), cf_vf + ct_vf)
    np.add.at(gv, (rows, t[None, :]), cf_vt + ct_vt)
    np.add.at(gth, (rows, f[None, :]), cf_th + ct_th)
    np.add.at(gth, (rows, t[None, :]), -(cf_th + ct_th))
    return gv, gth
