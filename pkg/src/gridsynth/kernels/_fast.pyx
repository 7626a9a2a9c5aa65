# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled implementation of the numeric kernels.

Mirrors gridsynth.kernels._pure function for function; the loops fuse the
trig evaluations and avoid the (m, n, n) temporaries the numpy version
builds, which is where the time goes for the small, many-state batches the
sampler produces.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, sin, sqrt

cnp.import_array()

BACKEND_NAME = "fast"


def calc_injections(double[:, ::1] g, double[:, ::1] b,
                    double[:, ::1] v, double[:, ::1] theta):
    cdef Py_ssize_t m = v.shape[0], n = v.shape[1]
    cdef cnp.ndarray pc_arr = np.empty((m, n)), qc_arr = np.empty((m, n))
    cdef double[:, ::1] pc = pc_arr, qc = qc_arr
    cdef Py_ssize_t s, i, j
    cdef double dt, ra, rd, c, sn
    with nogil:
        for s in range(m):
            for i in range(n):
                ra = 0.0
                rd = 0.0
                for j in range(n):
                    dt = theta[s, i] - theta[s, j]
                    c = cos(dt)
                    sn = sin(dt)
                    ra += v[s, j] * (g[i, j] * c + b[i, j] * sn)
                    rd += v[s, j] * (g[i, j] * sn - b[i, j] * c)
                pc[s, i] = v[s, i] * ra
                qc[s, i] = v[s, i] * rd
    return pc_arr, qc_arr


def balance_vjp(double[:, ::1] g, double[:, ::1] b,
                double[:, ::1] v, double[:, ::1] theta,
                double[:, ::1] wp, double[:, ::1] wq):
    cdef Py_ssize_t m = v.shape[0], n = v.shape[1]
    cdef cnp.ndarray gv_arr = np.zeros((m, n)), gth_arr = np.zeros((m, n))
    cdef double[:, ::1] gv = gv_arr, gth = gth_arr
    cdef Py_ssize_t s, i, k
    cdef double dt, c, sn, a_ik, d_ik, ra, rd, acc_v, acc_t, vwp_i, vwq_i
    with nogil:
        for s in range(m):
            for k in range(n):
                ra = 0.0
                rd = 0.0
                acc_v = 0.0
                acc_t = 0.0
                for i in range(n):
                    # A/D terms of row k (for the diagonal contributions)
                    dt = theta[s, k] - theta[s, i]
                    c = cos(dt)
                    sn = sin(dt)
                    ra += v[s, i] * (g[k, i] * c + b[k, i] * sn)
                    rd += v[s, i] * (g[k, i] * sn - b[k, i] * c)
                    # column-k contractions of rows i (transposed access)
                    dt = theta[s, i] - theta[s, k]
                    c = cos(dt)
                    sn = sin(dt)
                    a_ik = g[i, k] * c + b[i, k] * sn
                    d_ik = g[i, k] * sn - b[i, k] * c
                    vwp_i = v[s, i] * wp[s, i]
                    vwq_i = v[s, i] * wq[s, i]
                    acc_v += vwp_i * a_ik + vwq_i * d_ik
                    if i != k:
                        acc_t += vwp_i * d_ik - vwq_i * a_ik
                gv[s, k] = wp[s, k] * ra + wq[s, k] * rd + acc_v
                gth[s, k] = (wp[s, k] * (-v[s, k] * rd - v[s, k] * v[s, k] * b[k, k])
                             + wq[s, k] * (v[s, k] * ra - v[s, k] * v[s, k] * g[k, k])
                             + v[s, k] * acc_t)
    return gv_arr, gth_arr


def jacobian_blocks(double[:, ::1] g, double[:, ::1] b,
                    double[::1] v, double[::1] theta):
    cdef Py_ssize_t n = v.shape[0]
    cdef cnp.ndarray dpt_arr = np.empty((n, n)), dpv_arr = np.empty((n, n))
    cdef cnp.ndarray dqt_arr = np.empty((n, n)), dqv_arr = np.empty((n, n))
    cdef double[:, ::1] dpt = dpt_arr, dpv = dpv_arr, dqt = dqt_arr, dqv = dqv_arr
    cdef Py_ssize_t i, k
    cdef double dt, c, sn, a, d, ra, rd
    with nogil:
        for i in range(n):
            ra = 0.0
            rd = 0.0
            for k in range(n):
                dt = theta[i] - theta[k]
                c = cos(dt)
                sn = sin(dt)
                a = g[i, k] * c + b[i, k] * sn
                d = g[i, k] * sn - b[i, k] * c
                ra += v[k] * a
                rd += v[k] * d
                dpt[i, k] = v[i] * v[k] * d
                dqt[i, k] = -v[i] * v[k] * a
                dpv[i, k] = v[i] * a
                dqv[i, k] = v[i] * d
            dpt[i, i] = -v[i] * rd - v[i] * v[i] * b[i, i]
            dqt[i, i] = v[i] * ra - v[i] * v[i] * g[i, i]
            dpv[i, i] += ra
            dqv[i, i] += rd
    return dpt_arr, dpv_arr, dqt_arr, dqv_arr


def branch_flow(adm, double[:, ::1] v, double[:, ::1] theta):
    cdef long[::1] f = adm.f, t = adm.t
    cdef double[::1] gff = adm.gff, bff = adm.bff, gft = adm.gft, bft = adm.bft
    cdef double[::1] gtf = adm.gtf, btf = adm.btf, gtt = adm.gtt, btt = adm.btt
    cdef Py_ssize_t m = v.shape[0], nb = f.shape[0]
    cdef cnp.ndarray sf_arr = np.empty((m, nb)), st_arr = np.empty((m, nb))
    cdef double[:, ::1] sf = sf_arr, st = st_arr
    cdef Py_ssize_t s, k
    cdef double vf, vt, c, sn, pf, qf, pt, qt
    with nogil:
        for s in range(m):
            for k in range(nb):
                vf = v[s, f[k]]
                vt = v[s, t[k]]
                c = cos(theta[s, f[k]] - theta[s, t[k]])
                sn = sin(theta[s, f[k]] - theta[s, t[k]])
                pf = vf * vf * gff[k] + vf * vt * (gft[k] * c + bft[k] * sn)
                qf = -vf * vf * bff[k] + vf * vt * (gft[k] * sn - bft[k] * c)
                pt = vt * vt * gtt[k] + vf * vt * (gtf[k] * c - btf[k] * sn)
                qt = -vt * vt * btt[k] + vf * vt * (-gtf[k] * sn - btf[k] * c)
                sf[s, k] = sqrt(pf * pf + qf * qf)
                st[s, k] = sqrt(pt * pt + qt * qt)
    return sf_arr, st_arr


def branch_flow_vjp(adm, double[:, ::1] v, double[:, ::1] theta,
                    double[:, ::1] wf, double[:, ::1] wt):
    cdef long[::1] f = adm.f, t = adm.t
    cdef double[::1] gff = adm.gff, bff = adm.bff, gft = adm.gft, bft = adm.bft
    cdef double[::1] gtf = adm.gtf, btf = adm.btf, gtt = adm.gtt, btt = adm.btt
    cdef Py_ssize_t m = v.shape[0], n = v.shape[1], nb = f.shape[0]
    cdef cnp.ndarray gv_arr = np.zeros((m, n)), gth_arr = np.zeros((m, n))
    cdef double[:, ::1] gv = gv_arr, gth = gth_arr
    cdef Py_ssize_t s, k
    cdef double vf, vt, c, sn, pf, qf, pt, qt, sfk, stk, uf, ut
    cdef double gvf, gvt, gthf
    with nogil:
        for s in range(m):
            for k in range(nb):
                if wf[s, k] == 0.0 and wt[s, k] == 0.0:
                    continue
                vf = v[s, f[k]]
                vt = v[s, t[k]]
                c = cos(theta[s, f[k]] - theta[s, t[k]])
                sn = sin(theta[s, f[k]] - theta[s, t[k]])
                pf = vf * vf * gff[k] + vf * vt * (gft[k] * c + bft[k] * sn)
                qf = -vf * vf * bff[k] + vf * vt * (gft[k] * sn - bft[k] * c)
                pt = vt * vt * gtt[k] + vf * vt * (gtf[k] * c - btf[k] * sn)
                qt = -vt * vt * btt[k] + vf * vt * (-gtf[k] * sn - btf[k] * c)
                sfk = sqrt(pf * pf + qf * qf)
                stk = sqrt(pt * pt + qt * qt)
                gvf = 0.0
                gvt = 0.0
                gthf = 0.0
                if wf[s, k] != 0.0 and sfk > 0.0:
                    uf = wf[s, k] / sfk
                    gvf += uf * (pf * (2 * vf * gff[k] + vt * (gft[k] * c + bft[k] * sn))
                                 + qf * (-2 * vf * bff[k] + vt * (gft[k] * sn - bft[k] * c)))
                    gvt += uf * (pf * vf * (gft[k] * c + bft[k] * sn)
                                 + qf * vf * (gft[k] * sn - bft[k] * c))
                    gthf += uf * (pf * vf * vt * (-gft[k] * sn + bft[k] * c)
                                  + qf * vf * vt * (gft[k] * c + bft[k] * sn))
                if wt[s, k] != 0.0 and stk > 0.0:
                    ut = wt[s, k] / stk
                    gvf += ut * (pt * vt * (gtf[k] * c - btf[k] * sn)
                                 + qt * vt * (-gtf[k] * sn - btf[k] * c))
                    gvt += ut * (pt * (2 * vt * gtt[k] + vf * (gtf[k] * c - btf[k] * sn))
                                 + qt * (-2 * vt * btt[k] + vf * (-gtf[k] * sn - btf[k] * c)))
                    gthf += ut * (pt * vf * vt * (-gtf[k] * sn - btf[k] * c)
                                  + qt * vf * vt * (-gtf[k] * c + btf[k] * sn))
                gv[s, f[k]] += gvf
                gv[s, t[k]] += gvt
                gth[s, f[k]] += gthf
                gth[s, t[k]] -= gthf
    return gv_arr, gth_arr
