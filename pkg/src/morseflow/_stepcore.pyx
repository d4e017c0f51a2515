# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled RK4 stepping core for the diagonal quartic family.

Behaviour matches _stepcore_py.run_steps exactly; _stepping selects this
module when the build succeeded.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def run_steps(double[:, ::1] X, Py_ssize_t n_pre, Py_ssize_t n_steps, double h,
              double eps, double[::1] a, double[::1] b,
              double[::1] rw1, double[::1] rwh,
              double wsum1, double wsumh, double mtot, double blow_bound):
    cdef Py_ssize_t d = X.shape[1]
    cdef Py_ssize_t nM = rw1.shape[0]
    cdef Py_ssize_t k, i, j, base
    cdef double lin1 = eps * (mtot - wsum1)
    cdef double linh = eps * (mtot - wsumh)
    cdef double xs, nrm, v
    cdef cnp.ndarray[double, ndim=1] buf = np.zeros(7 * d)
    cdef double[::1] c1 = buf[0:d]
    cdef double[::1] ch = buf[d:2 * d]
    cdef double[::1] c4 = buf[2 * d:3 * d]
    cdef double[::1] k1 = buf[3 * d:4 * d]
    cdef double[::1] k2 = buf[4 * d:5 * d]
    cdef double[::1] k3 = buf[5 * d:6 * d]
    cdef double[::1] k4 = buf[6 * d:7 * d]

    base = n_pre - nM
    for i in range(nM):
        v = rw1[i]
        for j in range(d):
            c1[j] += v * X[base + i, j]

    for k in range(n_pre, n_pre + n_steps):
        base = k + 1 - nM
        for j in range(d):
            ch[j] = 0.0
            c4[j] = 0.0
        for i in range(nM):
            for j in range(d):
                v = X[base + i, j]
                ch[j] += rwh[i] * v
                c4[j] += rw1[i] * v

        for j in range(d):
            xs = X[k, j]
            k1[j] = (a[j] + lin1) * xs - b[j] * xs * xs * xs + eps * c1[j]
        for j in range(d):
            xs = X[k, j] + 0.5 * h * k1[j]
            k2[j] = (a[j] + linh) * xs - b[j] * xs * xs * xs + eps * ch[j]
        for j in range(d):
            xs = X[k, j] + 0.5 * h * k2[j]
            k3[j] = (a[j] + linh) * xs - b[j] * xs * xs * xs + eps * ch[j]
        for j in range(d):
            xs = X[k, j] + h * k3[j]
            k4[j] = (a[j] + lin1) * xs - b[j] * xs * xs * xs + eps * c4[j]

        nrm = 0.0
        for j in range(d):
            xs = X[k, j] + (h / 6.0) * (k1[j] + 2.0 * (k2[j] + k3[j]) + k4[j])
            X[k + 1, j] = xs
            if xs < 0.0:
                xs = -xs
            if xs > nrm:
                nrm = xs
        if not nrm <= blow_bound:
            return k + 1
        for j in range(d):
            c1[j] = c4[j]
    return -1
