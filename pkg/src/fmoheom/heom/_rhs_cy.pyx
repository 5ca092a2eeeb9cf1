# cython: boundscheck=False, wraparound=False, initializedcheck=False, cdivision=True
"""Compiled HEOM right-hand side.

Complex arrays are passed as float64 views with interleaved real/imag parts,
so a matrix of shape (N, N) arrives as (N, 2N).
"""

import numpy as np


def heom_rhs(const double[:, ::1] H,
             const double[:, :, ::1] rho,
             double[:, :, ::1] out,
             const double[::1] damping,
             double dephasing,
             const Py_ssize_t[:, ::1] up,
             const Py_ssize_t[:, ::1] down,
             const double[:, ::1] up_coef,
             const double[:, ::1] down_coef,
             const Py_ssize_t[::1] mode_site):
    cdef Py_ssize_t n_ados = rho.shape[0]
    cdef Py_ssize_t n = rho.shape[1]
    cdef Py_ssize_t n_modes = up.shape[1]
    cdef Py_ssize_t a, i, j, q, m, b, s
    cdef double h, c, pr, pi, zr, zi, wr, wi, d, xr, xi
    cdef double[:, ::1] y = np.empty((n, 2 * n))

    with nogil:
        for a in range(n_ados):
            # y = H @ rho[a]; H is real so real and imaginary parts scale alike
            for i in range(n):
                for j in range(2 * n):
                    y[i, j] = 0.0
                for q in range(n):
                    h = H[i, q]
                    if h != 0.0:
                        for j in range(2 * n):
                            y[i, j] += h * rho[a, q, j]
            # -i [H, rho] = -i (y - y^dagger), then damping and terminator
            d = damping[a]
            for i in range(n):
                for j in range(n):
                    wr = y[i, 2 * j] - y[j, 2 * i]
                    wi = y[i, 2 * j + 1] + y[j, 2 * i + 1]
                    xr = rho[a, i, 2 * j]
                    xi = rho[a, i, 2 * j + 1]
                    if i == j:
                        out[a, i, 2 * j] = wi - d * xr
                        out[a, i, 2 * j + 1] = (-wr) - d * xi
                    else:
                        out[a, i, 2 * j] = wi - d * xr - dephasing * xr
                        out[a, i, 2 * j + 1] = (-wr) - d * xi - dephasing * xi
            for m in range(n_modes):
                s = mode_site[m]
                b = up[a, m]
                if b >= 0:
                    c = up_coef[a, m]
                    # -i c [R_s, rho_b]
                    for q in range(n):
                        if q == s:
                            continue
                        zr = rho[b, s, 2 * q]
                        zi = rho[b, s, 2 * q + 1]
                        out[a, s, 2 * q] += c * zi
                        out[a, s, 2 * q + 1] += -(c * zr)
                        zr = rho[b, q, 2 * s]
                        zi = rho[b, q, 2 * s + 1]
                        out[a, q, 2 * s] += -(c * zi)
                        out[a, q, 2 * s + 1] += c * zr
                b = down[a, m]
                if b >= 0:
                    pr = down_coef[a, 2 * m]
                    pi = down_coef[a, 2 * m + 1]
                    # -i (p R_s rho_b - p* rho_b R_s)
                    for q in range(n):
                        zr = rho[b, s, 2 * q]
                        zi = rho[b, s, 2 * q + 1]
                        out[a, s, 2 * q] += pr * zi + pi * zr
                        out[a, s, 2 * q + 1] += -(pr * zr - pi * zi)
                        zr = rho[b, q, 2 * s]
                        zi = rho[b, q, 2 * s + 1]
                        out[a, q, 2 * s] += -(pr * zi - pi * zr)
                        out[a, q, 2 * s + 1] += pr * zr + pi * zi
