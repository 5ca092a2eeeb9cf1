"""Pure numpy HEOM right-hand side, used when the compiled kernel is absent.

Same contract as the Cython ``heom_rhs``: complex arrays arrive as float64
views with interleaved real and imaginary parts.
"""

import numpy as np


def heom_rhs(H, rho, out, damping, dephasing, up, down, up_coef, down_coef, mode_site):
    x = rho.view(np.complex128)
    res = out.view(np.complex128)
    n = x.shape[1]
    cdc = down_coef.view(np.complex128)

    y = np.matmul(H, x)
    np.subtract(y, y.conj().transpose(0, 2, 1), out=res)
    res *= -1j
    res -= damping[:, None, None] * x
    if dephasing:
        off = ~np.eye(n, dtype=bool)
        res[:, off] -= dephasing * x[:, off]

    keep = np.arange(n)
    for m, s in enumerate(mode_site):
        others = keep[keep != s]
        b = up[:, m]
        idx = np.flatnonzero(b >= 0)
        if idx.size:
            z = x[b[idx]]
            c = up_coef[idx, m][:, None]
            res[idx[:, None], s, others] += -1j * c * z[:, s, others]
            res[idx[:, None], others, s] += 1j * c * z[:, others, s]
        b = down[:, m]
        idx = np.flatnonzero(b >= 0)
        if idx.size:
            z = x[b[idx]]
            p = cdc[idx, m][:, None]
            res[idx, s, :] += (-1j * p) * z[:, s, :]
            res[idx, :, s] += (1j * p.conj()) * z[:, :, s]
