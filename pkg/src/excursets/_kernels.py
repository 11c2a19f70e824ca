"""Compiled per-particle GHK step.

The normal CDF, log-CDF and quantile are scipy's own Cephes routines,
reached through their Cython C-API so that compiled loops can call them.
Kernels referencing them are not cached on disk because the function
addresses change between processes.
"""

import ctypes
import math

import numpy as np
from numba import njit
from numba.extending import get_cython_function_address

_sig = ctypes.CFUNCTYPE(ctypes.c_double, ctypes.c_double, ctypes.c_int)
_ndtr = _sig(get_cython_function_address("scipy.special.cython_special", "__pyx_fuse_1ndtr"))
_log_ndtr = _sig(get_cython_function_address("scipy.special.cython_special", "__pyx_fuse_1log_ndtr"))
_ndtri = _sig(get_cython_function_address("scipy.special.cython_special", "ndtri"))


@njit
def accumulate_shift(Lx, rows, D, shift):
    """shift[p] = sum_k Lx[k] * D[rows[k], p]."""
    shift[:] = 0.0
    N = shift.shape[0]
    for k in range(rows.shape[0]):
        v = Lx[k]
        r = rows[k]
        for p in range(N):
            shift[p] += v * D[r, p]


@njit
def truncated_step(lo_base, hi_base, shift, u, lii, logw, d_out):
    """Draw the new coordinate for every live particle and update weights.

    ``lo_base``/``hi_base`` are ``L_ii (a - mu_i)`` and ``L_ii (b - mu_i)``;
    the standardised interval of particle p is shifted by ``shift[p]``.
    Returns the number of particles still alive.
    """
    N = shift.shape[0]
    alive = 0
    for p in range(N):
        if logw[p] == -np.inf:
            d_out[p] = 0.0
            continue
        s = shift[p]
        lo = lo_base + s
        hi = hi_base + s
        if lo > 0.0:
            c_lo = _ndtr(-lo, 1)
            c_hi = _ndtr(-hi, 1)
            mass = c_lo - c_hi
            z = -_ndtri((1.0 - u[p]) * c_lo + u[p] * c_hi, 1)
        else:
            c_lo = _ndtr(lo, 1)
            c_hi = _ndtr(hi, 1)
            mass = c_hi - c_lo
            z = _ndtri((1.0 - u[p]) * c_lo + u[p] * c_hi, 1)
        if mass > 1e-280:
            logm = math.log(mass)
        elif hi > lo:
            if lo > 0.0:
                la = _log_ndtr(-lo, 1)
                lb = _log_ndtr(-hi, 1)
            else:
                la = _log_ndtr(hi, 1)
                lb = _log_ndtr(lo, 1)
            logm = la + math.log1p(-math.exp(lb - la)) if la > -np.inf else -np.inf
        else:
            logm = -np.inf
        if logm == -np.inf or math.isnan(logm):
            logw[p] = -np.inf
            d_out[p] = 0.0
            continue
        zl = np.nextafter(lo, np.inf)
        zh = np.nextafter(hi, -np.inf)
        if not z >= zl:
            z = zl
        if z > zh:
            z = zh
        logw[p] += logm
        d_out[p] = (z - s) / lii
        alive += 1
    return alive
