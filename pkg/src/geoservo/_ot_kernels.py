"""Unbalanced Sinkhorn iterations with KL marginal penalties.

The iteration runs on scalings (u, v) of a kernel whose dual potentials are
periodically absorbed back into the log domain, so the kernel entries stay
bounded even for very small eps.  A translation step after every sweep
removes the slow constant mode (f + c, g - c) that otherwise stalls the
iteration when tau >> eps.

The same source runs compiled under numba or as vectorized numpy.
"""

import math

import numpy as np

from ._accel import njit

ABSORB_AT = 30.0   # |log scaling| that triggers absorption into the potentials


@njit
def logsumexp_rows(A):
    n = A.shape[0]
    out = np.empty(n)
    for i in range(n):
        mx = np.max(A[i])
        if not np.isfinite(mx):
            out[i] = mx
        else:
            out[i] = mx + math.log(np.sum(np.exp(A[i] - mx)))
    return out


@njit
def stabilized_kernel(C, f, g, eps):
    """K_ij = exp((f_i + g_j - C_ij) / eps)."""
    n, m = C.shape
    K = np.empty((n, m))
    for i in range(n):
        K[i] = np.exp((f[i] + g - C[i]) / eps)
    return K


@njit
def _translate(f, g, loga, logb, tau):
    # optimal shift (f + k, g - k) of the KL dual
    la = np.max(loga - f / tau)
    lb = np.max(logb - g / tau)
    A = la + math.log(np.sum(np.exp(loga - f / tau - la)))
    B = lb + math.log(np.sum(np.exp(logb - g / tau - lb)))
    return 0.5 * tau * (A - B)


@njit
def sinkhorn_loop(C, a, b, eps, tau, f, g, max_iter, tol):
    """Run scaling iterations from potentials (f, g).

    Returns (f, g, iterations, last_change).  ``last_change`` is the sup-norm
    change of the potentials in the final sweep; the caller decides whether
    that counts as converged (iterations == max_iter means it did not).
    """
    lam = tau / (tau + eps)
    loga = np.log(a)
    logb = np.log(b)
    f = f.copy()
    g = g.copy()
    K = stabilized_kernel(C, f, g, eps)
    lu = np.zeros(a.shape[0])
    lv = np.zeros(b.shape[0])
    change = np.inf
    it = 0
    while it < max_iter:
        it += 1
        f_old = f + eps * lu
        g_old = g + eps * lv
        # f-update: eps*log u = (lam-1) f - lam eps log(K (b v))
        Kv = K @ (b * np.exp(lv))
        lu = ((lam - 1.0) * f) / eps - lam * np.log(Kv)
        Ku = (a * np.exp(lu)) @ K
        lv = ((lam - 1.0) * g) / eps - lam * np.log(Ku)
        f_new = f + eps * lu
        g_new = g + eps * lv
        shift = _translate(f_new, g_new, loga, logb, tau)
        if shift != 0.0:
            lu = lu + shift / eps
            lv = lv - shift / eps
            f_new = f_new + shift
            g_new = g_new - shift
        change = max(np.max(np.abs(f_new - f_old)), np.max(np.abs(g_new - g_old)))
        if not np.isfinite(change):
            break
        if np.max(np.abs(lu)) > ABSORB_AT or np.max(np.abs(lv)) > ABSORB_AT:
            f = f_new
            g = g_new
            lu[:] = 0.0
            lv[:] = 0.0
            K = stabilized_kernel(C, f, g, eps)
        if change < tol:
            break
    return f + eps * lu, g + eps * lv, it, change


@njit
def c_transform(C, logw, g, eps, lam):
    """-lam eps log sum_j w_j exp((g_j - C_ij)/eps), evaluated in the log domain."""
    n = C.shape[0]
    A = np.empty(C.shape)
    for i in range(n):
        A[i] = logw + (g - C[i]) / eps
    return -lam * eps * logsumexp_rows(A)


@njit
def plan_from_potentials(C, a, b, f, g, eps):
    n, m = C.shape
    P = np.empty((n, m))
    for i in range(n):
        P[i] = a[i] * b * np.exp((f[i] + g - C[i]) / eps)
    return P


@njit
def generalized_kl(x, y):
    """sum x log(x/y) - x + y with 0 log 0 = 0."""
    total = 0.0
    for k in range(x.shape[0]):
        if x[k] > 0.0:
            total += x[k] * math.log(x[k] / y[k]) - x[k] + y[k]
        else:
            total += y[k]
    return total
