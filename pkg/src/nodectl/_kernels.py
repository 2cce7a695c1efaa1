"""Compiled stepping loops shared by the Euler and RK4 integrators.

Schedules are packed into flat arrays (one row per segment) before they get
here. Offsets that move in time are stored as ``(base, rate, decay)`` and
evaluated as ``base + rate*s + decay*exp(-s)``, ``s`` being the time since the
segment started.
"""

import math

import numpy as np
from numba import njit

RELU = 0
SIGMOID = 1

EULER = 0
RK4 = 1


@njit(cache=True)
def _act(kind, z):
    if kind == RELU:
        return z if z > 0.0 else 0.0
    if z >= 0.0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


@njit(cache=True)
def _offset(coef, s):
    return coef[0] + coef[1] * s + coef[2] * math.exp(-s)


@njit(cache=True)
def _perceptron_rhs(momentum, act, eps, d, w, a, bcoef, s, z, out):
    arg = _offset(bcoef, s)
    for j in range(d):
        arg += a[j] * z[j]
    sg = _act(act, arg)
    if momentum:
        for j in range(d):
            out[j] = z[d + j]
            out[d + j] = (-z[d + j] + w[j] * sg) / eps
    else:
        for j in range(d):
            out[j] = w[j] * sg


@njit(cache=True)
def _memory_rhs(act, d, dp, W, A, C, b1, b2, u, dv, fcoef, s, z, out, hidden):
    for r in range(d):
        acc = b1[r]
        for c in range(d):
            acc += A[r, c] * z[c]
        for c in range(dp):
            acc += C[r, c] * z[d + c]
        hidden[r] = _act(act, acc)
    for r in range(d):
        acc = b2[r]
        for c in range(d):
            acc += W[r, c] * hidden[c]
        out[r] = acc
    arg = _offset(fcoef, s)
    for c in range(d):
        arg += dv[c] * z[c]
    sg = _act(act, arg)
    for c in range(dp):
        out[d + c] = u[c] * sg


@njit(cache=True)
def run_perceptron(momentum, act, eps, d, Z0, nsteps, durs, Wv, Av, Bc,
                   method, record):
    """Integrate a batch of states through a perceptron-field schedule.

    Returns (final states, recorded states or empty, index of the first
    global step producing a non-finite value or -1).
    """
    n, nz = Z0.shape
    S = nsteps.shape[0]
    total = 0
    for k in range(S):
        total += nsteps[k]
    if record:
        rec = np.empty((total + 1, n, nz))
    else:
        rec = np.empty((0, n, nz))
    Z = Z0.copy()
    if record:
        rec[0] = Z
    k1 = np.empty(nz)
    k2 = np.empty(nz)
    k3 = np.empty(nz)
    k4 = np.empty(nz)
    tmp = np.empty(nz)
    bad = -1
    node = 0
    for k in range(S):
        h = durs[k] / nsteps[k]
        w = Wv[k]
        a = Av[k]
        bc = Bc[k]
        for step in range(nsteps[k]):
            s = step * h
            for i in range(n):
                z = Z[i]
                if method == EULER:
                    _perceptron_rhs(momentum, act, eps, d, w, a, bc, s, z, k1)
                    for m in range(nz):
                        z[m] += h * k1[m]
                else:
                    _perceptron_rhs(momentum, act, eps, d, w, a, bc, s, z, k1)
                    for m in range(nz):
                        tmp[m] = z[m] + 0.5 * h * k1[m]
                    _perceptron_rhs(momentum, act, eps, d, w, a, bc, s + 0.5 * h, tmp, k2)
                    for m in range(nz):
                        tmp[m] = z[m] + 0.5 * h * k2[m]
                    _perceptron_rhs(momentum, act, eps, d, w, a, bc, s + 0.5 * h, tmp, k3)
                    for m in range(nz):
                        tmp[m] = z[m] + h * k3[m]
                    _perceptron_rhs(momentum, act, eps, d, w, a, bc, s + h, tmp, k4)
                    for m in range(nz):
                        z[m] += h / 6.0 * (k1[m] + 2.0 * k2[m] + 2.0 * k3[m] + k4[m])
                for m in range(nz):
                    if not math.isfinite(z[m]):
                        bad = node
                        return Z, rec, bad
            node += 1
            if record:
                rec[node] = Z
    return Z, rec, bad


@njit(cache=True)
def run_memory(act, d, dp, Z0, nsteps, durs, Wm, Am, Cm, B1, B2, U, Dv, Fc,
               method, record):
    n, nz = Z0.shape
    S = nsteps.shape[0]
    total = 0
    for k in range(S):
        total += nsteps[k]
    if record:
        rec = np.empty((total + 1, n, nz))
    else:
        rec = np.empty((0, n, nz))
    Z = Z0.copy()
    if record:
        rec[0] = Z
    k1 = np.empty(nz)
    k2 = np.empty(nz)
    k3 = np.empty(nz)
    k4 = np.empty(nz)
    tmp = np.empty(nz)
    hid = np.empty(d)
    bad = -1
    node = 0
    for k in range(S):
        h = durs[k] / nsteps[k]
        W = Wm[k]
        A = Am[k]
        C = Cm[k]
        b1 = B1[k]
        b2 = B2[k]
        u = U[k]
        dv = Dv[k]
        fc = Fc[k]
        for step in range(nsteps[k]):
            s = step * h
            for i in range(n):
                z = Z[i]
                if method == EULER:
                    _memory_rhs(act, d, dp, W, A, C, b1, b2, u, dv, fc, s, z, k1, hid)
                    for m in range(nz):
                        z[m] += h * k1[m]
                else:
                    _memory_rhs(act, d, dp, W, A, C, b1, b2, u, dv, fc, s, z, k1, hid)
                    for m in range(nz):
                        tmp[m] = z[m] + 0.5 * h * k1[m]
                    _memory_rhs(act, d, dp, W, A, C, b1, b2, u, dv, fc, s + 0.5 * h, tmp, k2, hid)
                    for m in range(nz):
                        tmp[m] = z[m] + 0.5 * h * k2[m]
                    _memory_rhs(act, d, dp, W, A, C, b1, b2, u, dv, fc, s + 0.5 * h, tmp, k3, hid)
                    for m in range(nz):
                        tmp[m] = z[m] + h * k3[m]
                    _memory_rhs(act, d, dp, W, A, C, b1, b2, u, dv, fc, s + h, tmp, k4, hid)
                    for m in range(nz):
                        z[m] += h / 6.0 * (k1[m] + 2.0 * k2[m] + 2.0 * k3[m] + k4[m])
                for m in range(nz):
                    if not math.isfinite(z[m]):
                        bad = node
                        return Z, rec, bad
            node += 1
            if record:
                rec[node] = Z
    return Z, rec, bad
