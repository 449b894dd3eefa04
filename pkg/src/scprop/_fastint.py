"""Compiled batch integrator kernel.

Same Dormand-Prince 5(4) scheme, controller and branch tracking as the
numpy path in ``dynamics``, specialized to the shipped closed-form
potentials and d <= 2, with every trajectory stepping on its own adaptive
schedule.  Falls back transparently when numba is unavailable (see
``dynamics.integrate_batch``); agreement between the two paths is covered
by tests.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    if os.environ.get("SCPROP_NO_NUMBA"):
        raise ImportError("disabled via SCPROP_NO_NUMBA")
    from numba import njit, prange
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via env flag
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f
        if args and callable(args[0]):
            return args[0]
        return wrap

    prange = range

POT_FREE = 0
POT_HARMONIC = 1
POT_GAUSSIAN_WELL = 2
POT_QUARTIC = 3
POT_RIDGE = 4

STATUS_OK = 0
STATUS_UNDERFLOW = 1
STATUS_MAX_STEPS = 2


@njit(cache=True)
def _pot_eval(pot_id, par, x, grad, hess, d, need_hess):
    """Value/gradient/Hessian of the analytic continuation at complex x."""
    v = 0.0 + 0.0j
    for a in range(d):
        grad[a] = 0.0 + 0.0j
        if need_hess:
            for b in range(d):
                hess[a, b] = 0.0 + 0.0j
    if pot_id == POT_FREE:
        return v
    if pot_id == POT_HARMONIC:
        for a in range(d):
            w2 = par[a]
            v += 0.5 * w2 * x[a] * x[a]
            grad[a] = w2 * x[a]
            if need_hess:
                hess[a, a] = w2
        return v
    r2 = 0.0 + 0.0j
    for a in range(d):
        r2 += x[a] * x[a]
    if pot_id == POT_GAUSSIAN_WELL:
        depth = par[0]
        e = np.exp(-r2)
        v = -depth * e
        for a in range(d):
            grad[a] = 2.0 * depth * x[a] * e
        if need_hess:
            for a in range(d):
                for b in range(d):
                    hess[a, b] = -4.0 * depth * e * x[a] * x[b]
                hess[a, a] += 2.0 * depth * e
        return v
    if pot_id == POT_QUARTIC:
        aa = par[0]
        bq = par[1]
        v = aa * r2 + bq * r2 * r2
        c = 2.0 * aa + 4.0 * bq * r2
        for a in range(d):
            grad[a] = c * x[a]
        if need_hess:
            for a in range(d):
                for b in range(d):
                    hess[a, b] = 8.0 * bq * x[a] * x[b]
                hess[a, a] += c
        return v
    # ridge
    v0 = par[0]
    r0 = par[1]
    sig = par[2]
    u = r2 - r0 * r0
    g = np.exp(-(u / sig) ** 2)
    v = v0 * g
    c = -4.0 * v0 / (sig * sig)
    for a in range(d):
        grad[a] = c * u * x[a] * g
    if need_hess:
        for a in range(d):
            for b in range(d):
                hess[a, b] = c * g * (2.0 - 4.0 * u * u / (sig * sig)) * x[a] * x[b]
            hess[a, a] += c * g * u
    return v


@njit(cache=True)
def _rhs(y, k, d, tangent, pot_id, par, hpp_s, hxx_scale, mass, grad, hess):
    v = _pot_eval(pot_id, par, y[:d], grad, hess, d, tangent)
    kin = 0.0 + 0.0j
    for a in range(d):
        k[a] = y[d + a] / mass
        k[d + a] = -grad[a]
        kin += y[d + a] * y[d + a]
    kin /= 2.0 * mass
    if tangent:
        # block offsets in the packed state
        oxx = 2 * d
        oxp = oxx + d * d
        opx = oxp + d * d
        opp = opx + d * d
        for r in range(d):
            for c in range(d):
                k[oxx + r * d + c] = hpp_s[r] * y[opx + r * d + c]
                k[oxp + r * d + c] = hpp_s[r] * y[opp + r * d + c]
                sxx = 0.0 + 0.0j
                sxp = 0.0 + 0.0j
                for m in range(d):
                    hs = hxx_scale[r, m] * hess[r, m]
                    sxx += hs * y[oxx + m * d + c]
                    sxp += hs * y[oxp + m * d + c]
                k[opx + r * d + c] = -sxx
                k[opp + r * d + c] = -sxp
    k[y.shape[0] - 1] = kin - v


@njit(cache=True)
def _det_z(y, d):
    oxx = 2 * d
    oxp = oxx + d * d
    if d == 1:
        return y[oxx] + 1j * y[oxp]
    z00 = y[oxx + 0] + 1j * y[oxp + 0]
    z01 = y[oxx + 1] + 1j * y[oxp + 1]
    z10 = y[oxx + 2] + 1j * y[oxp + 2]
    z11 = y[oxx + 3] + 1j * y[oxp + 3]
    return z00 * z11 - z01 * z10


@njit(cache=True, parallel=True)
def _kernel(y, T, rtol, atol, max_step, max_steps, d, tangent,
            pot_id, par, hpp_s, hxx_scale, mass,
            branch_out, z_out, minabs_out, status_out):
    N, n = y.shape
    # Dormand-Prince coefficients
    a21 = 1.0 / 5.0
    a31, a32 = 3.0 / 40.0, 9.0 / 40.0
    a41, a42, a43 = 44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0
    a51, a52, a53, a54 = 19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0
    a61, a62, a63, a64, a65 = (9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0,
                               49.0 / 176.0, -5103.0 / 18656.0)
    b1, b3, b4, b5, b6 = 35.0 / 384.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0
    e1, e3, e4, e5, e6, e7 = (71.0 / 57600.0, -71.0 / 16695.0, 71.0 / 1920.0,
                              -17253.0 / 339200.0, 22.0 / 525.0, -1.0 / 40.0)
    branch_cap = 0.9 * math.pi
    h_floor = 1e-14 * max(T, 1.0)
    h_init = min(max_step, max(T, 1e-30) / 50.0)

    for i in prange(N):
        yl = y[i].copy()
        k1 = np.empty(n, np.complex128)
        k2 = np.empty(n, np.complex128)
        k3 = np.empty(n, np.complex128)
        k4 = np.empty(n, np.complex128)
        k5 = np.empty(n, np.complex128)
        k6 = np.empty(n, np.complex128)
        k7 = np.empty(n, np.complex128)
        yi = np.empty(n, np.complex128)
        grad = np.empty(d, np.complex128)
        hess = np.empty((d, d), np.complex128)

        t = 0.0
        h = h_init
        branch = 0.0
        if tangent:
            z_prev = _det_z(yl, d)
        else:
            z_prev = 1.0 + 0.0j
        minabs = abs(z_prev)
        status = STATUS_OK
        nsteps = 0

        while t < T * (1.0 - 1e-15):
            nsteps += 1
            if nsteps > max_steps:
                status = STATUS_MAX_STEPS
                break
            ha = min(h, T - t)

            _rhs(yl, k1, d, tangent, pot_id, par, hpp_s, hxx_scale, mass, grad, hess)
            for m in range(n):
                yi[m] = yl[m] + ha * (a21 * k1[m])
            _rhs(yi, k2, d, tangent, pot_id, par, hpp_s, hxx_scale, mass, grad, hess)
            for m in range(n):
                yi[m] = yl[m] + ha * (a31 * k1[m] + a32 * k2[m])
            _rhs(yi, k3, d, tangent, pot_id, par, hpp_s, hxx_scale, mass, grad, hess)
            for m in range(n):
                yi[m] = yl[m] + ha * (a41 * k1[m] + a42 * k2[m] + a43 * k3[m])
            _rhs(yi, k4, d, tangent, pot_id, par, hpp_s, hxx_scale, mass, grad, hess)
            for m in range(n):
                yi[m] = yl[m] + ha * (a51 * k1[m] + a52 * k2[m] + a53 * k3[m] + a54 * k4[m])
            _rhs(yi, k5, d, tangent, pot_id, par, hpp_s, hxx_scale, mass, grad, hess)
            for m in range(n):
                yi[m] = yl[m] + ha * (a61 * k1[m] + a62 * k2[m] + a63 * k3[m]
                                      + a64 * k4[m] + a65 * k5[m])
            _rhs(yi, k6, d, tangent, pot_id, par, hpp_s, hxx_scale, mass, grad, hess)
            for m in range(n):
                yi[m] = yl[m] + ha * (b1 * k1[m] + b3 * k3[m] + b4 * k4[m]
                                      + b5 * k5[m] + b6 * k6[m])
            _rhs(yi, k7, d, tangent, pot_id, par, hpp_s, hxx_scale, mass, grad, hess)

            err_norm = 0.0
            for m in range(n):
                em = ha * (e1 * k1[m] + e3 * k3[m] + e4 * k4[m]
                           + e5 * k5[m] + e6 * k6[m] + e7 * k7[m])
                sc = atol + rtol * max(abs(yl[m]), abs(yi[m]))
                r = abs(em) / sc
                if r > err_norm or not math.isfinite(r):
                    err_norm = r if math.isfinite(r) else 1e308

            branch_ok = True
            dphi = 0.0
            z_new = z_prev
            if tangent:
                z_new = _det_z(yi, d)
                zr = z_new / z_prev
                dphi = math.atan2(zr.imag, zr.real)
                if not (math.isfinite(dphi) and abs(dphi) < branch_cap):
                    branch_ok = False

            accept = err_norm <= 1.0 and branch_ok
            if accept:
                for m in range(n):
                    yl[m] = yi[m]
                t += ha
                branch += 0.5 * dphi
                z_prev = z_new
                az = abs(z_new)
                if az < minabs:
                    minabs = az

            if err_norm > 0.0:
                factor = 0.9 * err_norm ** -0.2
            else:
                factor = 5.0
            if not math.isfinite(factor):
                factor = 0.1
            factor = min(max(factor, 0.1), 5.0)
            if not accept:
                factor = min(factor, 0.9)
            if not branch_ok:
                factor = 0.5
            h = min(ha * factor, max_step)
            if h < h_floor and t < T * (1.0 - 1e-15):
                status = STATUS_UNDERFLOW
                break

        y[i] = yl
        branch_out[i] = branch
        z_out[i] = z_prev
        minabs_out[i] = minabs
        status_out[i] = status


_POT_IDS = {
    "free": POT_FREE,
    "harmonic": POT_HARMONIC,
    "gaussian_well": POT_GAUSSIAN_WELL,
    "quartic": POT_QUARTIC,
    "ridge": POT_RIDGE,
}


def kernel_params(potential, d):
    """(pot_id, parameter vector) for kernels, or None when unsupported."""
    tag = getattr(potential, "tag", None)
    if tag not in _POT_IDS or d > 2:
        return None
    if tag == "free":
        par = np.zeros(1)
    elif tag == "harmonic":
        w = np.atleast_1d(np.asarray(potential.omega, float))
        if w.size == 1:
            w = np.full(d, float(w[0]))
        par = (w ** 2).astype(float)
    elif tag == "gaussian_well":
        par = np.array([potential.depth], float)
    elif tag == "quartic":
        par = np.array([potential.a, potential.b_q], float)
    else:
        par = np.array([potential.v0, potential.r0, potential.sigma], float)
    return _POT_IDS[tag], par


def run_kernel(y, T, settings, d, tangent, pot_id, par, hpp_s, hxx_scale, mass):
    N = y.shape[0]
    branch = np.zeros(N)
    z = np.ones(N, complex)
    minabs = np.ones(N)
    status = np.zeros(N, np.int8)
    _kernel(y, float(T), settings.rel_tol, settings.abs_tol, settings.max_step,
            settings.max_steps, d, tangent, pot_id, par,
            np.asarray(hpp_s, float), np.asarray(hxx_scale, float), float(mass),
            branch, z, minabs, status)
    return branch, z, minabs, status
