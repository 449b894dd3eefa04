"""Trajectory integration: complex Hamilton equations, the scaled
tangent-matrix ODE, action accumulation and prefactor branch tracking.

Everything is formulated for batches of independent trajectories: the state
of each trajectory is packed into a flat vector

    y = [x (d), p (d), Mxx (d^2), Mxp (d^2), Mpx (d^2), Mpp (d^2), S (1)]

and an adaptive Dormand-Prince 5(4) pair steps all batch members with
individual step sizes.  The tangent blocks live in uncertainty-scaled
variables x~ = B^-1 x, p~ = C^-1 p, so M(0) = identity and the scaled flow
is exactly symplectic.

The hard-wall billiard (free flight + specular reflection from a circle)
is handled analytically at the end of the module.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _fastint
from .core import ComplexPhasePoint, ComplexTrajectory, TangentMatrix, WavepacketParams

STATUS_OK = 0
STATUS_UNDERFLOW = 1
STATUS_MAX_STEPS = 2
STATUS_ENERGY_DRIFT = 3

_STATUS_NAMES = {
    STATUS_OK: "ok",
    STATUS_UNDERFLOW: "step-size underflow",
    STATUS_MAX_STEPS: "step budget exhausted",
    STATUS_ENERGY_DRIFT: "energy drift beyond tolerance",
}


class IntegrationError(RuntimeError):
    pass


class StepUnderflowError(IntegrationError):
    """Step size collapsed (typically a singularity of the continued flow)."""

    def __init__(self, t, x, p):
        super().__init__(f"step-size underflow at t = {t:.6g}")
        self.t = t
        self.last_x = x
        self.last_p = p


class EnergyDriftError(IntegrationError):
    pass


@dataclass(frozen=True)
class IntegratorSettings:
    """Adaptive embedded Runge-Kutta 5(4) controls."""

    rel_tol: float = 1e-10
    abs_tol: float = 1e-12
    max_step: float = 0.1
    scheme: str = "rk45"
    max_steps: int = 200_000

    def __post_init__(self):
        for name in ("rel_tol", "abs_tol"):
            v = getattr(self, name)
            if not (0.0 < v <= 1e-2):
                raise ValueError(f"{name} must lie in (0, 1e-2]")
        if self.max_step <= 0:
            raise ValueError("max_step must be positive")
        if self.scheme != "rk45":
            raise ValueError(f"unknown scheme '{self.scheme}'")


# Dormand-Prince 5(4) tableau.
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_ERR = np.array([
    71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40,
])

_BRANCH_CAP = 0.9 * np.pi  # reject steps rotating det(Mxx + i Mxp) by more


def tangent_rhs(mxx, mxp, mpx, mpp, hxx_s, hpp_s, hpx_s=None):
    """Right-hand side of the scaled tangent ODE.

    dM/dt = [[ B^-1 Hpx B,  B^-1 Hpp C],
             [-C^-1 Hxx B, -C^-1 Hxp C]] . M

    ``hxx_s`` is C^-1 Hxx B (full matrix, shape (..., d, d)), ``hpp_s`` the
    diagonal of B^-1 Hpp C (shape (d,) or (..., d)), ``hpx_s`` the full
    B^-1 Hpx B cross block or None when the Hamiltonian has no
    position-momentum coupling (then C^-1 Hxp C = hpx_s^T is skipped too).
    """
    dmxx = hpp_s[..., :, None] * mpx
    dmxp = hpp_s[..., :, None] * mpp
    dmpx = -hxx_s @ mxx
    dmpp = -hxx_s @ mxp
    if hpx_s is not None:
        hxp_s = np.swapaxes(hpx_s, -1, -2)
        dmxx = dmxx + hpx_s @ mxx
        dmxp = dmxp + hpx_s @ mxp
        dmpx = dmpx - hxp_s @ mpx
        dmpp = dmpp - hxp_s @ mpp
    return dmxx, dmxp, dmpx, dmpp


class _HamiltonianSystem:
    """Packs/unpacks the batched state and evaluates the flow derivative.

    ``tangent=False`` integrates only (x, p, S) — 2d+1 components — for root
    searches where the tangent blocks are not needed every iteration.
    """

    def __init__(self, potential, params: WavepacketParams, mass: float, dtype,
                 tangent: bool = True):
        self.potential = potential
        self.mass = float(mass)
        self.d = params.d
        self.dtype = dtype
        self.tangent = tangent
        b = params.b
        hbar = params.hbar
        self.hpp_s = (hbar / (self.mass * b ** 2))          # diag of B^-1 Hpp C
        self.hxx_scale = np.outer(b, b) / hbar              # C^-1 Hxx B = scale * Hxx
        self.n = 2 * self.d + (4 * self.d ** 2 if tangent else 0) + 1

    def pack_phase(self, y, x, p, s):
        d = self.d
        y[:, :d] = x
        y[:, d:2 * d] = p
        y[:, -1] = s
        return y

    def unpack(self, y):
        d = self.d
        N = y.shape[0]
        x = y[:, :d]
        p = y[:, d:2 * d]
        if not self.tangent:
            return x, p, None, None, None, None, y[:, -1]
        blocks = []
        k = 2 * d
        for _ in range(4):
            blocks.append(y[:, k:k + d * d].reshape(N, d, d))
            k += d * d
        return (x, p, *blocks, y[:, -1])

    def rhs(self, y, out=None):
        d = self.d
        x, p, mxx, mxp, mpx, mpp, _ = self.unpack(y)
        if out is None:
            out = np.empty_like(y)
        if self.tangent:
            v, grad, hess = self.potential.value_grad_hess(x)
            dmxx, dmxp, dmpx, dmpp = tangent_rhs(
                mxx, mxp, mpx, mpp, self.hxx_scale * hess, self.hpp_s
            )
            N = y.shape[0]
            k = 2 * d
            for blk in (dmxx, dmxp, dmpx, dmpp):
                out[:, k:k + d * d] = blk.reshape(N, d * d)
                k += d * d
        else:
            v, grad = self.potential.value_grad(x)
        kin = np.sum(p ** 2, axis=-1) / (2.0 * self.mass)
        return self.pack_phase(out, p / self.mass, -grad, kin - v)

    def energy(self, y):
        d = self.d
        x = y[:, :d]
        p = y[:, d:2 * d]
        return np.sum(p ** 2, axis=-1) / (2.0 * self.mass) + self.potential.value(x)

    def det_z(self, y):
        if not self.tangent:
            return np.ones(y.shape[0], complex)
        d = self.d
        k = 2 * d
        mxx = y[:, k:k + d * d].reshape(-1, d, d)
        mxp = y[:, k + d * d:k + 2 * d * d].reshape(-1, d, d)
        return np.linalg.det(mxx + 1j * mxp)


@dataclass
class BatchResult:
    """Final states of a batch integration (no sample storage)."""

    x: np.ndarray
    p: np.ndarray
    mxx: np.ndarray
    mxp: np.ndarray
    mpx: np.ndarray
    mpp: np.ndarray
    action: np.ndarray
    branch_phase: np.ndarray
    det_z: np.ndarray
    min_abs_det_z: np.ndarray
    energy0: np.ndarray
    energy_final: np.ndarray
    status: np.ndarray
    n_steps: int = 0

    @property
    def ok(self):
        return self.status == STATUS_OK

    def z_matrix(self):
        return self.mxx + 1j * self.mxp

    def sqrt_det_z(self):
        return np.sqrt(np.abs(self.det_z)) * np.exp(1j * self.branch_phase)


def _run_adaptive(sys_, y, T, settings, record=None):
    """Core adaptive loop over one (possibly compacted) batch.

    Works on full arrays with accept masks — no fancy-indexed stage storage.
    Finished or failed members keep stepping cost until the batch is
    compacted by the caller; returns per-trajectory final states,
    branch phases, determinant trackers, loop count and status codes.
    """
    N, n = y.shape
    T = float(T)
    t = np.zeros(N)
    h = np.full(N, min(settings.max_step, max(T, 1e-30) / 50.0))
    status = np.full(N, STATUS_OK, dtype=np.int8)
    done = np.zeros(N, dtype=bool)
    branch = np.zeros(N)
    z_prev = sys_.det_z(y)
    min_absz = np.abs(z_prev)
    if T == 0.0:
        done[:] = True

    h_floor = 1e-14 * max(T, 1.0)
    ks = [np.empty_like(y) for _ in range(7)]
    yi = np.empty_like(y)
    n_loops = 0

    while not np.all(done) and n_loops < settings.max_steps:
        n_loops += 1
        ha = np.minimum(h, T - t)
        ha_col = ha[:, None]

        sys_.rhs(y, out=ks[0])
        for i in range(1, 7):
            np.copyto(yi, y)
            for j, aij in enumerate(_DP_A[i]):
                if aij != 0.0:
                    yi += (aij * ha_col) * ks[j]
            sys_.rhs(yi, out=ks[i])
        # yi now holds the 5th-order solution (last stage row equals b5)
        y5 = yi
        err = (ha_col * _DP_ERR[0]) * ks[0]
        for j in range(2, 7):
            err += (ha_col * _DP_ERR[j]) * ks[j]

        scale = settings.abs_tol + settings.rel_tol * np.maximum(np.abs(y), np.abs(y5))
        with np.errstate(invalid="ignore", divide="ignore"):
            err_norm = np.max(np.abs(err) / scale, axis=1)
        err_norm = np.where(np.isfinite(err_norm), err_norm, np.inf)

        if sys_.tangent:
            z_new = sys_.det_z(y5)
            with np.errstate(invalid="ignore", divide="ignore"):
                dphi = np.angle(z_new / z_prev)
            branch_ok = np.isfinite(dphi) & (np.abs(dphi) < _BRANCH_CAP)
        else:
            z_new = z_prev
            dphi = np.zeros(N)
            branch_ok = np.ones(N, dtype=bool)

        accept = (err_norm <= 1.0) & branch_ok & ~done

        if np.any(accept):
            acc_col = accept[:, None]
            np.copyto(y, y5, where=acc_col)
            t = np.where(accept, t + ha, t)
            branch = np.where(accept, branch + 0.5 * dphi, branch)
            z_prev = np.where(accept, z_new, z_prev)
            min_absz = np.where(accept, np.minimum(min_absz, np.abs(z_new)), min_absz)
            done |= accept & (t >= T * (1.0 - 1e-15))
            if record is not None and N == 1 and accept[0]:
                record(t[0], y[0], sys_)

        with np.errstate(divide="ignore", over="ignore"):
            factor = 0.9 * err_norm ** -0.2
        factor = np.where(np.isfinite(factor), factor, 0.1)
        factor = np.clip(factor, 0.1, 5.0)
        factor = np.where(accept, factor, np.minimum(factor, 0.9))
        factor = np.where(branch_ok, factor, 0.5)
        h = np.where(done, h, np.minimum(ha * factor, settings.max_step))

        dead = (h < h_floor) & ~done
        if np.any(dead):
            status[dead] = STATUS_UNDERFLOW
            done |= dead

    hung = ~done
    if np.any(hung):
        status[hung] = STATUS_MAX_STEPS
    return y, branch, z_prev, min_absz, status, n_loops


def integrate_batch(x0, p0, T, potential, params: WavepacketParams,
                    settings: IntegratorSettings | None = None,
                    mass: float = 1.0, dtype=complex, tangent: bool = True,
                    record=None) -> BatchResult:
    """Propagate a batch of trajectories from t=0 to t=T.

    x0, p0: (N, d) initial conditions (complex, or real with dtype=float).
    ``tangent=False`` integrates phase space and action only (cheap mode for
    root-search iterations); the returned tangent blocks are then None.
    Failures never raise here; they are reported per-trajectory in
    ``status``.  ``record`` is honored for single-trajectory batches only.
    """
    settings = settings or IntegratorSettings()
    use_kernel = False
    if _fastint.HAVE_NUMBA and record is None:
        kp = _fastint.kernel_params(potential, params.d)
        if kp is not None:
            use_kernel = True
            dtype = complex
    sys_ = _HamiltonianSystem(potential, params, mass, dtype, tangent=tangent)
    d = sys_.d
    x0 = np.asarray(x0, dtype).reshape(-1, d)
    p0 = np.asarray(p0, dtype).reshape(-1, d)
    N = x0.shape[0]
    y = np.zeros((N, sys_.n), dtype=dtype)
    y[:, :d] = x0
    y[:, d:2 * d] = p0
    if tangent:
        k = 2 * d
        idx = np.arange(d)
        y[:, k:k + d * d].reshape(N, d, d)[:, idx, idx] = 1.0          # Mxx
        y[:, k + 3 * d * d:k + 4 * d * d].reshape(N, d, d)[:, idx, idx] = 1.0  # Mpp

    energy0 = sys_.energy(y)
    if use_kernel and T > 0.0:
        pot_id, par = kp
        branch, z_fin, min_absz, status = _fastint.run_kernel(
            y, T, settings, d, tangent, pot_id, par, sys_.hpp_s,
            sys_.hxx_scale, mass)
        n_loops = 0
    else:
        y, branch, z_fin, min_absz, status, n_loops = _run_adaptive(
            sys_, y, T, settings, record=record)

    x, p, mxx, mxp, mpx, mpp, s = sys_.unpack(y)
    energy_final = sys_.energy(y)
    drift = np.abs(energy_final - energy0) > 100.0 * settings.rel_tol * np.maximum(
        1.0, np.abs(energy0))
    status = np.where((status == STATUS_OK) & drift, STATUS_ENERGY_DRIFT, status)

    return BatchResult(
        x=x, p=p, mxx=mxx, mxp=mxp, mpx=mpx, mpp=mpp,
        action=s, branch_phase=branch, det_z=z_fin,
        min_abs_det_z=min_absz, energy0=energy0, energy_final=energy_final,
        status=status, n_steps=n_loops,
    )


def evolve(start: ComplexPhasePoint, T: float, potential,
           params: WavepacketParams, settings: IntegratorSettings | None = None,
           mass: float = 1.0) -> ComplexTrajectory:
    """Integrate one complex trajectory, keeping time samples.

    Raises StepUnderflowError (with the last good state) when the continued
    flow hits a singularity, EnergyDriftError when |H(T)-H(0)| exceeds
    100 x rel_tol.
    """
    if T < 0:
        raise ValueError("propagation time must be non-negative")
    samples = [(0.0, start.x.copy(), start.p.copy())]
    energies = []

    def record(t, yrow, sys_):
        d = sys_.d
        samples.append((float(t), yrow[:d].copy(), yrow[d:2 * d].copy()))
        energies.append(complex(sys_.energy(yrow[None, :])[0]))

    res = integrate_batch(start.x[None, :], start.p[None, :], T, potential,
                          params, settings, mass=mass, record=record)
    st = int(res.status[0])
    if st == STATUS_UNDERFLOW:
        k = len(samples) - 1
        raise StepUnderflowError(samples[k][0], samples[k][1], samples[k][2])
    if st in (STATUS_MAX_STEPS, STATUS_ENERGY_DRIFT):
        drift = abs(res.energy_final[0] - res.energy0[0])
        raise EnergyDriftError(
            f"integration failed ({_STATUS_NAMES[st]}); energy drift {drift:.3e}")

    ts = np.array([s[0] for s in samples])
    xs = np.array([s[1] for s in samples])
    ps = np.array([s[2] for s in samples])
    tangent = TangentMatrix(res.mxx[0], res.mxp[0], res.mpx[0], res.mpp[0])
    e0 = complex(res.energy0[0])
    return ComplexTrajectory(
        ts=ts, xs=xs, ps=ps, action=complex(res.action[0]), tangent=tangent,
        branch_phase=float(res.branch_phase[0]), energy=e0,
        energies=np.concatenate([[e0], np.array(energies, complex)]) if energies
        else np.array([e0]),
        min_abs_det_z=float(res.min_abs_det_z[0]),
    )


# ---------------------------------------------------------------------------
# analytic circular billiard
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BilliardTrajectory:
    """Center-launched hard-wall trajectory with composed tangent blocks.

    The tangent matrix is composed from free-flight blocks and the
    linearized specular-reflection map at each radial wall hit; every
    reflection flips the sign of det(Mxx + i Mxp) (tracked as a +pi jump of
    the determinant phase) and contributes one Maslov count.
    """

    direction: np.ndarray
    speed: float
    time: float
    radius: float
    bounce_times: tuple
    segments: tuple          # (t0, t1, start position, velocity) per leg
    action: float
    tangent: TangentMatrix
    branch_phase: float
    bounce_count: int
    final_x: np.ndarray
    final_p: np.ndarray

    @property
    def maslov_count(self) -> int:
        return self.bounce_count

    def sqrt_det_z(self) -> complex:
        return complex(np.sqrt(abs(self.tangent.det_z())) * np.exp(1j * self.branch_phase))


def _compose_component(mats):
    out = np.eye(2)
    for m in mats:
        out = m @ out
    return out


def _free_block(tau):
    return np.array([[1.0, tau], [0.0, 1.0]])


def _branch_phase_track(seg_mats_n, seg_mats_t, taus, n_samples=64):
    """Unwrapped arg of det(Mxx + i Mxp) along the composed path.

    Within each free-flight leg the two decoupled components evolve linearly
    in the scaled time tau; each bounce multiplies the determinant by -1
    exactly (a +pi phase jump by convention).
    """
    phase = 0.0
    cur_n = np.eye(2)
    cur_t = np.eye(2)
    z_prev = 1.0 + 0.0j

    def z_of(mn, mt):
        zn = mn[0, 0] + 1j * mn[0, 1]
        zt = mt[0, 0] + 1j * mt[0, 1]
        return zn * zt

    for leg, tau in enumerate(taus):
        for s in np.linspace(0.0, tau, n_samples)[1:]:
            f = _free_block(s)
            z = z_of(f @ cur_n, f @ cur_t)
            phase += np.angle(z / z_prev)
            z_prev = z
        cur_n = _free_block(tau) @ cur_n
        cur_t = _free_block(tau) @ cur_t
        if leg < len(seg_mats_n):
            cur_n = seg_mats_n[leg] @ cur_n
            cur_t = seg_mats_t[leg] @ cur_t
            phase += np.pi          # determinant sign flip at the wall
            z_prev = -z_prev
    return 0.5 * phase


def evolve_billiard(direction, speed, T, radius, max_bounces,
                    params: WavepacketParams | None = None,
                    mass: float = 1.0):
    """Follow a launch from the billiard center and compose its tangent map.

    Returns the (single) physical trajectory in a list; raises when its
    bounce count would exceed ``max_bounces``.  The launch point is the
    center, the only case treated analytically.
    """
    if T <= 0:
        raise ValueError("propagation time must be positive")
    if speed <= 0:
        raise ValueError("speed must be positive")
    direction = np.asarray(direction, float)
    direction = direction / np.linalg.norm(direction)
    params = params or WavepacketParams(q=[0.0, 0.0], p=[0.0, 0.0], b=[1.0, 1.0])
    if not np.allclose(params.b, params.b[0]):
        raise ValueError("billiard tangent map requires isotropic widths")
    b = float(params.b[0])
    hbar = params.hbar

    # wall-hit times for a radial launch: (2k-1) R / v
    bounce_times = []
    k = 1
    while (2 * k - 1) * radius / speed < T:
        bounce_times.append((2 * k - 1) * radius / speed)
        k += 1
        if len(bounce_times) > max_bounces:
            raise ValueError(
                f"trajectory has more than max_bounces={max_bounces} reflections")
    nb = len(bounce_times)

    # piecewise-linear path along the launch axis
    segments = []
    sgn = 1.0
    pos = np.zeros(2)
    t0 = 0.0
    for tb in bounce_times:
        segments.append((t0, tb, pos.copy(), sgn * speed * direction))
        pos = pos + sgn * speed * direction * (tb - t0)
        sgn = -sgn
        t0 = tb
    segments.append((t0, T, pos.copy(), sgn * speed * direction))
    final_x = pos + sgn * speed * direction * (T - t0)
    final_p = mass * sgn * speed * direction

    # scaled tangent map: decoupled radial (n) and transverse (t) components
    tau_rate = hbar / (mass * b ** 2)
    durations = np.diff([0.0] + bounce_times + [T])
    taus = durations * tau_rate
    kick = 2.0 * mass * speed * b ** 2 / (hbar * radius)
    bounce_n = np.array([[-1.0, 0.0], [0.0, -1.0]])
    bounce_t = np.array([[1.0, 0.0], [-kick, 1.0]])

    mats_n, mats_t = [], []
    for i, tau in enumerate(taus):
        mats_n.append(_free_block(tau))
        mats_t.append(_free_block(tau))
        if i < nb:
            mats_n.append(bounce_n)
            mats_t.append(bounce_t)
    mn = _compose_component(mats_n)
    mt = _compose_component(mats_t)

    pn = np.outer(direction, direction)
    pt = np.eye(2) - pn
    tangent = TangentMatrix(
        mxx=mn[0, 0] * pn + mt[0, 0] * pt,
        mxp=mn[0, 1] * pn + mt[0, 1] * pt,
        mpx=mn[1, 0] * pn + mt[1, 0] * pt,
        mpp=mn[1, 1] * pn + mt[1, 1] * pt,
    )
    branch = _branch_phase_track([bounce_n] * nb, [bounce_t] * nb, taus)

    traj = BilliardTrajectory(
        direction=direction, speed=float(speed), time=float(T),
        radius=float(radius), bounce_times=tuple(bounce_times),
        segments=tuple(segments), action=0.5 * mass * speed ** 2 * T,
        tangent=tangent, branch_phase=float(branch), bounce_count=nb,
        final_x=final_x, final_p=final_p,
    )
    return [traj]
