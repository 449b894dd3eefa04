"""Boundary-value trajectory selection.

Two problem classes share one damped-Newton engine:

* the complex root search omega -> q(T) = x, whose initial condition
  q(0) = q + omega, p(0) = p + i C B^-1 omega encodes the coherent-state
  boundary condition for any omega, and
* real searches with partially fixed initial data (initial momentum free,
  initial position free, or one of each in 2D).

Every unknown enters the initial condition affinely, so the Newton
Jacobian is read off the tangent blocks of the current iterate:
dq(T)/du = B (Mxx B^-1 Ex + Mxp C^-1 Ep) for x(0) = base_x + Ex u,
p(0) = base_p + Ep u.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ComplexPhasePoint, ComplexTrajectory, WavepacketParams
from .dynamics import IntegratorSettings, evolve, integrate_batch
from .potentials import Billiard, is_smooth
from . import dynamics


class ShootingError(RuntimeError):
    pass


class NonConvergenceError(ShootingError):
    def __init__(self, residual):
        super().__init__(f"root search did not converge (best residual {residual:.3e})")
        self.best_residual = residual


class CausticError(ShootingError):
    """Newton Jacobian (numerically) singular: a phase-space caustic."""


@dataclass(frozen=True)
class ShootingSettings:
    """Root-search controls (tolerances in scaled position units)."""

    shoot_tol: float = 1e-8
    max_evals: int = 60            # integration passes incl. damped retries
    max_halvings: int = 8
    caustic_tol: float = 1e-4
    dedupe_factor: float = 10.0    # roots within factor*shoot_tol coincide
    seed_box: float = 2.0          # complex seeds span [-box*b, box*b]^2d
    seed_points: int = 5
    real_seed_span: float = 4.0    # real seeds span +- span * quantum width
    real_seed_points: int = 5
    coarse_stride: int = 8
    branch_match_tol: float = 0.75
    flood_rounds: int = 24
    integrator: IntegratorSettings = field(default_factory=IntegratorSettings)


# ---------------------------------------------------------------------------
# problem adapters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Problem:
    """Affine map u -> initial conditions, plus Jacobian/caustic extraction."""

    ex: np.ndarray               # dx(0)/du, (d, d)
    ep: np.ndarray               # dp(0)/du, (d, d)
    base_x: np.ndarray           # (d,) or (N, d)
    base_p: np.ndarray
    real: bool                   # unknowns (and trajectories) real-valued
    caustic_kind: str            # which block determinant detects a caustic

    def initial_conditions(self, u):
        x0 = self.base_x + u @ self.ex.T
        p0 = self.base_p + u @ self.ep.T
        return x0, p0

    def jacobian(self, mxx, mxp, params):
        b = params.b
        c = params.c
        inner = mxx @ (self.ex / b[:, None]) + mxp @ (self.ep / c[:, None])
        return b[:, None] * inner

    def caustic_metric(self, mxx, mxp):
        if self.caustic_kind == "z":
            return np.abs(np.linalg.det(mxx + 1j * mxp))
        if self.caustic_kind == "mxp":
            return np.abs(np.linalg.det(mxp))
        if self.caustic_kind == "mxx":
            return np.abs(np.linalg.det(mxx))
        # mixed: free p_x column from Mxp, free q_y column from Mxx
        k = np.stack([mxp[..., :, 0], mxx[..., :, 1]], axis=-1)
        return np.abs(np.linalg.det(k))


def _omega_problem(params: WavepacketParams) -> _Problem:
    d = params.d
    cb = params.c / params.b                      # C B^-1 diagonal
    return _Problem(
        ex=np.eye(d, dtype=complex),
        ep=1j * np.diag(cb).astype(complex),
        base_x=params.q.astype(complex),
        base_p=params.p.astype(complex),
        real=False,
        caustic_kind="z",
    )


def _p_shoot_problem(x0_fixed, params: WavepacketParams) -> _Problem:
    d = params.d
    return _Problem(
        ex=np.zeros((d, d), complex),
        ep=np.eye(d, dtype=complex),
        base_x=np.asarray(x0_fixed, complex),
        base_p=np.zeros(d, complex),
        real=False,
        caustic_kind="mxp",
    )


def _real_problem(kind: str, params: WavepacketParams) -> _Problem:
    d = params.d
    if kind == "qtox":
        ex = np.zeros((d, d))
        ep = np.eye(d)
        base_x, base_p = params.q.copy(), np.zeros(d)
        caustic = "mxp"
    elif kind == "ptox":
        ex = np.eye(d)
        ep = np.zeros((d, d))
        base_x, base_p = np.zeros(d), params.p.copy()
        caustic = "mxx"
    elif kind == "mixed":
        if d != 2:
            raise ValueError("mixed boundary conditions require d = 2")
        # unknown u = (p_xi, q_yi); fixed (q_x, p_y)
        ex = np.array([[0.0, 0.0], [0.0, 1.0]])
        ep = np.array([[1.0, 0.0], [0.0, 0.0]])
        base_x = np.array([params.q[0], 0.0])
        base_p = np.array([0.0, params.p[1]])
        caustic = "mixed"
    else:
        raise ValueError(f"unknown real root kind '{kind}'")
    return _Problem(ex=ex, ep=ep, base_x=base_x, base_p=base_p,
                    real=True, caustic_kind=caustic)


# ---------------------------------------------------------------------------
# batched damped Newton
# ---------------------------------------------------------------------------

@dataclass
class NewtonBatchResult:
    u: np.ndarray                # (N, d) unknowns at exit
    x0: np.ndarray
    p0: np.ndarray
    xt: np.ndarray               # (N, d) final positions
    action: np.ndarray           # (N,) complex
    mxx: np.ndarray              # (N, d, d)
    mxp: np.ndarray
    det_z: np.ndarray            # (N,) complex
    branch_phase: np.ndarray
    residual: np.ndarray         # scaled final-position residual norm
    converged: np.ndarray        # (N,) bool
    caustic: np.ndarray          # (N,) bool (Jacobian collapse during search)
    n_evals: int = 0


def _scaled_norm(r, b):
    return np.sqrt(np.sum(np.abs(r / b) ** 2, axis=-1))


def newton_batch(targets, seeds, T, potential, params, problem: _Problem,
                 settings: ShootingSettings, mass: float = 1.0) -> NewtonBatchResult:
    """Damped Newton over a batch of boundary-value problems.

    ``targets``: (N, d) real final positions; ``seeds``: (N, d) unknowns.
    A full step is taken each round; points whose scaled residual did not
    decrease rewind and halve (up to max_halvings).  Converged points exit
    with the tangent data of the accepting integration.
    """
    d = params.d
    targets = np.asarray(targets, float).reshape(-1, d)
    N = targets.shape[0]
    dt_u = float if problem.real else complex
    u_eval = np.asarray(seeds, dt_u).reshape(-1, d).copy()

    out = NewtonBatchResult(
        u=np.zeros((N, d), dt_u), x0=np.zeros((N, d), dt_u),
        p0=np.zeros((N, d), dt_u),
        xt=np.zeros((N, d), complex), action=np.zeros(N, complex),
        mxx=np.zeros((N, d, d), complex), mxp=np.zeros((N, d, d), complex),
        det_z=np.zeros(N, complex), branch_phase=np.zeros(N),
        residual=np.full(N, np.inf),
        converged=np.zeros(N, bool), caustic=np.zeros(N, bool),
    )

    idx = np.arange(N)                     # active -> original indices
    base_u = u_eval.copy()
    base_rn = np.full(N, np.inf)
    delta = np.zeros_like(u_eval)
    scale = np.ones(N)
    halvings = np.zeros(N, int)

    for _ in range(settings.max_evals):
        if idx.size == 0:
            break
        out.n_evals += 1
        x0, p0 = problem.initial_conditions(u_eval)
        res = integrate_batch(x0, p0, T, potential, params,
                              settings=settings.integrator, mass=mass)
        r = res.x - targets[idx]
        rn = _scaled_norm(r, params.b)
        usable = res.ok | (res.status == dynamics.STATUS_ENERGY_DRIFT)
        rn = np.where(usable & np.isfinite(rn), rn, np.inf)

        improved = rn < base_rn
        conv = improved & (rn < settings.shoot_tol)

        # store data for converged points
        if np.any(conv):
            g = idx[conv]
            out.u[g] = u_eval[conv]
            out.x0[g] = x0[conv] if not problem.real else x0[conv].real
            out.p0[g] = p0[conv] if not problem.real else p0[conv].real
            out.xt[g] = res.x[conv]
            out.action[g] = res.action[conv]
            out.mxx[g] = res.mxx[conv]
            out.mxp[g] = res.mxp[conv]
            out.det_z[g] = res.det_z[conv]
            out.branch_phase[g] = res.branch_phase[conv]
            out.residual[g] = rn[conv]
            out.converged[g] = True

        # Newton step for improved-but-not-converged points
        step = improved & ~conv
        caustic_now = np.zeros(idx.size, bool)
        if np.any(step):
            jac = problem.jacobian(res.mxx[step], res.mxp[step], params)
            metric = problem.caustic_metric(res.mxx[step], res.mxp[step])
            bad = metric < settings.caustic_tol
            with np.errstate(all="ignore"):
                try:
                    dd = np.linalg.solve(jac, r[step][..., None])[..., 0]
                except np.linalg.LinAlgError:
                    dd = np.full_like(r[step], np.nan)
            sing = ~np.isfinite(dd).all(axis=1) | bad
            full = np.zeros(idx.size, bool)
            full[np.nonzero(step)[0][sing]] = True
            caustic_now |= full
            if problem.real:
                dd = dd.real
            base_u[step] = u_eval[step]
            base_rn[step] = rn[step]
            delta[step] = dd
            scale[step] = 1.0
            halvings[step] = 0

        # rewind-and-halve for points that got worse
        worse = ~improved
        first_eval_failed = worse & ~np.isfinite(base_rn) & ~np.isfinite(rn)
        halvings = np.where(worse, halvings + 1, halvings)
        exhausted = worse & (halvings > settings.max_halvings)
        failed = exhausted | first_eval_failed | caustic_now
        if np.any(failed):
            g = idx[failed]
            out.residual[g] = np.minimum(out.residual[g],
                                         np.where(np.isfinite(base_rn[failed]),
                                                  base_rn[failed], np.inf))
            out.caustic[g] = caustic_now[failed]

        keep = ~(conv | failed)
        if not np.all(keep):
            idx = idx[keep]
            base_u = base_u[keep]
            base_rn = base_rn[keep]
            delta = delta[keep]
            scale = scale[keep]
            halvings = halvings[keep]
            worse = worse[keep]
        scale = np.where(worse, scale * 0.5, scale)
        u_eval = base_u - scale[:, None] * delta

    if idx.size:
        out.residual[idx] = np.minimum(out.residual[idx], base_rn)
    return out


# ---------------------------------------------------------------------------
# single-point interfaces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ComplexRoot:
    """A converged solution of the complex boundary-value problem."""

    omega: np.ndarray
    trajectory: ComplexTrajectory
    family_id: int
    contributing: bool
    phi0: complex
    residual: float


@dataclass(frozen=True)
class RealRoot:
    """A converged real-trajectory root (q->x, p->x, or mixed)."""

    kind: str
    free_values: np.ndarray      # p_i (qtox), q_i (ptox), (p_xi, q_yi) (mixed)
    x0: np.ndarray
    p0: np.ndarray
    trajectory: object           # ComplexTrajectory (real data) or BilliardTrajectory
    maslov_count: int
    residual: float
    jac_metric: float            # caustic block determinant magnitude


def exponent_phi0(omega, action, params: WavepacketParams) -> complex:
    """Phi0 = S + p.omega + (i hbar / 2) omega.B^-2.omega at the saddle."""
    omega = np.asarray(omega, complex)
    quad = np.sum((omega / params.b) ** 2)
    return complex(action + params.p @ omega + 0.5j * params.hbar * quad)


def solve_complex(x, T, potential, params: WavepacketParams, seed_omega,
                  settings: ShootingSettings | None = None,
                  mass: float = 1.0, family_id: int = 0) -> ComplexRoot:
    """Newton solve of q(T; omega) = x from one seed."""
    settings = settings or ShootingSettings()
    if not is_smooth(potential):
        raise ShootingError("complex root search needs a smooth potential")
    prob = _omega_problem(params)
    res = newton_batch(np.asarray(x, float)[None, :],
                       np.asarray(seed_omega, complex)[None, :],
                       T, potential, params, prob, settings, mass)
    if not res.converged[0]:
        if res.caustic[0]:
            raise CausticError("Newton Jacobian singular: phase-space caustic")
        raise NonConvergenceError(float(res.residual[0]))
    omega = res.u[0]
    x0, p0 = prob.initial_conditions(omega[None, :])
    traj = evolve(ComplexPhasePoint(x0[0], p0[0]), T, potential, params,
                  settings.integrator, mass=mass)
    phi0 = exponent_phi0(omega, traj.action, params)
    return ComplexRoot(
        omega=omega, trajectory=traj, family_id=family_id,
        contributing=bool(phi0.imag >= -1e-12), phi0=phi0,
        residual=float(res.residual[0]),
    )


def solve_p_shoot_complex(x_target, x0_fixed, T, potential, params,
                          seed_p, settings: ShootingSettings | None = None,
                          mass: float = 1.0):
    """Fix the (complex) start position, shoot the complex momentum to a
    real final position.

    Returns (p0, trajectory).  Used by the finite-difference oracles that
    re-shoot neighboring trajectories of a complex root.
    """
    settings = settings or ShootingSettings()
    prob = _p_shoot_problem(x0_fixed, params)
    res = newton_batch(np.asarray(x_target, float)[None, :],
                       np.asarray(seed_p, complex)[None, :],
                       T, potential, params, prob, settings, mass)
    if not res.converged[0]:
        raise NonConvergenceError(float(res.residual[0]))
    p0 = res.u[0]
    traj = evolve(ComplexPhasePoint(np.asarray(x0_fixed, complex), p0), T,
                  potential, params, settings.integrator, mass=mass)
    return p0, traj


def enumerate_families(x, T, potential, params: WavepacketParams,
                       settings: ShootingSettings | None = None,
                       mass: float = 1.0, seed_box: float | None = None,
                       seed_points: int | None = None) -> list[ComplexRoot]:
    """Sweep a seed grid in omega-space and classify distinct roots.

    The root reached from the omega = 0 seed gets family id 0; remaining
    distinct roots are numbered by increasing |omega|.  Unconverged seeds
    are dropped (their count is available on the returned list as
    ``.n_failed`` via the DiagnosticsList wrapper).
    """
    settings = settings or ShootingSettings()
    box = settings.seed_box if seed_box is None else seed_box
    npts = settings.seed_points if seed_points is None else seed_points
    d = params.d
    axes = [np.linspace(-box * params.b[i % d], box * params.b[i % d], npts)
            for i in range(2 * d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    flat = [m.ravel() for m in mesh]
    seeds = np.stack([flat[i] + 1j * flat[d + i] for i in range(d)], axis=-1)

    prob = _omega_problem(params)
    targets = np.broadcast_to(np.asarray(x, float), seeds.shape[:1] + (d,))
    res = newton_batch(targets, seeds, T, potential, params, prob, settings, mass)

    tol = settings.dedupe_factor * settings.shoot_tol
    roots: list[np.ndarray] = []
    from_zero = None
    zero_seed = int(np.argmin(np.sum(np.abs(seeds) ** 2, axis=1)))
    for i in np.nonzero(res.converged)[0]:
        w = res.u[i]
        match = None
        for k, known in enumerate(roots):
            if np.linalg.norm(w - known) < tol:
                match = k
                break
        if match is None:
            roots.append(w)
            match = len(roots) - 1
        if i == zero_seed:
            from_zero = match

    order = sorted(range(len(roots)),
                   key=lambda k: (k != from_zero, float(np.linalg.norm(roots[k]))))
    out = DiagnosticsList()
    out.n_failed = int(np.sum(~res.converged))
    for fid, k in enumerate(order):
        out.append(solve_complex(x, T, potential, params, roots[k],
                                 settings, mass, family_id=fid))
    return out


class DiagnosticsList(list):
    n_failed: int = 0


def _real_seed_grid(kind, x, T, params, settings, mass):
    """Seed unknowns: sweep around the packet value plus a ballistic guess."""
    d = params.d
    span = settings.real_seed_span
    npts = settings.real_seed_points
    x = np.asarray(x, float)
    if kind == "qtox":
        center = params.p
        widths = params.c                  # momentum quantum widths
        guess = mass * (x - params.q) / T if T > 0 else params.p
    elif kind == "ptox":
        center = params.q
        widths = params.b
        guess = x - params.p * T / mass
    else:
        center = np.array([params.p[0], params.q[1]])
        widths = np.array([params.c[0], params.b[1]])
        guess = np.array([mass * (x[0] - params.q[0]) / T if T > 0 else params.p[0],
                          x[1] - params.p[1] * T / mass])
    offsets = [np.linspace(-span * w, span * w, npts) for w in widths]
    mesh = np.meshgrid(*offsets, indexing="ij")
    seeds = center + np.stack([m.ravel() for m in mesh], axis=-1)
    return np.vstack([seeds, guess[None, :]])


def _dedupe_roots(values, tol):
    """Indices of representatives among rows closer than tol."""
    keep = []
    for i, v in enumerate(values):
        if all(np.linalg.norm(v - values[j]) >= tol for j in keep):
            keep.append(i)
    return keep


def _solve_real_point(kind, x, T, potential, params, seeds, settings, mass):
    settings = settings or ShootingSettings()
    prob = _real_problem(kind, params)
    x = np.asarray(x, float)
    targets = np.broadcast_to(x, (seeds.shape[0], params.d))
    res = newton_batch(targets, seeds, T, potential, params, prob, settings, mass)
    good = np.nonzero(res.converged)[0]
    tol = settings.dedupe_factor * settings.shoot_tol
    reps = [good[i] for i in _dedupe_roots(res.u[good], tol)]
    out = []
    for i in reps:
        x0 = res.x0[i].real
        p0 = res.p0[i].real
        traj = evolve(ComplexPhasePoint(x0, p0), T, potential, params,
                      settings.integrator, mass=mass)
        metric = float(prob.caustic_metric(res.mxx[i], res.mxp[i]))
        if kind == "qtox":
            free = p0.copy()
        elif kind == "ptox":
            free = x0.copy()
        else:
            free = np.array([p0[0], x0[1]])
        out.append(RealRoot(kind=kind, free_values=free, x0=x0, p0=p0,
                            trajectory=traj, maslov_count=0,
                            residual=float(res.residual[i]), jac_metric=metric))
    return out


def solve_q_to_x(x, T, potential, params: WavepacketParams, seed_p=None,
                 settings: ShootingSettings | None = None,
                 mass: float = 1.0) -> list[RealRoot]:
    """Real roots with the initial position fixed at the packet center.

    For the hard-wall billiard the launches are constructed from chord
    geometry (direct and reflected paths from the center), each reflection
    contributing one Maslov count.
    """
    settings = settings or ShootingSettings()
    if isinstance(potential, Billiard):
        return billiard_q_to_x(x, T, potential, params, mass=mass)
    seeds = _real_seed_grid("qtox", x, T, params, settings, mass)
    if seed_p is not None:
        seeds = np.vstack([np.asarray(seed_p, float)[None, :], seeds])
    return _solve_real_point("qtox", x, T, potential, params, seeds, settings, mass)


def solve_p_to_x(x, T, potential, params: WavepacketParams, seed_q=None,
                 settings: ShootingSettings | None = None,
                 mass: float = 1.0) -> list[RealRoot]:
    """Real roots with the initial momentum fixed at the packet value."""
    settings = settings or ShootingSettings()
    seeds = _real_seed_grid("ptox", x, T, params, settings, mass)
    if seed_q is not None:
        seeds = np.vstack([np.asarray(seed_q, float)[None, :], seeds])
    return _solve_real_point("ptox", x, T, potential, params, seeds, settings, mass)


def solve_mixed(x, T, potential, params: WavepacketParams, seeds=None,
                settings: ShootingSettings | None = None,
                mass: float = 1.0) -> list[RealRoot]:
    """Real roots with mixed conditions: (q_x, p_y) fixed, (p_xi, q_yi) free."""
    settings = settings or ShootingSettings()
    grid = _real_seed_grid("mixed", x, T, params, settings, mass)
    if seeds is not None:
        grid = np.vstack([np.asarray(seeds, float).reshape(-1, 2), grid])
    return _solve_real_point("mixed", x, T, potential, params, grid, settings, mass)


def billiard_q_to_x(x, T, potential: Billiard, params: WavepacketParams,
                    mass: float = 1.0, max_bounces: int = 1) -> list[RealRoot]:
    """Chord-geometry roots from the billiard center to x.

    Bounce count k reaches x along a radial path of length
    |x| (k = 0) or 2kR - |x| (k >= 1, the shortest k-bounce chord).
    """
    x = np.asarray(x, float)
    r = float(np.linalg.norm(x))
    R = potential.radius
    if r >= R:
        return []
    direction = x / r if r > 1e-12 else np.array([1.0, 0.0])
    roots = []
    for k in range(max_bounces + 1):
        length = r if k == 0 else 2.0 * k * R - r
        if length <= 0.0:
            continue
        speed = length / T
        trajs = dynamics.evolve_billiard(direction, speed, T, R,
                                         max_bounces=max_bounces,
                                         params=params, mass=mass)
        traj = trajs[0]
        if traj.bounce_count != k:
            continue
        p0 = mass * speed * direction
        residual = float(np.linalg.norm((traj.final_x - x) / params.b))
        roots.append(RealRoot(
            kind="qtox", free_values=p0.copy(), x0=np.zeros(2), p0=p0,
            trajectory=traj, maslov_count=k, residual=residual,
            jac_metric=float(abs(np.linalg.det(traj.tangent.mxp))),
        ))
    return roots


# ---------------------------------------------------------------------------
# grid continuation drivers
# ---------------------------------------------------------------------------

@dataclass
class ComplexRootField:
    """Main-family complex roots over a whole grid."""

    grid: object
    T: float
    omega: np.ndarray          # (nx, ny, d) complex
    action: np.ndarray         # (nx, ny) complex
    det_z: np.ndarray          # (nx, ny) complex
    branch_phase: np.ndarray   # (nx, ny)
    residual: np.ndarray
    converged: np.ndarray      # bool
    caustic: np.ndarray        # bool, |det_z| below the caustic tolerance
    n_unconverged: int = 0


@dataclass
class RealRootBranch:
    """One continuation branch of a real boundary-value problem."""

    kind: str
    branch_id: int
    grid: object
    T: float
    u: np.ndarray              # (nx, ny, d) free parameters
    x0: np.ndarray             # (nx, ny, d)
    p0: np.ndarray
    action: np.ndarray         # (nx, ny) real
    mxx: np.ndarray            # (nx, ny, d, d) real
    mxp: np.ndarray
    det_z: np.ndarray          # (nx, ny) complex
    branch_phase: np.ndarray
    jac_metric: np.ndarray     # caustic block determinant magnitude
    residual: np.ndarray
    converged: np.ndarray
    maslov: int = 0


def center_trajectory_endpoint(T, potential, params, settings=None, mass=1.0):
    res = integrate_batch(params.q[None, :].astype(complex),
                          params.p[None, :].astype(complex),
                          T, potential, params,
                          settings=(settings or ShootingSettings()).integrator,
                          mass=mass, tangent=False)
    return res.x[0].real


def _coarse_axes(n, stride):
    ax = list(range(0, n, stride))
    if ax[-1] != n - 1:
        ax.append(n - 1)
    return np.array(ax)


def _ring_members(na, nb, a0, b0):
    """Lattice indices grouped by Chebyshev distance from (a0, b0)."""
    aa, bb = np.meshgrid(np.arange(na), np.arange(nb), indexing="ij")
    dist = np.maximum(np.abs(aa - a0), np.abs(bb - b0))
    rings = []
    for r in range(int(dist.max()) + 1):
        sel = np.nonzero(dist == r)
        rings.append(np.stack(sel, axis=-1))
    return rings


def _scatter(res, sel_idx, fields):
    """Copy converged newton_batch outputs into (nx, ny, ...) grid arrays."""
    conv = res.converged
    tgt = tuple(s[conv] for s in sel_idx)
    fields["u"][tgt] = res.u[conv]
    fields["x0"][tgt] = res.x0[conv]
    fields["p0"][tgt] = res.p0[conv]
    fields["action"][tgt] = res.action[conv]
    fields["mxx"][tgt] = res.mxx[conv]
    fields["mxp"][tgt] = res.mxp[conv]
    fields["det_z"][tgt] = res.det_z[conv]
    fields["branch_phase"][tgt] = res.branch_phase[conv]
    fields["residual"][tgt] = res.residual[conv]
    fields["converged"][tgt] = True


def _alloc_fields(nx, ny, d, dtype):
    return {
        "u": np.zeros((nx, ny, d), dtype),
        "x0": np.zeros((nx, ny, d), dtype),
        "p0": np.zeros((nx, ny, d), dtype),
        "action": np.zeros((nx, ny), complex),
        "mxx": np.zeros((nx, ny, d, d), complex),
        "mxp": np.zeros((nx, ny, d, d), complex),
        "det_z": np.ones((nx, ny), complex),
        "branch_phase": np.zeros((nx, ny)),
        "residual": np.full((nx, ny), np.inf),
        "converged": np.zeros((nx, ny), bool),
    }


def _flood_fill(pts, fields, targets_getter, solver, rounds):
    """Retry unconverged cells seeded from converged 8-neighbors."""
    nx, ny = fields["converged"].shape
    for _ in range(rounds):
        conv = fields["converged"]
        if conv.all():
            break
        # cells with at least one converged neighbor
        padded = np.zeros((nx + 2, ny + 2), bool)
        padded[1:-1, 1:-1] = conv
        neigh = np.zeros((nx, ny), int)
        usum = np.zeros((nx, ny) + fields["u"].shape[2:], fields["u"].dtype)
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                if di == 0 and dj == 0:
                    continue
                shifted = padded[1 + di:nx + 1 + di, 1 + dj:ny + 1 + dj]
                neigh += shifted
                uu = np.zeros_like(usum)
                si = slice(max(di, 0), nx + min(di, 0))
                ti = slice(max(-di, 0), nx + min(-di, 0))
                sj = slice(max(dj, 0), ny + min(dj, 0))
                tj = slice(max(-dj, 0), ny + min(-dj, 0))
                uu[ti, tj] = np.where(conv[si, sj][..., None],
                                      fields["u"][si, sj], 0)
                usum += uu
        cand = (~conv) & (neigh > 0)
        if not cand.any():
            break
        sel = np.nonzero(cand)
        seeds = usum[sel] / neigh[sel][:, None]
        res = solver(targets_getter(sel), seeds)
        if not res.converged.any():
            break
        _scatter(res, sel, fields)
    return fields


def solve_grid_complex(grid, T, potential, params: WavepacketParams,
                       settings: ShootingSettings | None = None,
                       mass: float = 1.0) -> ComplexRootField:
    """Main-family complex roots at every grid point.

    Wavefront continuation: a coarse lattice is solved ring by ring
    outward from the grid point nearest the center-trajectory endpoint
    (seeded with omega = 0 there); the fine grid is then solved in one
    batch with seeds interpolated from the coarse solution, and leftover
    cells are flooded from converged neighbors.
    """
    settings = settings or ShootingSettings()
    if not is_smooth(potential):
        raise ShootingError("complex root search needs a smooth potential")
    prob = _omega_problem(params)
    pts = grid.points()
    nx, ny, d = pts.shape
    fields = _alloc_fields(nx, ny, d, complex)

    def solver(targets, seeds):
        return newton_batch(targets, seeds, T, potential, params, prob,
                            settings, mass)

    endpoint = center_trajectory_endpoint(T, potential, params, settings, mass)
    ic = int(np.clip(round((endpoint[0] - grid.x0) / grid.dx), 0, nx - 1))
    jc = int(np.clip(round((endpoint[1] - grid.y0) / grid.dy), 0, ny - 1))

    ci = _coarse_axes(nx, settings.coarse_stride)
    cj = _coarse_axes(ny, settings.coarse_stride)
    a0 = int(np.argmin(np.abs(ci - ic)))
    b0 = int(np.argmin(np.abs(cj - jc)))
    cu = np.zeros((ci.size, cj.size, d), complex)
    cmask = np.zeros((ci.size, cj.size), bool)

    for ring in _ring_members(ci.size, cj.size, a0, b0):
        seeds = np.zeros((ring.shape[0], d), complex)
        keepers = np.ones(ring.shape[0], bool)
        for k, (a, b) in enumerate(ring):
            if a == a0 and b == b0:
                continue
            pa = a - np.sign(a - a0)
            pb = b - np.sign(b - b0)
            if cmask[pa, pb]:
                seeds[k] = cu[pa, pb]
            else:
                near = cmask[max(a - 1, 0):a + 2, max(b - 1, 0):b + 2]
                if near.any():
                    block = cu[max(a - 1, 0):a + 2, max(b - 1, 0):b + 2]
                    seeds[k] = block[near].mean(axis=0)
                else:
                    keepers[k] = False
        ring = ring[keepers]
        seeds = seeds[keepers]
        if ring.size == 0:
            continue
        gi = ci[ring[:, 0]]
        gj = cj[ring[:, 1]]
        res = solver(pts[gi, gj], seeds)
        cu[ring[res.converged, 0], ring[res.converged, 1]] = res.u[res.converged]
        cmask[ring[res.converged, 0], ring[res.converged, 1]] = True
        _scatter(res, (gi, gj), fields)

    # fine pass: every remaining point, seeded from the coarse solution
    seeds_full = _interp_coarse(cu, cmask, ci, cj, nx, ny)
    todo = (~fields["converged"]) & np.isfinite(seeds_full[..., 0])
    sel = np.nonzero(todo)
    if sel[0].size:
        res = solver(pts[sel], seeds_full[sel])
        _scatter(res, sel, fields)

    def targets_getter(sel):
        return pts[sel]

    _flood_fill(pts, fields, targets_getter, solver, settings.flood_rounds)

    caustic = fields["converged"] & (np.abs(fields["det_z"]) < settings.caustic_tol)
    return ComplexRootField(
        grid=grid, T=T, omega=fields["u"], action=fields["action"],
        det_z=fields["det_z"], branch_phase=fields["branch_phase"],
        residual=fields["residual"], converged=fields["converged"],
        caustic=caustic, n_unconverged=int((~fields["converged"]).sum()),
    )


def _interp_coarse(cu, cmask, ci, cj, nx, ny):
    """Per-fine-point seed from converged coarse values (masked bilinear)."""
    d = cu.shape[-1]
    out = np.full((nx, ny, d), np.nan, dtype=cu.dtype)
    ai = np.clip(np.searchsorted(ci, np.arange(nx), side="right") - 1,
                 0, ci.size - 2)
    bj = np.clip(np.searchsorted(cj, np.arange(ny), side="right") - 1,
                 0, cj.size - 2)
    fx = (np.arange(nx) - ci[ai]) / np.maximum(ci[ai + 1] - ci[ai], 1)
    fy = (np.arange(ny) - cj[bj]) / np.maximum(cj[bj + 1] - cj[bj], 1)
    A, B = np.meshgrid(ai, bj, indexing="ij")
    FX, FY = np.meshgrid(fx, fy, indexing="ij")
    wsum = np.zeros((nx, ny))
    vsum = np.zeros((nx, ny, d), dtype=cu.dtype)
    for da, wa in ((0, 1 - FX), (1, FX)):
        for db, wb in ((0, 1 - FY), (1, FY)):
            m = cmask[A + da, B + db]
            w = np.where(m, wa * wb, 0.0)
            wsum += w
            vsum += w[..., None] * np.where(m[..., None], cu[A + da, B + db], 0)
    good = wsum > 1e-12
    out[good] = vsum[good] / wsum[good][:, None]
    return out


def solve_grid_real(kind, grid, T, potential, params: WavepacketParams,
                    settings: ShootingSettings | None = None,
                    mass: float = 1.0, seed_centers=None):
    """All real-root branches of one boundary-value kind over a grid.

    Discovery sweeps a seed grid on a coarse lattice, clusters the roots
    into continuation branches, then each branch is refined to the full
    grid (interpolated seeds plus flood expansion up to its caustic
    boundary).  Returns (branches, diagnostics).
    """
    settings = settings or ShootingSettings()
    prob = _real_problem(kind, params)
    pts = grid.points()
    nx, ny, d = pts.shape

    def solver(targets, seeds):
        return newton_batch(targets, seeds, T, potential, params, prob,
                            settings, mass)

    ci = _coarse_axes(nx, settings.coarse_stride * 2)
    cj = _coarse_axes(ny, settings.coarse_stride * 2)
    endpoint = center_trajectory_endpoint(T, potential, params, settings, mass) \
        if is_smooth(potential) else params.q
    ic = int(np.clip(round((endpoint[0] - grid.x0) / grid.dx), 0, nx - 1))
    jc = int(np.clip(round((endpoint[1] - grid.y0) / grid.dy), 0, ny - 1))
    a0 = int(np.argmin(np.abs(ci - ic)))
    b0 = int(np.argmin(np.abs(cj - jc)))

    # ---- discovery on the coarse lattice
    coarse_pts = pts[np.ix_(ci, cj)].reshape(-1, d)
    ncp = coarse_pts.shape[0]
    seed_list = []
    for cp in coarse_pts:
        seed_list.append(_real_seed_grid(kind, cp, T, params, settings, mass))
    ns = seed_list[0].shape[0]
    seeds = np.concatenate(seed_list, axis=0)
    targets = np.repeat(coarse_pts, ns, axis=0)
    res = solver(targets, seeds)

    tol = settings.dedupe_factor * settings.shoot_tol
    point_roots = [[] for _ in range(ncp)]
    for i in np.nonzero(res.converged)[0]:
        pr = point_roots[i // ns]
        u = res.u[i].real
        if all(np.linalg.norm(u - v) >= max(tol, 1e-7) for v in pr):
            pr.append(u)

    # ---- cluster coarse roots into branches (ring order, nearest match)
    na, nb = ci.size, cj.size
    branch_u = []            # per branch: (na, nb, d) array + mask
    branch_mask = []
    rings = _ring_members(na, nb, a0, b0)
    for ring in rings:
        for a, b in ring:
            for u in point_roots[a * nb + b]:
                best = None
                best_dist = np.inf
                for bi in range(len(branch_u)):
                    m = branch_mask[bi][max(a - 1, 0):a + 2, max(b - 1, 0):b + 2]
                    if not m.any():
                        continue
                    vals = branch_u[bi][max(a - 1, 0):a + 2, max(b - 1, 0):b + 2][m]
                    dist = np.min(np.linalg.norm(vals - u, axis=-1))
                    if dist < best_dist:
                        best_dist = dist
                        best = bi
                if best is None or best_dist > settings.branch_match_tol:
                    branch_u.append(np.zeros((na, nb, d)))
                    branch_mask.append(np.zeros((na, nb), bool))
                    best = len(branch_u) - 1
                elif branch_mask[best][a, b]:
                    continue        # branch already owns a root here
                branch_u[best][a, b] = u
                branch_mask[best][a, b] = True

    # ---- refine each branch on the fine grid
    branches = []
    for bid, (bu, bm) in enumerate(zip(branch_u, branch_mask)):
        fields = _alloc_fields(nx, ny, d, float)
        seeds_full = _interp_coarse(bu.astype(float), bm, ci, cj, nx, ny)
        todo = np.isfinite(seeds_full[..., 0])
        sel = np.nonzero(todo)
        if sel[0].size:
            r = solver(pts[sel], seeds_full[sel])
            _scatter(r, sel, fields)
        _flood_fill(pts, fields, lambda s: pts[s], solver, settings.flood_rounds)
        if not fields["converged"].any():
            continue
        metric = prob.caustic_metric(fields["mxx"].real, fields["mxp"].real)
        branches.append(RealRootBranch(
            kind=kind, branch_id=bid, grid=grid, T=T,
            u=fields["u"], x0=fields["x0"], p0=fields["p0"],
            action=fields["action"].real,
            mxx=fields["mxx"].real, mxp=fields["mxp"].real,
            det_z=fields["det_z"], branch_phase=fields["branch_phase"],
            jac_metric=metric, residual=fields["residual"],
            converged=fields["converged"], maslov=0,
        ))

    diag = {
        "n_branches": len(branches),
        "n_seed_failures": int((~res.converged).sum()),
    }
    return branches, diag


def billiard_grid_roots(grid, T, potential: Billiard, params: WavepacketParams,
                        mass: float = 1.0):
    """Direct and one-bounce chord roots at every grid point (closed form).

    Returns RealRootBranch objects (bounce count in ``maslov``); cells at
    or outside the wall are unconverged.
    """
    if not np.allclose(params.b, params.b[0]):
        raise ShootingError("billiard roots require isotropic widths")
    b = float(params.b[0])
    hbar = params.hbar
    R = potential.radius
    pts = grid.points()
    nx, ny, d = pts.shape
    r = np.linalg.norm(pts, axis=-1)
    inside = r < R * (1.0 - 1e-9)
    safe_r = np.where(r > 1e-12, r, 1.0)
    nhat = np.where((r > 1e-12)[..., None], pts / safe_r[..., None],
                    np.array([1.0, 0.0]))
    pn = nhat[..., :, None] * nhat[..., None, :]
    pt = np.eye(2) - pn
    tau_rate = hbar / (mass * b ** 2)

    branches = []
    for k in (0, 1):
        length = r if k == 0 else 2.0 * R - r
        ok = inside & (length > 1e-12)
        speed = np.where(ok, length / T, 1.0)
        p0 = mass * speed[..., None] * nhat
        action = 0.5 * mass * speed ** 2 * T
        if k == 0:
            tau = tau_rate * T
            mxx = np.where(ok[..., None, None], np.eye(2), 0.0) * 1.0
            mxp = np.where(ok[..., None, None], tau[..., None, None] * np.eye(2), 0.0)
            det_z = (1.0 + 1j * tau) ** 2
            phase = 2.0 * np.arctan(tau)
        else:
            t1 = R / speed
            tau1 = tau_rate * t1
            tau2 = tau_rate * (T - t1)
            # radial component: -(free flight of total duration)
            n_xx, n_xp = -1.0 * np.ones_like(r), -(tau1 + tau2)
            # transverse: free, curvature kick (k_c tau1 = 2 exactly), free
            kick = 2.0 * mass * speed * b ** 2 / (hbar * R)
            t_xx = 1.0 - kick * tau2
            t_xp = tau1 + tau2 - kick * tau1 * tau2
            mxx = n_xx[..., None, None] * pn + t_xx[..., None, None] * pt
            mxp = n_xp[..., None, None] * pn + t_xp[..., None, None] * pt
            zn = n_xx + 1j * n_xp
            zt = t_xx + 1j * t_xp
            det_z = zn * zt
            phase_n = np.pi + np.arctan(tau1 + tau2)
            ang_t = np.angle(zt)
            phase_t = np.where(t_xp < -1e-14, ang_t + 2.0 * np.pi,
                               np.where(np.abs(t_xp) <= 1e-14,
                                        np.pi * np.ones_like(ang_t), ang_t))
            phase = phase_n + phase_t
        fields_conv = ok
        branches.append(RealRootBranch(
            kind="qtox", branch_id=k, grid=grid, T=T,
            u=p0.copy(), x0=np.zeros_like(p0), p0=p0,
            action=action, mxx=mxx, mxp=mxp, det_z=det_z,
            branch_phase=0.5 * phase, jac_metric=np.abs(np.linalg.det(mxp)),
            residual=np.zeros((nx, ny)), converged=fields_conv, maslov=k,
        ))
    return branches
