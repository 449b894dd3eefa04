"""The five wavefunction estimators assembled from trajectory data.

All share the prefactor N / sqrt(det(Mxx + i Mxp)) with the square root
taken on the branch tracked continuously along the trajectory from +1 at
T = 0 (never the principal value), and differ in the exponent:

* psi_sc    — complex saddle trajectories, exponent Phi0 at the saddle;
* psi_tga   — one real central trajectory, Gaussian of evolving width;
* psi_q     — real trajectories from the packet center (momentum free);
* psi_p     — real trajectories with the packet momentum (position free);
* psi_mixed — 2D real trajectories with one position and one momentum fixed.

Grid assemblers return the amplitude field together with per-cell flags
(caustic / unreachable / filtered) and bookkeeping counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Grid2D, WaveField, WavepacketParams
from .shooting import (ComplexRoot, ComplexRootField, RealRoot, RealRootBranch,
                       ShootingSettings)
from .shooting import exponent_phi0 as _phi0_from_parts

FLAG_CAUSTIC = 1
FLAG_UNREACHABLE = 2
FLAG_FILTERED = 4

CAUSTIC_TOL = 1e-4


@dataclass
class MethodField:
    """Estimator output: amplitudes plus per-cell diagnostic flags."""

    field: WaveField
    flags: np.ndarray
    info: dict

    def reliable_mask(self):
        return self.flags == 0

    def counts(self):
        return {
            "caustic_cells": int(np.sum(self.flags & FLAG_CAUSTIC > 0)),
            "unreachable_cells": int(np.sum(self.flags & FLAG_UNREACHABLE > 0)),
            "filtered_cells": int(np.sum(self.flags & FLAG_FILTERED > 0)),
        }


def exponent_phi0(root: ComplexRoot, params: WavepacketParams) -> complex:
    """Saddle exponent Phi0 of a converged complex root."""
    return _phi0_from_parts(root.omega, root.trajectory.action, params)


def _sqrt_tracked(det_z, branch_phase):
    return np.sqrt(np.abs(det_z)) * np.exp(1j * branch_phase)


def _sym(m):
    return 0.5 * (m + np.swapaxes(m, -1, -2))


# ---------------------------------------------------------------------------
# pointwise estimators (sums over explicit root lists)
# ---------------------------------------------------------------------------

def psi_sc(x, roots, params: WavepacketParams, apply_cutoff: bool = True) -> complex:
    """Sum of contributing complex-saddle terms at one point."""
    hbar = params.hbar
    total = 0.0 + 0.0j
    for root in roots:
        if apply_cutoff and not root.contributing:
            continue
        total += params.norm_const * np.exp(1j * root.phi0 / hbar) \
            / root.trajectory.sqrt_det_z()
    return complex(total)


def psi_tga(x, center, params: WavepacketParams) -> complex:
    """Thawed-Gaussian value at x from the real central trajectory."""
    x = np.asarray(x, float)
    hbar = params.hbar
    b = params.b
    m = center.tangent
    z = m.mxx + 1j * m.mxp
    xi = (m.mpp - 1j * m.mpx) @ np.linalg.inv(z)
    dx = x - center.xs[-1].real
    quad = dx / b @ _sym(xi) @ (dx / b)
    expo = 1j / hbar * (center.action.real + center.ps[-1].real @ dx) - 0.5 * quad
    return complex(params.norm_const * np.exp(expo) / center.sqrt_det_z())


def _real_term(root: RealRoot, x, params: WavepacketParams) -> complex:
    """One root's contribution for the q->x / p->x / mixed estimators."""
    x = np.asarray(x, float)
    hbar = params.hbar
    b, c = params.b, params.c
    m = root.trajectory.tangent
    z = m.mxx + 1j * m.mxp
    if root.kind == "qtox":
        dp = params.p - root.p0.real
        w = _sym(np.linalg.solve(z, m.mxp) / np.outer(c, c))
        expo = 1j / hbar * root.trajectory.action.real \
            - 0.5j * dp @ w @ dp
    elif root.kind == "ptox":
        dq = params.q - root.x0.real
        w = _sym(np.linalg.solve(z, m.mxx) / np.outer(b, b))
        expo = 1j / hbar * (root.trajectory.action.real - params.p @ dq) \
            - 0.5 * dq @ w @ dq
    elif root.kind == "mixed":
        dpx = params.p[0] - root.p0.real[0]
        dy = params.q[1] - root.x0.real[1]
        phi_inv = _sym(-1j * np.outer(b, b) * np.linalg.solve(z, m.mxp))
        xi = np.array([1j * dpx / hbar, dy / b[1] ** 2])
        expo = 1j / hbar * (root.trajectory.action.real - params.p[1] * dy) \
            - 0.5 * xi @ phi_inv @ xi - dy ** 2 / (2.0 * b[1] ** 2)
    else:
        raise ValueError(f"unknown root kind {root.kind}")
    maslov = (-1j) ** root.maslov_count
    return complex(params.norm_const * maslov * np.exp(expo)
                   / root.trajectory.sqrt_det_z())


def psi_q(x, roots, params: WavepacketParams) -> complex:
    """Coherent sum over q->x roots (0 when no real trajectory reaches x)."""
    return complex(sum(_real_term(r, x, params) for r in roots
                       if r.kind == "qtox"))


def psi_p(x, roots, params: WavepacketParams) -> complex:
    return complex(sum(_real_term(r, x, params) for r in roots
                       if r.kind == "ptox"))


def psi_mixed(x, roots, params: WavepacketParams) -> complex:
    return complex(sum(_real_term(r, x, params) for r in roots
                       if r.kind == "mixed"))


# ---------------------------------------------------------------------------
# grid assembly
# ---------------------------------------------------------------------------

def sc_family_terms(rf: ComplexRootField, params: WavepacketParams):
    """Per-cell term and Im(Phi0) of one complex-root family."""
    hbar = params.hbar
    quad = np.sum((rf.omega / params.b) ** 2, axis=-1)
    phi0 = rf.action + rf.omega @ params.p + 0.5j * hbar * quad
    sqrt_z = _sqrt_tracked(rf.det_z, rf.branch_phase)
    with np.errstate(over="ignore", invalid="ignore"):
        term = params.norm_const * np.exp(1j * phi0 / hbar) / sqrt_z
    term = np.where(rf.converged, term, 0.0)
    return term, phi0.imag


def false_divergence_mask(term_abs, main_abs, ratio: float = 10.0,
                          run_length: int = 3):
    """Cells where a secondary term shows the runaway-growth signature.

    A cell is cut when its magnitude exceeds ``ratio`` times the main
    family's and has grown monotonically over ``run_length`` consecutive
    cells along either grid axis (in either direction).
    """
    big = term_abs > ratio * main_abs
    grow = np.zeros_like(big)
    for axis in (0, 1):
        for sign in (1, -1):
            mono = np.ones_like(big)
            for k in range(1, run_length):
                a = np.roll(term_abs, sign * k, axis=axis)
                edge = np.zeros_like(big)
                sl = [slice(None)] * big.ndim
                if sign > 0:
                    sl[axis] = slice(0, k)
                else:
                    sl[axis] = slice(-k, None)
                edge[tuple(sl)] = True
                mono &= (term_abs > a) & ~edge
            grow |= mono
    return big & grow


def psi_sc_grid(families, params: WavepacketParams,
                apply_cutoff: bool = True,
                apply_divergence_filter: bool = True,
                caustic_tol: float = CAUSTIC_TOL) -> MethodField:
    """Assemble psi_sc from one or more families of complex roots.

    The first entry is the main family.  Non-contributing cells
    (Im Phi0 < 0) are discarded when ``apply_cutoff``; secondary-family
    terms showing a false divergence (a Stokes-crossing artifact) are cut
    when ``apply_divergence_filter``.
    """
    if isinstance(families, ComplexRootField):
        families = [families]
    main = families[0]
    grid = main.grid
    nx, ny = grid.nx, grid.ny
    total = np.zeros((nx, ny), complex)
    flags = np.zeros((nx, ny), np.int16)
    n_cut = 0

    main_term, _ = sc_family_terms(main, params)
    main_abs = np.abs(main_term)

    for k, fam in enumerate(families):
        term, im_phi0 = sc_family_terms(fam, params)
        keep = fam.converged.copy()
        if apply_cutoff:
            cut = keep & (im_phi0 < 0.0)
            n_cut += int(cut.sum())
            flags[cut] |= FLAG_FILTERED
            keep &= ~cut
        if apply_divergence_filter and k > 0:
            fd = false_divergence_mask(np.abs(term), main_abs)
            fd &= keep
            n_cut += int(fd.sum())
            flags[fd] |= FLAG_FILTERED
            keep &= ~fd
        total += np.where(keep, term, 0.0)
        flags[keep & (np.abs(fam.det_z) < caustic_tol)] |= FLAG_CAUSTIC

    flags[~main.converged] |= FLAG_UNREACHABLE
    bad = ~np.isfinite(total)
    if bad.any():
        total[bad] = 0.0
        flags[bad] |= FLAG_FILTERED
    info = {"families": len(families), "terms_cut": n_cut,
            "unconverged_cells": int((~main.converged).sum())}
    return MethodField(WaveField(grid, total), flags, info)


def psi_tga_grid(grid: Grid2D, center, params: WavepacketParams) -> MethodField:
    """Thawed-Gaussian field: one central trajectory, closed form in x."""
    hbar = params.hbar
    b = params.b
    m = center.tangent
    z = m.mxx + 1j * m.mxp
    xi = _sym((m.mpp - 1j * m.mpx) @ np.linalg.inv(z))
    qr = center.xs[-1].real
    pr = center.ps[-1].real
    sr = center.action.real
    dx = grid.points() - qr
    dxs = dx / b
    quad = np.einsum("...i,ij,...j->...", dxs, xi, dxs)
    expo = 1j / hbar * (sr + dx @ pr) - 0.5 * quad
    vals = params.norm_const * np.exp(expo) / center.sqrt_det_z()
    flags = np.zeros((grid.nx, grid.ny), np.int16)
    return MethodField(WaveField(grid, vals), flags, {"families": 1})


def _branch_terms(branch: RealRootBranch, params: WavepacketParams,
                  caustic_tol: float):
    """Vectorized per-cell term of one real-root branch."""
    hbar = params.hbar
    b, c = params.b, params.c
    z = branch.mxx + 1j * branch.mxp
    conv = branch.converged
    with np.errstate(all="ignore"):
        if branch.kind == "qtox":
            dp = params.p - branch.p0
            w = _sym(np.linalg.solve(z, branch.mxp) / np.outer(c, c))
            expo = 1j / hbar * branch.action \
                - 0.5j * np.einsum("...i,...ij,...j->...", dp, w, dp)
        elif branch.kind == "ptox":
            dq = params.q - branch.x0
            w = _sym(np.linalg.solve(z, branch.mxx) / np.outer(b, b))
            expo = 1j / hbar * (branch.action - dq @ params.p) \
                - 0.5 * np.einsum("...i,...ij,...j->...", dq, w, dq)
        else:
            dpx = params.p[0] - branch.p0[..., 0]
            dy = params.q[1] - branch.x0[..., 1]
            phi_inv = _sym(-1j * np.outer(b, b) * np.linalg.solve(z, branch.mxp))
            xi = np.stack([1j * dpx / hbar, dy / b[1] ** 2], axis=-1)
            expo = 1j / hbar * (branch.action - params.p[1] * dy) \
                - 0.5 * np.einsum("...i,...ij,...j->...", xi, phi_inv, xi) \
                - dy ** 2 / (2.0 * b[1] ** 2)
        maslov = (-1j) ** branch.maslov
        term = params.norm_const * maslov * np.exp(expo) \
            / _sqrt_tracked(branch.det_z, branch.branch_phase)
    term = np.where(conv, term, 0.0)
    caustic = conv & ((branch.jac_metric < caustic_tol)
                      | (np.abs(branch.det_z) < caustic_tol))
    return term, caustic


def real_method_grid(branches, params: WavepacketParams,
                     grid: Grid2D | None = None,
                     settings: ShootingSettings | None = None,
                     caustic_tol: float = CAUSTIC_TOL) -> MethodField:
    """Coherent sum of real-root branches on a grid.

    Branch duplicates at a cell (free parameters closer than the dedupe
    tolerance) are counted once.  Cells near a fold of the root map are
    flagged caustic and their terms dropped; cells reached by no branch
    are flagged unreachable.
    """
    settings = settings or ShootingSettings()
    if not branches:
        if grid is None:
            raise ValueError("need a grid when no branches were found")
        flags = np.full((grid.nx, grid.ny), FLAG_UNREACHABLE, np.int16)
        return MethodField(WaveField(grid, np.zeros((grid.nx, grid.ny), complex)),
                           flags, {"branches": 0})
    grid = branches[0].grid
    nx, ny = grid.nx, grid.ny
    total = np.zeros((nx, ny), complex)
    flags = np.zeros((nx, ny), np.int16)
    covered = np.zeros((nx, ny), bool)
    dedup_tol = settings.dedupe_factor * settings.shoot_tol

    used = []
    n_dupes = 0
    for branch in branches:
        term, caustic = _branch_terms(branch, params, caustic_tol)
        dup = np.zeros((nx, ny), bool)
        for prev in used:
            both = branch.converged & prev.converged
            close = np.linalg.norm(branch.u - prev.u, axis=-1) < max(dedup_tol, 1e-7)
            dup |= both & close
        n_dupes += int(dup.sum())
        keep = branch.converged & ~dup & ~caustic
        total += np.where(keep, term, 0.0)
        covered |= branch.converged & ~dup
        flags[caustic & branch.converged & ~dup] |= FLAG_CAUSTIC
        used.append(branch)

    flags[~covered] |= FLAG_UNREACHABLE
    bad = ~np.isfinite(total)
    if bad.any():
        total[bad] = 0.0
        flags[bad] |= FLAG_FILTERED
    info = {"branches": len(branches), "duplicate_cells": n_dupes,
            "unreachable_cells": int((~covered).sum())}
    return MethodField(WaveField(grid, total), flags, info)
