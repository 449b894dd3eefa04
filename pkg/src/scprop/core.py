"""Domain types shared by every propagation back end.

Gaussian wavepacket parameters, complex phase-space points, scaled tangent
matrices, uniform 2D grids and the wave fields sampled on them, plus the
overlap metric used to compare propagation methods.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"WVF1"


class GridMismatchError(ValueError):
    """Two wave fields live on different grids."""


class NormalizationError(ValueError):
    """A field that must be normalized is not."""


class FieldEvaluationError(RuntimeError):
    """Pointwise evaluation failed; carries the offending coordinates."""

    def __init__(self, point, cause):
        super().__init__(f"field evaluation failed at {tuple(point)}: {cause}")
        self.point = tuple(point)


@dataclass(frozen=True)
class WavepacketParams:
    """Gaussian wavepacket: center (q, p), per-axis position widths b, hbar.

    The momentum widths are tied to the position widths, C = hbar * B^-1,
    so a packet is minimum-uncertainty by construction; decoupling B and C
    is not supported.
    """

    q: np.ndarray
    p: np.ndarray
    b: np.ndarray
    hbar: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "q", np.atleast_1d(np.asarray(self.q, float)))
        object.__setattr__(self, "p", np.atleast_1d(np.asarray(self.p, float)))
        object.__setattr__(self, "b", np.atleast_1d(np.asarray(self.b, float)))
        if not (self.q.shape == self.p.shape == self.b.shape):
            raise ValueError("q, p, b must share one dimension d")
        if np.any(self.b <= 0):
            raise ValueError("all width components must be positive")
        if self.hbar <= 0:
            raise ValueError("hbar must be positive")

    @property
    def d(self) -> int:
        return self.q.size

    @property
    def c(self) -> np.ndarray:
        """Diagonal of the momentum-width matrix C = hbar * B^-1."""
        return self.hbar / self.b

    @property
    def norm_const(self) -> float:
        """Normalization |B|^(-1/2) * pi^(-d/4)."""
        return float(np.prod(self.b) ** -0.5 * np.pi ** (-self.d / 4))


@dataclass(frozen=True)
class ComplexPhasePoint:
    """Point of the complexified phase space."""

    x: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.atleast_1d(np.asarray(self.x, complex)))
        object.__setattr__(self, "p", np.atleast_1d(np.asarray(self.p, complex)))
        if self.x.shape != self.p.shape:
            raise ValueError("position and momentum dimensions differ")

    @property
    def d(self) -> int:
        return self.x.size


@dataclass(frozen=True)
class TangentMatrix:
    """Blocks of the tangent (monodromy) matrix in uncertainty-scaled variables.

    Scaled coordinates are x~ = B^-1 x and p~ = C^-1 p; with B C = hbar * I
    the scaled flow is exactly symplectic, M^T J M = J, and det M = 1.
    """

    mxx: np.ndarray
    mxp: np.ndarray
    mpx: np.ndarray
    mpp: np.ndarray

    def __post_init__(self):
        for name in ("mxx", "mxp", "mpx", "mpp"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), complex))
        d = self.mxx.shape[0]
        for name in ("mxx", "mxp", "mpx", "mpp"):
            if getattr(self, name).shape != (d, d):
                raise ValueError("tangent blocks must all be d x d")

    @classmethod
    def identity(cls, d: int) -> "TangentMatrix":
        eye = np.eye(d, dtype=complex)
        zero = np.zeros((d, d), dtype=complex)
        return cls(eye, zero.copy(), zero.copy(), eye.copy())

    @property
    def d(self) -> int:
        return self.mxx.shape[0]

    def full(self) -> np.ndarray:
        return np.block([[self.mxx, self.mxp], [self.mpx, self.mpp]])

    def det(self) -> complex:
        return complex(np.linalg.det(self.full()))

    def det_z(self) -> complex:
        """det(Mxx + i Mxp), the semiclassical prefactor determinant."""
        return complex(np.linalg.det(self.mxx + 1j * self.mxp))

    def symplectic_defect(self) -> float:
        """max |(M^T J M - J)_ij| in scaled variables."""
        d = self.d
        j = np.zeros((2 * d, 2 * d))
        j[:d, d:] = np.eye(d)
        j[d:, :d] = -np.eye(d)
        m = self.full()
        return float(np.max(np.abs(m.T @ j @ m - j)))


@dataclass(frozen=True)
class ComplexTrajectory:
    """Time-sampled complex trajectory with action, tangent matrix and branch phase.

    ``branch_phase`` is the continuously tracked argument of
    sqrt(det(Mxx + i Mxp)); it starts at 0 because M(0) is the identity.
    """

    ts: np.ndarray
    xs: np.ndarray          # (nt, d) complex positions
    ps: np.ndarray          # (nt, d) complex momenta
    action: complex
    tangent: TangentMatrix
    branch_phase: float
    energy: complex          # H at t = 0
    energies: np.ndarray = field(default=None, repr=False)
    min_abs_det_z: float = np.inf

    @property
    def samples(self):
        return [(float(t), ComplexPhasePoint(x, p))
                for t, x, p in zip(self.ts, self.xs, self.ps)]

    def final_point(self) -> ComplexPhasePoint:
        return ComplexPhasePoint(self.xs[-1], self.ps[-1])

    def sqrt_det_z(self) -> complex:
        """Branch-tracked square root of det(Mxx + i Mxp) at the final time."""
        return complex(np.sqrt(abs(self.tangent.det_z())) * np.exp(1j * self.branch_phase))


def coherent_state_amplitude(x, params: WavepacketParams):
    """Position amplitude of the Gaussian coherent state.

    N * exp{(i/hbar) p.(x-q) - (x-q).B^-2.(x-q)/2} with
    N = |B|^(-1/2) pi^(-d/4).  ``x`` may carry leading batch axes, the last
    axis is the spatial dimension; a bare d-vector returns a scalar.
    """
    x = np.asarray(x)
    scalar_input = x.ndim == 1
    dx = x - params.q
    expo = (1j / params.hbar) * (dx @ params.p) - 0.5 * np.sum((dx / params.b) ** 2, axis=-1)
    out = params.norm_const * np.exp(expo)
    return complex(out) if scalar_input else out


@dataclass(frozen=True)
class Grid2D:
    """Uniform rectangular grid: origin, spacing, nx x ny points.

    Values indexed [ix, iy]; point (ix, iy) sits at
    (x0 + ix*dx, y0 + iy*dy).
    """

    x0: float
    y0: float
    dx: float
    dy: float
    nx: int
    ny: int

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError("grid needs at least 2 points per axis")
        if self.dx <= 0 or self.dy <= 0:
            raise ValueError("grid spacing must be positive")

    @classmethod
    def from_bounds(cls, xlim, ylim, nx, ny) -> "Grid2D":
        dx = (xlim[1] - xlim[0]) / (nx - 1)
        dy = (ylim[1] - ylim[0]) / (ny - 1)
        return cls(float(xlim[0]), float(ylim[0]), dx, dy, int(nx), int(ny))

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    def x_axis(self) -> np.ndarray:
        return self.x0 + self.dx * np.arange(self.nx)

    def y_axis(self) -> np.ndarray:
        return self.y0 + self.dy * np.arange(self.ny)

    def points(self) -> np.ndarray:
        """All grid points as an (nx, ny, 2) array."""
        xg, yg = np.meshgrid(self.x_axis(), self.y_axis(), indexing="ij")
        return np.stack([xg, yg], axis=-1)

    def __eq__(self, other):
        if not isinstance(other, Grid2D):
            return NotImplemented
        return (self.nx, self.ny) == (other.nx, other.ny) and np.allclose(
            [self.x0, self.y0, self.dx, self.dy],
            [other.x0, other.y0, other.dx, other.dy],
            rtol=0.0, atol=1e-12,
        )

    def __hash__(self):
        return hash((self.x0, self.y0, self.dx, self.dy, self.nx, self.ny))


@dataclass
class WaveField:
    """Complex amplitudes on a Grid2D."""

    grid: Grid2D
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, complex)
        if self.values.shape != (self.grid.nx, self.grid.ny):
            raise ValueError("values shape does not match grid")

    def norm_sq(self) -> float:
        return float(np.sum(np.abs(self.values) ** 2) * self.grid.cell_area)

    def norm(self) -> float:
        return float(np.sqrt(self.norm_sq()))

    def normalized(self) -> "WaveField":
        n = self.norm()
        if n == 0.0:
            raise NormalizationError("cannot normalize a zero field")
        return WaveField(self.grid, self.values / n)

    def density(self) -> np.ndarray:
        return np.abs(self.values) ** 2

    # -- serialization ----------------------------------------------------

    def save(self, path):
        header = MAGIC + struct.pack(
            "<ii4d", self.grid.nx, self.grid.ny,
            self.grid.x0, self.grid.y0, self.grid.dx, self.grid.dy,
        )
        payload = np.empty((self.grid.nx, self.grid.ny, 2), dtype="<f8")
        payload[..., 0] = self.values.real
        payload[..., 1] = self.values.imag
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload.tobytes())

    @classmethod
    def load(cls, path) -> "WaveField":
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:4] != MAGIC:
            raise ValueError(f"{path}: not a wave-field file")
        nx, ny, x0, y0, dx, dy = struct.unpack_from("<ii4d", raw, 4)
        offset = 4 + struct.calcsize("<ii4d")
        expected = nx * ny * 2 * 8
        if len(raw) - offset != expected:
            raise ValueError(f"{path}: truncated payload")
        flat = np.frombuffer(raw, dtype="<f8", offset=offset).reshape(nx, ny, 2)
        return cls(Grid2D(x0, y0, dx, dy, nx, ny), flat[..., 0] + 1j * flat[..., 1])

    def to_csv(self, path):
        """x, y, re, im, |psi|^2 rows, x-major order."""
        pts = self.grid.points().reshape(-1, 2)
        vals = self.values.reshape(-1)
        table = np.column_stack([
            pts[:, 0], pts[:, 1], vals.real, vals.imag, np.abs(vals) ** 2,
        ])
        np.savetxt(path, table, delimiter=",", header="x,y,re,im,density", comments="")


def sample_on_grid(f, grid: Grid2D) -> WaveField:
    """Evaluate ``f`` pointwise on the grid.

    ``f`` receives an (..., 2) array of positions and must return amplitudes
    of the same leading shape (a plain scalar function of a 2-vector also
    works, at python-loop cost).  Failures re-raise with the offending grid
    coordinates attached.
    """
    pts = grid.points()
    try:
        vals = np.asarray(f(pts), complex)
        if vals.shape != (grid.nx, grid.ny):
            raise ValueError(f"sampler returned shape {vals.shape}")
    except Exception:
        vals = np.empty((grid.nx, grid.ny), complex)
        for ix in range(grid.nx):
            for iy in range(grid.ny):
                pt = pts[ix, iy]
                try:
                    vals[ix, iy] = complex(f(pt))
                except Exception as exc:
                    raise FieldEvaluationError(pt, exc) from exc
    return WaveField(grid, vals)


def overlap(a: WaveField, b: WaveField, norm_tol: float = 1e-6) -> float:
    """|<a|b>|^2 on a shared grid; both fields must be normalized.

    Returns |sum conj(a) * b * cellarea|^2, a real number in [0, 1] up to
    quadrature error.
    """
    if a.grid != b.grid:
        raise GridMismatchError("overlap requires identical grids")
    for name, f in (("a", a), ("b", b)):
        if abs(f.norm_sq() - 1.0) > norm_tol:
            raise NormalizationError(
                f"field {name} has |norm^2 - 1| = {abs(f.norm_sq() - 1.0):.3e} > {norm_tol}"
            )
    amp = np.sum(np.conj(a.values) * b.values) * a.grid.cell_area
    return float(abs(amp) ** 2)


def masked_overlap(a: WaveField, b: WaveField, mask: np.ndarray) -> float:
    """Overlap restricted to ``mask`` cells, both fields renormalized there.

    Used both for flag-discounted comparisons (caustic cells excluded) and
    for region-restricted overlaps.  Returns 0 when either field carries no
    probability inside the mask.
    """
    if a.grid != b.grid:
        raise GridMismatchError("overlap requires identical grids")
    mask = np.asarray(mask, bool)
    if mask.shape != a.values.shape:
        raise ValueError("mask shape does not match grid")
    av = np.where(mask, a.values, 0.0)
    bv = np.where(mask, b.values, 0.0)
    na2 = np.sum(np.abs(av) ** 2) * a.grid.cell_area
    nb2 = np.sum(np.abs(bv) ** 2) * a.grid.cell_area
    if na2 <= 0.0 or nb2 <= 0.0:
        return 0.0
    amp = np.sum(np.conj(av) * bv) * a.grid.cell_area
    return float(abs(amp) ** 2 / (na2 * nb2))
