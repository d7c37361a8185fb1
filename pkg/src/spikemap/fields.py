"""Uniform cubic grids, discrete fields, stencil operators and quadrature.

Everything downstream (solvers, diagnostics, landscape scans) works on the
node-centered grids defined here.  Conventions: arrays are indexed [ix, iy, iz],
node coordinates are origin + (index - (n-1)/2) * spacing, and integrals are
plain node sums times the cell volume (spectrally accurate for smooth fields
that decay below rounding before the boundary).
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np

SNAPSHOT_MAGIC = b"SPKF"
SNAPSHOT_VERSION = 1

# sixth-order second-derivative stencil weights (per axis, divided by h^2)
_C0, _C1, _C2, _C3 = -49.0 / 18.0, 1.5, -3.0 / 20.0, 1.0 / 90.0


class BoundaryMassWarning(UserWarning):
    """Raised when a field carries non-negligible weight on the box faces."""


@dataclass(frozen=True)
class Grid3:
    """Node-centered uniform grid on a rectangular box, origin at the center."""

    dims: tuple[int, int, int]
    spacing: float
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(n) < 8 for n in self.dims):
            raise ValueError(f"grid dims must be three values >= 8, got {self.dims}")
        if not (self.spacing > 0):
            raise ValueError(f"grid spacing must be positive, got {self.spacing}")

    @property
    def cell_volume(self) -> float:
        return self.spacing**3

    def axis(self, k: int) -> np.ndarray:
        n = self.dims[k]
        return self.origin[k] + (np.arange(n) - (n - 1) / 2.0) * self.spacing

    def axes(self):
        return self.axis(0), self.axis(1), self.axis(2)

    def meshgrid(self):
        """Coordinate arrays X1, X2, X3, each of shape dims."""
        return np.meshgrid(*self.axes(), indexing="ij")

    def half_extent(self, k: int = 0) -> float:
        return (self.dims[k] - 1) / 2.0 * self.spacing


def make_grid(radius: float, n: int, origin=(0.0, 0.0, 0.0)) -> Grid3:
    """Cube grid with n nodes per axis spanning [-radius, radius] around origin."""
    if n < 8:
        raise ValueError("need at least 8 nodes per axis")
    return Grid3((n, n, n), 2.0 * radius / (n - 1), tuple(float(c) for c in origin))


def _check_values(grid, values, ncomp):
    want = (3,) + tuple(grid.dims) if ncomp == 3 else tuple(grid.dims)
    if values.shape != want:
        raise ValueError(f"values shape {values.shape} does not match grid dims {want}")


@dataclass
class RealField3:
    grid: Grid3
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        _check_values(self.grid, self.values, 1)


@dataclass
class ComplexField3:
    grid: Grid3
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        _check_values(self.grid, self.values, 1)


@dataclass
class VectorField3:
    """Three scalar components stacked along the leading axis."""

    grid: Grid3
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.dtype not in (np.float64, np.complex128):
            self.values = self.values.astype(np.complex128)
        _check_values(self.grid, self.values, 3)


def _same_grid(a, b, what):
    if a.grid != b.grid:
        raise ValueError(f"{what}: fields live on different grids")


def gradient(f):
    """Componentwise central differences, one-sided at the box faces.

    Interior nodes use the second-order central formula; faces use the
    matching one-sided second-order formula (this is what keeps the
    operator exact on affine fields all the way to the boundary).
    """
    g = np.gradient(f.values, f.grid.spacing, edge_order=2)
    return VectorField3(f.grid, np.stack(g))


def laplacian(f):
    """Seven-point Laplacian; one-sided second differences at the faces.

    The face formula (2 f0 - 5 f1 + 4 f2 - f3) / h^2 is exact for quadratics,
    matching the interior stencil's exactness class.
    """
    u = f.values
    h2 = f.grid.spacing**2
    out = np.zeros_like(u)
    for ax in range(3):
        d2 = (np.roll(u, 1, axis=ax) + np.roll(u, -1, axis=ax) - 2.0 * u) / h2
        # repair both faces of this axis with the one-sided formula
        lo = [slice(None)] * 3
        for face in (0, 1):
            n = f.grid.dims[ax]
            idx = [0, 1, 2, 3] if face == 0 else [n - 1, n - 2, n - 3, n - 4]
            take = []
            for i in idx:
                lo[ax] = i
                take.append(u[tuple(lo)])
            lo[ax] = idx[0]
            d2[tuple(lo)] = (2.0 * take[0] - 5.0 * take[1] + 4.0 * take[2] - take[3]) / h2
        out += d2
    cls = ComplexField3 if np.iscomplexobj(u) else RealField3
    return cls(f.grid, out)


def covariant_derivative(u: ComplexField3, A: VectorField3, eps: float) -> VectorField3:
    """(eps/i) grad u - A u, componentwise, with the plain central gradient."""
    _same_grid(u, A, "covariant_derivative")
    g = gradient(u).values
    vals = (eps / 1j) * g - A.values * u.values[None, ...]
    return VectorField3(u.grid, vals)


def boundary_mass(values: np.ndarray, depth: int = 1) -> float:
    """Sum of |values| over the outermost `depth` node shells."""
    a = np.abs(values)
    core = a[depth:-depth, depth:-depth, depth:-depth]
    return float(a.sum() - core.sum())


def integrate(f: RealField3) -> float:
    """Node-sum quadrature. Warns when the boundary shell carries real weight."""
    total = float(np.abs(f.values).sum())
    if total > 0 and boundary_mass(f.values) > 1e-6 * total:
        warnings.warn(
            "boundary shell holds more than 1e-6 of the field mass; "
            "the box is too small for this field",
            BoundaryMassWarning,
            stacklevel=2,
        )
    return float(f.values.sum()) * f.grid.cell_volume


def masked_hop(u: np.ndarray, k: int, axis: int) -> np.ndarray:
    """Shift u by k nodes along axis, zeroing slots whose source left the box."""
    v = np.roll(u, -k, axis=axis)
    sl = [slice(None)] * 3
    sl[axis] = slice(-k, None) if k > 0 else slice(None, -k)
    v[tuple(sl)] = 0.0
    return v


@dataclass
class LinkPhases:
    """Per-axis single-hop and double-hop phase factors exp(-i theta).

    theta is the line integral of the vector potential along the hop divided
    by eps.  Double- and triple-hop phases are products of the consecutive
    single hops, which is what makes the phased kinetic form exactly unitarily
    equivalent to the free one along each axis.
    """

    grid: Grid3
    eps: float
    ph: tuple  # ((p1, p2, p3) for each axis)


def const_link_phases(grid: Grid3, a, eps: float) -> LinkPhases:
    """Link phases for a spatially constant vector potential a (exact)."""
    per_axis = []
    for m in range(3):
        p1 = np.full(grid.dims, np.exp(-1j * a[m] * grid.spacing / eps))
        per_axis.append((p1, p1 * p1, p1 * p1 * p1))
    return LinkPhases(grid, eps, tuple(per_axis))


def apply_link_kinetic(u: np.ndarray, phases: LinkPhases, eps: float, h: float) -> np.ndarray:
    """Sixth-order phased kinetic operator (the |D^eps|^2 part of the action).

    Dirichlet outside the box: hops that cross a face contribute zero.
    """
    out = np.zeros(u.shape, dtype=np.complex128)
    for m in range(3):
        p1, p2, p3 = phases.ph[m]
        t1 = p1 * masked_hop(u, 1, m) + masked_hop(np.conj(p1) * u, -1, m)
        t2 = p2 * masked_hop(u, 2, m) + masked_hop(np.conj(p2) * u, -2, m)
        t3 = p3 * masked_hop(u, 3, m) + masked_hop(np.conj(p3) * u, -3, m)
        # minus the phased second-derivative stencil along this axis
        out += (-_C0) * u - _C1 * t1 - _C2 * t2 - _C3 * t3
    return (eps * eps / (h * h)) * out


def link_kinetic_form(u: np.ndarray, phases: LinkPhases, eps: float, h: float) -> float:
    """<u, T u> h^3 with T the phased kinetic operator. Real and >= 0."""
    return float(np.real(np.vdot(u, apply_link_kinetic(u, phases, eps, h)))) * h**3


def h_norm_squared(u: ComplexField3, model, eps: float) -> float:
    """Squared magnetic Sobolev norm: kinetic quadratic form plus the V-weighted mass.

    Uses the gauge-covariant phased stencil, so the value is invariant under
    a gauge change of (u, model) to rounding for polynomial gauge functions.
    """
    phases = model.link_phases(u.grid, eps)
    kin = link_kinetic_form(u.values, phases, eps, u.grid.spacing)
    vmass = float((model.V_on(u.grid) * np.abs(u.values) ** 2).sum()) * u.grid.cell_volume
    return kin + vmass


def write_snapshot(path, f) -> None:
    """Binary field snapshot.

    Layout, all little-endian: magic 'SPKF', uint32 version, uint32 flag
    (0 real, 1 complex), three uint32 dims, float64 spacing, three float64
    origin components, then the nodes as float64 in x-fastest order, complex
    values interleaved (re, im).
    """
    is_complex = np.iscomplexobj(f.values)
    head = struct.pack(
        "<4sII3Id3d",
        SNAPSHOT_MAGIC,
        SNAPSHOT_VERSION,
        1 if is_complex else 0,
        *[int(n) for n in f.grid.dims],
        f.grid.spacing,
        *[float(c) for c in f.grid.origin],
    )
    flat = f.values.ravel(order="F")
    if is_complex:
        payload = np.empty(2 * flat.size, dtype="<f8")
        payload[0::2] = flat.real
        payload[1::2] = flat.imag
    else:
        payload = flat.astype("<f8")
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(payload.tobytes())


def read_snapshot(path):
    head_size = struct.calcsize("<4sII3Id3d")
    with open(path, "rb") as fh:
        head = fh.read(head_size)
        if len(head) < head_size:
            raise ValueError(f"{path}: truncated snapshot header")
        magic, version, flag, n1, n2, n3, spacing, o1, o2, o3 = struct.unpack("<4sII3Id3d", head)
        if magic != SNAPSHOT_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != SNAPSHOT_VERSION:
            raise ValueError(f"{path}: unsupported snapshot version {version}")
        raw = np.frombuffer(fh.read(), dtype="<f8")
    npts = n1 * n2 * n3
    grid = Grid3((n1, n2, n3), spacing, (o1, o2, o3))
    if flag == 1:
        if raw.size != 2 * npts:
            raise ValueError(f"{path}: payload size {raw.size} != 2*{npts}")
        vals = (raw[0::2] + 1j * raw[1::2]).reshape(grid.dims, order="F")
        return ComplexField3(grid, vals)
    if raw.size != npts:
        raise ValueError(f"{path}: payload size {raw.size} != {npts}")
    return RealField3(grid, raw.reshape(grid.dims, order="F").copy())
