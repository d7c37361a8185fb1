"""Complex-field solver for the magnetic problem on box grids.

The kinetic operator is the sixth-order phased-hop discretization from
fields.py; its hop phases carry exact line integrals of the vector potential,
which keeps the discrete energy, the descent direction, and the reported
residual gauge covariant to rounding for polynomial gauge functions.  The
expanded form of the operator (the one with an explicit div A term) is never
assembled here: the phases encode that term exactly.  The analytic div A that
the model provides is reserved for diagnostics that need the expansion.

A solve is internally parallel only in the sense of numpy's vectorized
slab sweeps, whose reduction order is fixed, so repeated runs with the same
seed produce identical bytes.  Separate solves share no mutable state and can
run concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.optimize import brentq

from .fields import (
    ComplexField3,
    Grid3,
    apply_link_kinetic,
    link_kinetic_form,
    make_grid,
    read_snapshot,
)
from .frozen_solver import (
    ConvergenceError,
    FrozenPoint,
    SolverError,
    _rim_mask,
    explicit_sigma_and_grad,
    sample_profile_on_grid,
    shoot_radial,
)
from .model import ModelSpec, Num, PotentialExpr, validate_assumptions


class BoundaryMassError(SolverError):
    """The box is too small: the outermost node shell carries real mass."""


class ResolutionWarning(UserWarning):
    """The converged spike is about one node wide.

    Coarse grids admit lattice-pinned bound states whose discrete kinetic
    cost is underpriced by the stencil; they satisfy the discrete equation
    but do not approximate any continuum solution.  Refine the grid until
    the spike spans several nodes.
    """


@dataclass
class MagneticSolveConfig:
    """Knobs for a single magnetic solve.

    tol is relative: the iteration stops when the residual rms falls below
    tol * max(1, sup V) * rms(u).  step_scale and beta set the descent rule
    (normalized gradient step with a heavy-ball term that resets whenever it
    points uphill).  seed is "frozen" (modulated frozen ground state),
    "random" (deterministic in rng_seed), or a path to a field snapshot.
    """

    eps: float
    grid: Grid3
    max_iters: int = 20000
    tol: float = 1e-5
    step_scale: float = 1.8
    beta: float = 0.95
    seed: str = "frozen"
    rng_seed: int = 0
    center: tuple | None = None

    def __post_init__(self):
        if self.eps <= 0:
            raise SolverError("eps must be positive")
        if self.tol <= 0:
            raise SolverError("residual tolerance must be positive")


@dataclass
class MagneticSolution:
    """Converged complex field with its reported scales.

    scaled_energy is eps^-3 J(u) and scaled_mass is eps^-3 ||u||^2; both stay
    bounded along a concentrating family, which is the scale check the
    concentration study reports.  spike is the argmax of |u| after one
    parabolic refinement per axis.
    """

    u: ComplexField3
    eps: float
    energy_J: float
    scaled_energy: float
    residual_rms: float
    nehari_slack: float
    spike: np.ndarray
    scaled_mass: float
    iterations: int
    trace: list = field(repr=False, default_factory=list)


class PhaseSplit(NamedTuple):
    U: ComplexField3
    omega: float
    imag_fraction: float


def _const_expr(v: float) -> PotentialExpr:
    return PotentialExpr(repr(float(v)), Num(float(v)))


def frozen_model_at(z, model: ModelSpec) -> ModelSpec:
    """Constant-coefficient model with V, K, A frozen at the point z."""
    z = np.asarray(z, dtype=np.float64)
    Vz = float(model.V_at(z))
    Kz = float(model.K_at(z))
    Az = model.A_at(z)
    return ModelSpec(
        V=_const_expr(Vz),
        K=_const_expr(Kz),
        A=tuple(_const_expr(a) for a in Az),
        nonlin=model.nonlin,
        V0=Vz,
        K0=Kz,
    )


def _mass2_boundary_fraction(values: np.ndarray) -> float:
    """Fraction of the squared-modulus mass on the outermost node shell."""
    a2 = np.abs(values) ** 2
    total = float(a2.sum())
    if total == 0.0:
        return 0.0
    core = float(a2[1:-1, 1:-1, 1:-1].sum())
    return (total - core) / total


def _warn_if_pinned(uv: np.ndarray) -> None:
    """Warn when |u| falls by more than 60% within one node of its peak."""
    m = np.abs(uv)
    idx = np.unravel_index(int(np.argmax(m)), m.shape)
    peak = m[idx]
    if peak == 0.0:
        return
    worst = 1.0
    for ax in range(3):
        lo = list(idx)
        best = 0.0
        for d in (-1, 1):
            j = idx[ax] + d
            if 0 <= j < m.shape[ax]:
                lo[ax] = j
                best = max(best, float(m[tuple(lo)]))
        worst = min(worst, best / peak)
    if worst < 0.4:
        import warnings

        warnings.warn(
            "converged spike is about one node wide; the grid cannot resolve "
            "it and the state may be lattice-pinned",
            ResolutionWarning,
            stacklevel=3,
        )


def _spike_location(u: ComplexField3) -> np.ndarray:
    """Argmax of |u| with one parabolic refinement along each axis."""
    m = np.abs(u.values) ** 2
    idx = np.unravel_index(int(np.argmax(m)), m.shape)
    out = np.empty(3)
    h = u.grid.spacing
    for ax in range(3):
        i = idx[ax]
        out[ax] = u.grid.axis(ax)[i]
        if 0 < i < u.grid.dims[ax] - 1:
            lo = list(idx)
            lo[ax] = i - 1
            y0 = m[tuple(lo)]
            lo[ax] = i + 1
            y2 = m[tuple(lo)]
            y1 = m[idx]
            denom = y0 - 2.0 * y1 + y2
            if denom < 0.0:
                out[ax] += h * float(np.clip(0.5 * (y0 - y2) / denom, -0.5, 0.5))
    return out


def energy_J(u: ComplexField3, model: ModelSpec, eps: float) -> float:
    """J(u) = (kinetic form + V-mass)/2 minus the K-weighted potential term.

    The kinetic part is the phased quadratic form, so the value is invariant
    under a gauge change of the pair (u, model).
    """
    grid = u.grid
    vol = grid.cell_volume
    phases = model.link_phases(grid, eps)
    kin = link_kinetic_form(u.values, phases, eps, grid.spacing)
    m2 = np.abs(u.values) ** 2
    vmass = float((model.V_on(grid) * m2).sum()) * vol
    pot = float((model.K_on(grid) * np.asarray(model.nonlin.F(m2))).sum()) * vol
    return 0.5 * (kin + vmass) - pot


def pde_residual(u: ComplexField3, model: ModelSpec, eps: float):
    """Strong-form residual field of the magnetic equation and its rms.

    Applies the same phased discrete Hamiltonian the solver descends on, so a
    converged solve reports the residual it was actually driven by.  The
    field's A-dependence (the gradient coupling and the divergence term alike)
    rides inside the hop phases, integrated analytically edge by edge.  The
    two-node rim carries the homogeneous Dirichlet data rather than the
    equation, so its rows are reported as zero.
    """
    grid = u.grid
    phases = model.link_phases(grid, eps)
    uv = u.values
    m2 = np.abs(uv) ** 2
    fu = np.asarray(model.nonlin.f(m2)) * uv
    res = (
        apply_link_kinetic(uv, phases, eps, grid.spacing)
        + model.V_on(grid) * uv
        - model.K_on(grid) * fu
    ) * _rim_mask(grid.dims)
    rms = math.sqrt(float(np.mean(np.abs(res) ** 2)))
    return ComplexField3(grid, res), rms


def _default_center(model: ModelSpec, grid: Grid3) -> np.ndarray:
    """Seed center: lattice minimizer of the explicit ground energy.

    Falls back to the box center when the nonlinearity has no explicit
    energy formula.
    """
    origin = np.asarray(grid.origin, dtype=np.float64)
    if not model.nonlin.is_power:
        return origin
    r = 0.5 * grid.half_extent()
    ax = [np.linspace(o - r, o + r, 13) for o in origin]
    Z = np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1).reshape(-1, 3)
    sig, _ = explicit_sigma_and_grad(Z, model)
    # near-ties (constant coefficients being the extreme case) resolve toward
    # the box center, where the seed has the most room
    close = sig <= sig.min() + 1e-12 * abs(sig.min())
    cand = Z[close]
    d2 = ((cand - origin) ** 2).sum(axis=1)
    return cand[int(np.argmin(d2))]


def _seed_field(model: ModelSpec, cfg: MagneticSolveConfig) -> np.ndarray:
    grid = cfg.grid
    if cfg.seed == "frozen":
        c = np.asarray(cfg.center, dtype=np.float64) if cfg.center is not None \
            else _default_center(model, grid)
        point = FrozenPoint.from_model(model, c)
        prof = shoot_radial(point, model.nonlin)
        amp = sample_profile_on_grid(prof, grid, center=c, scale=cfg.eps)
        X = grid.meshgrid()
        Az = model.A_at(c)
        phase = sum(Az[m] * (X[m] - c[m]) for m in range(3)) / cfg.eps
        return amp * np.exp(1j * phase)
    if cfg.seed == "random":
        rng = np.random.default_rng(cfg.rng_seed)
        raw = rng.standard_normal(tuple(grid.dims)) + 1j * rng.standard_normal(tuple(grid.dims))
        # a few diffusion sweeps leave a smooth, box-scale random field
        for _ in range(8):
            for ax in range(3):
                raw = raw + 0.5 * (np.roll(raw, 1, axis=ax) + np.roll(raw, -1, axis=ax) - 2 * raw)
        c = np.asarray(cfg.center, dtype=np.float64) if cfg.center is not None \
            else np.asarray(grid.origin, dtype=np.float64)
        X = grid.meshgrid()
        r2 = sum((X[m] - c[m]) ** 2 for m in range(3))
        # wide enough to be seen by the descent, narrow enough that the
        # envelope tail clears the boundary-mass gate
        half = min(grid.half_extent(k) for k in range(3))
        w = min(max(4.0 * cfg.eps, 6.0 * grid.spacing), 0.2 * half)
        return raw * np.exp(-r2 / (2.0 * w * w))
    snap = read_snapshot(cfg.seed)
    if snap.grid.dims != grid.dims or not np.allclose(snap.grid.spacing, grid.spacing):
        raise SolverError("seed snapshot grid does not match the solve grid")
    return np.asarray(snap.values, dtype=np.complex128)


def solve_magnetic(model: ModelSpec, cfg: MagneticSolveConfig) -> MagneticSolution:
    """Least-energy descent for the magnetic problem.

    Each iteration takes a heavy-ball gradient step of the discrete action and
    rescales the iterate back onto the set where the action's derivative
    against the iterate itself vanishes, so the constraint holds along the
    whole descent path.  Deterministic for a fixed seed policy.

    Raises BoundaryMassError when the seed puts more than 1e-5 of its
    squared-modulus mass on the outermost node shell (the box is then too
    small for the problem), and ConvergenceError (carrying the trace) when
    max_iters runs out.
    """
    if model.V0 is None or model.K0 is None:
        validate_assumptions(model)
    grid, eps = cfg.grid, cfg.eps
    h, vol = grid.spacing, grid.cell_volume
    nonlin = model.nonlin
    Varr = model.V_on(grid)
    Karr = model.K_on(grid)
    phases = model.link_phases(grid, eps)
    mask = _rim_mask(grid.dims)

    seed = _seed_field(model, cfg)
    bm = _mass2_boundary_fraction(seed)
    if bm > 1e-5:
        raise BoundaryMassError(
            f"seed field keeps {bm:.2e} of its mass on the box boundary; enlarge the box"
        )
    u = seed * mask

    def quad(uv):
        kin = link_kinetic_form(uv, phases, eps, h)
        return kin + float((Varr * (uv.real**2 + uv.imag**2)).sum()) * vol

    def pairing(t, m2):
        ft = np.asarray(nonlin.f(t * t * m2))
        return float((Karr * ft * m2).sum()) * vol

    def project(uv):
        Q = quad(uv)
        m2 = uv.real**2 + uv.imag**2
        if Q <= 0.0:
            raise SolverError("quadratic part of the action lost positivity")
        if nonlin.is_power:
            t = (Q / pairing(1.0, m2)) ** (1.0 / (nonlin.p - 1.0))
        else:
            t = brentq(lambda tt: pairing(tt, m2) - Q, 1e-8, 1e8, rtol=1e-15)
        slack = abs(Q - pairing(t, m2)) / Q
        return uv * t, slack, Q * t * t

    p_curv = nonlin.p if nonlin.is_power else 3.0
    vmax = float(Varr.max())
    eta = cfg.step_scale / (18.14 * eps * eps / (h * h) + (1.0 + p_curv) * vmax)
    scale = max(1.0, vmax)
    mom = np.zeros_like(u)
    u, slack, Q = project(u)
    trace: list = []
    rn0 = None
    for it in range(cfg.max_iters):
        m2 = u.real**2 + u.imag**2
        fu = np.asarray(nonlin.f(m2)) * u
        res = (apply_link_kinetic(u, phases, eps, h) + Varr * u - Karr * fu) * mask
        rn = math.sqrt(float(np.mean(np.abs(res) ** 2)))
        un = math.sqrt(float(np.mean(m2)))
        J = 0.5 * Q - float((Karr * np.asarray(nonlin.F(m2))).sum()) * vol
        trace.append({"iter": it, "energy": J, "residual": rn, "nehari_slack": slack})
        if not math.isfinite(J):
            raise ConvergenceError("magnetic descent diverged to a non-finite energy", trace)
        if rn0 is None:
            rn0 = rn
        elif rn > 1e3 * rn0:
            raise ConvergenceError("magnetic descent residual grew out of control", trace)
        if rn <= cfg.tol * scale * un:
            _warn_if_pinned(u)
            sol_u = ComplexField3(grid, u)
            return MagneticSolution(
                u=sol_u,
                eps=eps,
                energy_J=J,
                scaled_energy=J / eps**3,
                residual_rms=rn,
                nehari_slack=slack,
                spike=_spike_location(sol_u),
                scaled_mass=float(m2.sum()) * vol / eps**3,
                iterations=it,
                trace=trace,
            )
        if float(np.real(np.vdot(mom, res))) < 0.0:
            mom[:] = 0.0
        mom = cfg.beta * mom + res
        u = (u - eta * mom) * mask
        u, slack, Q = project(u)
    raise ConvergenceError(
        f"magnetic solve did not reach tol={cfg.tol} in {cfg.max_iters} iterations", trace
    )


def solve_frozen_magnetic(z, model: ModelSpec, grid: Grid3, **cfg_kwargs) -> MagneticSolution:
    """Solve the constant-coefficient magnetic problem frozen at z.

    The coefficients (including the now-constant vector potential) are pinned
    to their values at z and the problem is posed at unit semiclassical
    parameter on the given box, seeded at the box center.
    """
    frozen = frozen_model_at(z, model)
    kwargs = {"eps": 1.0, "grid": grid, "center": tuple(grid.origin), "seed": "frozen"}
    kwargs.update(cfg_kwargs)
    cfg = MagneticSolveConfig(**kwargs)
    return solve_magnetic(frozen, cfg)


def rescale(sol: MagneticSolution, z0) -> ComplexField3:
    """Blow-up view v(x) = u(z0 + eps x) on a unit-scale box.

    The target box is the largest cube around z0 whose image stays inside the
    source box; values come from trilinear interpolation, which reduces to an
    exact copy when eps = 1 and z0 is the source box center.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    src = sol.u.grid
    origin = np.asarray(src.origin, dtype=np.float64)
    half = np.array([src.half_extent(k) for k in range(3)])
    room = half - np.abs(z0 - origin)
    if np.any(room <= 0):
        raise SolverError("rescale center sits outside the source box")
    radius = float(room.min()) / sol.eps
    n = int(src.dims[0])
    target = make_grid(radius=radius, n=n)
    ax = [np.linspace(-radius, radius, n)] * 3
    X = np.meshgrid(*ax, indexing="ij")
    coords = [
        (z0[k] + sol.eps * X[k] - (origin[k] - half[k])) / src.spacing for k in range(3)
    ]
    coords = np.stack(coords)
    re = map_coordinates(sol.u.values.real, coords, order=3, mode="nearest")
    im = map_coordinates(sol.u.values.imag, coords, order=3, mode="nearest")
    return ComplexField3(target, re + 1j * im)


def rescaled_model(model: ModelSpec, z0, eps: float) -> ModelSpec:
    """Model with coefficients read at z0 + eps x, as the blow-up view sees them."""
    from .model import expr_to_str, subs_affine

    z0 = np.asarray(z0, dtype=np.float64)

    def sub(expr: PotentialExpr) -> PotentialExpr:
        root = subs_affine(expr.root, z0, eps)
        return PotentialExpr(expr_to_str(root), root)

    return ModelSpec(
        V=sub(model.V),
        K=sub(model.K),
        A=tuple(sub(a) for a in model.A),
        nonlin=model.nonlin,
        V0=model.V0,
        K0=model.K0,
    )


def phase_factor_split(v: ComplexField3, z, model: ModelSpec) -> PhaseSplit:
    """Split v into the linear magnetic phase at z and the remaining profile.

    Returns U = exp(-i sum_j A_j(z) x_j) v together with the constant phase
    omega read at the modulus argmax and the residual imaginary fraction of
    exp(-i omega) U (largest |imaginary part| over the grid divided by the
    largest modulus).
    """
    Az = model.A_at(np.asarray(z, dtype=np.float64))
    X = v.grid.meshgrid()
    ups = sum(Az[m] * X[m] for m in range(3))
    Uv = v.values * np.exp(-1j * ups)
    mod = np.abs(Uv)
    idx = np.unravel_index(int(np.argmax(mod)), mod.shape)
    peak = mod[idx]
    if peak == 0.0:
        raise SolverError("phase split needs a nonzero field")
    omega = float(np.angle(Uv[idx]))
    resid = np.abs(np.imag(Uv * np.exp(-1j * omega)))
    return PhaseSplit(ComplexField3(v.grid, Uv), omega, float(resid.max() / peak))
