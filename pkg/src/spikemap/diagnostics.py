"""Identity checks for computed solutions.

Every check here is a necessary condition a true solution family satisfies:
the diamagnetic pointwise bound, the vanishing current density of least-energy
profiles, the translation-test integral identity and its limit form, the
exponential decay rate, the one-sided derivatives of the ground-energy map,
Clarke criticality of candidate spike points, and the two concentration
metrics.  Nothing in this module solves anything; it consumes fields and
models produced elsewhere and reports residuals with their denominators, so a
caller can tell "small because it holds" from "small because everything is".
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fields import (
    BoundaryMassWarning,
    ComplexField3,
    VectorField3,
    boundary_mass,
    gradient,
)
from .frozen_solver import (
    FrozenPoint,
    profile_moments,
    shoot_radial,
    sigma_r,
    sigma_r_explicit,
)
from .magnetic_solver import (
    BoundaryMassError,
    MagneticSolution,
    phase_factor_split,
    rescale,
)
from .model import ModelSpec


class DiagnosticsError(Exception):
    """A check was asked to run on data it cannot use."""


# ---------------------------------------------------------------------------
# pointwise inequalities and the current density

def diamagnetic_check(u: ComplexField3, model: ModelSpec, eps: float) -> float:
    """Minimum over interior nodes of |D^eps u| - eps |grad |u||.

    The modulus of a field never carries more kinetic density than the field
    itself, so this is nonnegative for anything living in the right space;
    values below about -1e-10 mean the input is not a valid field.  Both
    sides use the same forward hop per axis, the covariant one phased by the
    edge line integral of A.  Since the hop phase is unimodular,
    |phase * u(x+h) - u(x)| >= ||u(x+h)| - |u(x)|| node by node, so the
    discrete slack inherits the pointwise inequality exactly instead of
    holding only up to central-stencil error, and it is identically zero for
    real fields without a vector potential.
    """
    grid = u.grid
    h = grid.spacing
    phases = model.link_phases(grid, eps)
    cov2 = np.zeros(tuple(d - 1 for d in grid.dims))
    mod2 = np.zeros_like(cov2)
    mag = np.abs(u.values)
    core = tuple(slice(0, d - 1) for d in grid.dims)
    for m in range(3):
        up = [slice(0, d - 1) for d in grid.dims]
        up[m] = slice(1, grid.dims[m])
        hop = phases.ph[m][0][core] * u.values[tuple(up)] - u.values[core]
        dm = mag[tuple(up)] - mag[core]
        cov2 += np.abs(hop) ** 2
        mod2 += dm * dm
    slack = (eps / h) * (np.sqrt(cov2) - np.sqrt(mod2))
    return float(slack.min())


def current_density(U: ComplexField3):
    """Re(i conj(U) grad U) and its sup norm over sup|U| sup|grad U|.

    Least-energy profiles carry no current, so the normalized norm is a
    directly testable smallness certificate for a computed candidate.
    """
    g = gradient(U).values
    J = np.real(1j * np.conj(U.values)[None, ...] * g)
    sup_J = float(np.sqrt(np.sum(J**2, axis=0)).max())
    denom = float(np.abs(U.values).max()) * float(np.sqrt(np.sum(np.abs(g) ** 2, axis=0)).max())
    norm = sup_J / denom if denom > 0.0 else 0.0
    return VectorField3(U.grid, J), norm


# ---------------------------------------------------------------------------
# translation-test identities

def _l1_boundary_fraction(values: np.ndarray) -> float:
    total = float(np.abs(values).sum())
    if total == 0.0:
        return 0.0
    return boundary_mass(values) / total


def _grad4(arr: np.ndarray, h: float) -> list[np.ndarray]:
    """Fourth-order central differences along each axis.

    The current density is the only second-order-limited piece of the
    translation test, and it is what caps the residual's refinement rate,
    so it gets the wider stencil.  The two-node border is filled from the
    ordinary second-order formula; the fields this is applied to are
    rim-masked, so those nodes are zeros anyway.
    """
    out = []
    for ax in range(3):
        g4 = (
            -np.roll(arr, -2, axis=ax)
            + 8.0 * np.roll(arr, -1, axis=ax)
            - 8.0 * np.roll(arr, 1, axis=ax)
            + np.roll(arr, 2, axis=ax)
        ) / (12.0 * h)
        g2 = np.gradient(arr, h, axis=ax, edge_order=2)
        sl = [slice(None)] * 3
        for border in (slice(0, 2), slice(-2, None)):
            sl[ax] = border
            g4[tuple(sl)] = g2[tuple(sl)]
        out.append(g4)
    return out


def pucci_serrin_residual(v: ComplexField3, z0, eps: float, model: ModelSpec):
    """Translation-test residual of the blow-up field v around z0.

    For each coordinate direction k the integral

        int [ <d_k A, A> |v|^2 - Re<(1/i) grad v, (d_k A) conj(v)>
              + d_k V |v|^2 / 2 - d_k K F(|v|^2) ] dx

    vanishes on true solutions of the unit-scale equation; all coefficients
    and their analytic derivatives are read at z0 + eps x.  Returns the
    3-vector of integrals and a relative scale: its norm divided by the sum
    of the absolute values of the four constituent terms (zero when every
    term vanishes, as for constant coefficients).

    Warns when the box boundary carries more than 1e-5 of the field's mass
    and refuses above 1e-3.  The truncation bias of the integrals is of the
    order of that boundary fraction, so 1e-3 keeps it well under the 1e-2
    scale this residual is judged against, while still rejecting fields
    whose tail never fit in the box.
    """
    frac = _l1_boundary_fraction(v.values)
    if frac > 1e-3:
        raise BoundaryMassError(
            f"blow-up field keeps {frac:.2e} of its mass on the box boundary"
        )
    if frac > 1e-5:
        import warnings

        warnings.warn(
            "boundary shell holds more than 1e-5 of the blow-up field; "
            "the residual integrals are truncated",
            BoundaryMassWarning,
            stacklevel=2,
        )
    grid = v.grid
    vol = grid.cell_volume
    z0 = np.asarray(z0, dtype=np.float64)
    Q = z0 + eps * np.stack(grid.meshgrid(), axis=-1)
    _, gV = model.V_and_grad(Q)
    _, gK = model.K_and_grad(Q)
    Av = model.A_at(Q)
    Aj = model.A_jacobian(Q)
    g = _grad4(v.values, grid.spacing)
    m2 = np.abs(v.values) ** 2
    Fv = np.asarray(model.nonlin.F(m2), dtype=np.float64)
    cur = np.stack([np.imag(g[m] * np.conj(v.values)) for m in range(3)], axis=-1)
    t1 = np.einsum("abcmk,abcm,abc->k", Aj, Av, m2) * vol
    t2 = np.einsum("abcmk,abcm->k", Aj, cur) * vol
    t3 = 0.5 * np.einsum("abck,abc->k", gV, m2) * vol
    t4 = np.einsum("abck,abc->k", gK, Fv) * vol
    res = t1 - t2 + t3 - t4
    scale = float(np.abs(t1).sum() + np.abs(t2).sum() + np.abs(t3).sum() + np.abs(t4).sum())
    rel = float(np.linalg.norm(res)) / scale if scale > 0.0 else 0.0
    return res, rel


def limit_identity_residual(U: ComplexField3, z0, model: ModelSpec):
    """Limit form of the translation test: coefficients read at z0 alone.

    res_k = <d_k A(z0), int Re(i conj(U) grad U)>
            + d_k V(z0) int |U|^2 / 2 - d_k K(z0) int F(|U|^2),

    reported with the same relative-scale convention as the blow-up form.
    For a real profile the current vanishes and the residual is exactly the
    gradient of the explicit ground-energy map, which is what ties spike
    locations to the critical points of that map.
    """
    grid = U.grid
    vol = grid.cell_volume
    z0 = np.asarray(z0, dtype=np.float64)
    Jfield, _ = current_density(U)
    Jvec = Jfield.values.reshape(3, -1).sum(axis=1) * vol
    m2 = np.abs(U.values) ** 2
    mass = float(m2.sum()) * vol
    intF = float(np.asarray(model.nonlin.F(m2), dtype=np.float64).sum()) * vol
    Aj = model.A_jacobian(z0)
    _, gV = model.V_and_grad(z0)
    _, gK = model.K_and_grad(z0)
    tA = Aj.T @ Jvec
    tV = 0.5 * gV * mass
    tK = gK * intF
    res = tA + tV - tK
    scale = float(np.abs(tA).sum() + np.abs(tV).sum() + np.abs(tK).sum())
    rel = float(np.linalg.norm(res)) / scale if scale > 0.0 else 0.0
    return res, rel


# ---------------------------------------------------------------------------
# decay

@dataclass
class DecayFit:
    """Exponential rates fitted to shell maxima of |u|.

    rate is the raw slope of log |u|; corrected_rate is the slope of
    log(r |u|), which removes the 1/r geometry factor of three-dimensional
    decay and is the number to compare against sqrt(V).
    """

    rate: float
    corrected_rate: float
    window: tuple
    n_points: int


def decay_fit(u, window) -> DecayFit:
    """Least-squares decay rates of a field or radial profile over [r1, r2].

    Fields are reduced to shell maxima around the grid origin first (the
    bound being certified is sup-type).  Shells with maxima at or below
    1e-12 are dropped; an empty window raises.
    """
    r1, r2 = float(window[0]), float(window[1])
    if hasattr(u, "grid"):
        grid = u.grid
        h = grid.spacing
        X = grid.meshgrid()
        o = grid.origin
        rr = np.sqrt(sum((X[m] - o[m]) ** 2 for m in range(3)))
        idx = np.rint(rr / h).astype(np.int64).ravel()
        mag = np.abs(u.values).ravel()
        sup = np.zeros(int(idx.max()) + 1)
        np.maximum.at(sup, idx, mag)
        radii = h * np.arange(sup.size)
    else:
        radii = np.asarray(u.r, dtype=np.float64)
        sup = np.abs(np.asarray(u.u, dtype=np.float64))
    keep = (radii >= r1) & (radii <= r2) & (sup > 1e-12) & (radii > 0)
    if int(keep.sum()) < 2:
        raise DiagnosticsError(f"decay window [{r1}, {r2}] selects fewer than two shells")
    r = radii[keep]
    y = np.log(sup[keep])
    rate = -float(np.polyfit(r, y, 1)[0])
    corrected = -float(np.polyfit(r, y + np.log(r), 1)[0])
    return DecayFit(rate=rate, corrected_rate=corrected, window=(r1, r2), n_points=int(keep.sum()))


# ---------------------------------------------------------------------------
# the ground-energy map seen from one point

def directional_derivative_sigma(z, w, model: ModelSpec):
    """One-sided derivatives of the ground-energy map along w.

    Both sides are the same envelope bracket evaluated on the computed ground
    state (the solution set the code can exhibit is a singleton, so sup and
    inf coincide; a genuine multiplicity would split them).  Returns
    (left, right) with left >= right.
    """
    z = np.asarray(z, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    point = FrozenPoint.from_model(model, z)
    prof = shoot_radial(point, model.nonlin)
    mom = profile_moments(prof, model.nonlin)
    _, gV = model.V_and_grad(z)
    _, gK = model.K_and_grad(z)
    b = float(gV @ w) * mom["mass2"] / 2.0 - float(gK @ w) * mom["intF"]
    return b, b


@dataclass
class ProbeSpec:
    """Sampling plan for the generalized directional derivative.

    Difference quotients (sigma(xi + lam w) - sigma(xi)) / lam are taken for
    xi in {z, z - rho w, z + rho w} and lam on a shrinking ladder, over a
    direction net of the 26 lattice directions plus n_random seeded unit
    vectors.  sigma overrides the evaluator (signature (m, 3) -> (m,)); by
    default the explicit formula is used for power nonlinearities and the
    shooting solver otherwise.
    """

    rho: float = 1e-3
    lambdas: tuple = (1e-3, 5e-4, 2.5e-4)
    n_random: int = 50
    rng_seed: int = 0
    kappa: float = 3.0
    sigma: object = None


@dataclass
class ClarkeVerdict:
    member: bool
    margin: float
    threshold: float
    grad_norm: float | None
    directions: int


def _direction_net(probe: ProbeSpec) -> np.ndarray:
    axes = [-1.0, 0.0, 1.0]
    dirs = []
    for a in axes:
        for b in axes:
            for c in axes:
                if a == b == c == 0.0:
                    continue
                v = np.array([a, b, c])
                dirs.append(v / np.linalg.norm(v))
    if probe.n_random > 0:
        rng = np.random.default_rng(probe.rng_seed)
        raw = rng.standard_normal((probe.n_random, 3))
        dirs.extend(raw / np.linalg.norm(raw, axis=1, keepdims=True))
    return np.asarray(dirs)


def _sigma_evaluator(model: ModelSpec, probe: ProbeSpec):
    if probe.sigma is not None:
        return probe.sigma
    if model.nonlin.is_power:
        from .frozen_solver import explicit_sigma_and_grad

        return lambda pts: explicit_sigma_and_grad(pts, model)[0]

    def by_shooting(pts):
        out = np.empty(len(pts))
        for i, p in enumerate(pts):
            out[i] = sigma_r(FrozenPoint.from_model(model, p), model.nonlin).sigma
        return out

    return by_shooting


def clarke_critical_test(z, model: ModelSpec, probe: ProbeSpec | None = None) -> ClarkeVerdict:
    """Sampled test of 0 being a generalized gradient of the energy map at z.

    The membership margin is the worst direction's best difference quotient;
    membership requires it to clear a noise threshold proportional to the
    probe radii times a sampled curvature scale.  For power nonlinearities
    the exact gradient norm rides along as grad_norm, so the smooth verdict
    can be compared against the sampled one.
    """
    probe = probe if probe is not None else ProbeSpec()
    z = np.asarray(z, dtype=np.float64)
    dirs = _direction_net(probe)
    ev = _sigma_evaluator(model, probe)
    nd = len(dirs)
    offs = np.array([0.0, -probe.rho, probe.rho])
    xi = z[None, None, :] + offs[None, :, None] * dirs[:, None, :]
    lams = np.asarray(probe.lambdas)
    tips = xi[:, :, None, :] + lams[None, None, :, None] * dirs[:, None, None, :]
    base = ev(xi.reshape(-1, 3)).reshape(nd, 3)
    tip = ev(tips.reshape(-1, 3)).reshape(nd, 3, lams.size)
    quot = (tip - base[:, :, None]) / lams[None, None, :]
    per_dir = quot.reshape(nd, -1).max(axis=1)
    margin = float(per_dir.min())
    # curvature scale from the lambda ladder at fixed xi: zero for piecewise
    # linear kinks (where the quotients are exact), Hessian-sized for smooth
    # sheets (where they carry an O(rho + lambda) bias)
    span = float(lams.max() - lams.min())
    if span > 0.0:
        curv = float((quot.max(axis=2) - quot.min(axis=2)).max()) / span
    else:
        curv = 0.0
    threshold = probe.kappa * (probe.rho + lams.max()) * curv + 1e-12
    grad_norm = None
    if probe.sigma is None and model.nonlin.is_power:
        gn = sigma_r_explicit(z, model).grad_sigma
        grad_norm = float(np.linalg.norm(gn))
    return ClarkeVerdict(
        member=bool(margin >= -threshold),
        margin=margin,
        threshold=threshold,
        grad_norm=grad_norm,
        directions=nd,
    )


def gamma_pm(z, w, model: ModelSpec, solutions):
    """Upper and lower energy-variation bounds over a set of solutions at z.

    For each candidate field the bracket

        <dA/dw (z), int Re(i conj(U) grad U)> + d_w V(z) int |U|^2 / 2
            - d_w K(z) int F(|U|^2)

    is evaluated on its phase-split profile U; the result is (sup, inf).
    Constant phase changes leave the bracket invariant, so a phase orbit
    collapses both bounds to one number.
    """
    if not solutions:
        raise DiagnosticsError("gamma bounds need at least one solution at z")
    z = np.asarray(z, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    Aj = model.A_jacobian(z)
    dAw = Aj @ w
    _, gV = model.V_and_grad(z)
    _, gK = model.K_and_grad(z)
    vals = []
    for v in solutions:
        U = phase_factor_split(v, z, model).U
        vol = U.grid.cell_volume
        Jfield, _ = current_density(U)
        Jvec = Jfield.values.reshape(3, -1).sum(axis=1) * vol
        m2 = np.abs(U.values) ** 2
        mass = float(m2.sum()) * vol
        intF = float(np.asarray(model.nonlin.F(m2), dtype=np.float64).sum()) * vol
        vals.append(float(dAw @ Jvec) + float(gV @ w) * mass / 2.0 - float(gK @ w) * intF)
    return max(vals), min(vals)


# ---------------------------------------------------------------------------
# concentration metrics

@dataclass
class ConcentrationStudy:
    """Per-epsilon concentration readings for a solution family.

    tails[i] maps each ladder ratio rho to sup |u| outside the ball of
    radius eps_i * rho around the target; fixed_tails[i] uses the radii of
    the largest epsilon for every member, which is what must decay for the
    target to be a concentration point.
    """

    eps_list: list
    spikes: list
    scaled_energies: list
    target_z: tuple
    sigma_at_target: float
    pointwise: list = field(default_factory=list)
    tails: list = field(default_factory=list)
    fixed_tails: list = field(default_factory=list)
    energy_gaps: list = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        if not all(a > b for a, b in zip(self.eps_list, self.eps_list[1:])):
            raise DiagnosticsError("eps_list must be strictly decreasing")
        if len(self.spikes) != len(self.eps_list):
            raise DiagnosticsError("one spike per eps is required")


_RHO_LADDER = (4.0, 6.0, 8.0, 10.0)


def _value_at(u: ComplexField3, x) -> float:
    from scipy.ndimage import map_coordinates

    grid = u.grid
    x = np.asarray(x, dtype=np.float64)
    lo = np.array([grid.axis(k)[0] for k in range(3)])
    c = ((x - lo) / grid.spacing).reshape(3, 1)
    re = map_coordinates(u.values.real, c, order=1, mode="nearest")
    im = map_coordinates(u.values.imag, c, order=1, mode="nearest")
    return float(np.hypot(re, im)[0])


def concentration_metrics(family, z0, model: ModelSpec) -> ConcentrationStudy:
    """Empirical pointwise and energetic concentration readings at z0.

    family is a list of solutions sorted by strictly decreasing eps.  For
    each member: spike location, |u(z0)|, tail suprema outside eps*rho and
    fixed-radius balls, and the gap between the scaled energy and the ground
    energy at z0.  The notes summarize whether the diagnostic trends point
    toward concentration at z0.
    """
    eps_list = [s.eps for s in family]
    z0 = np.asarray(z0, dtype=np.float64)
    point = FrozenPoint.from_model(model, z0)
    if model.nonlin.is_power:
        sig = sigma_r_explicit(z0, model).sigma
    else:
        sig = sigma_r(point, model.nonlin).sigma
    spikes, pointwise, tails, fixed, gaps = [], [], [], [], []
    fixed_radii = [eps_list[0] * rho for rho in _RHO_LADDER]
    for s in family:
        spikes.append(np.asarray(s.spike, dtype=np.float64))
        pointwise.append(_value_at(s.u, z0))
        X = s.u.grid.meshgrid()
        dist = np.sqrt(sum((X[m] - z0[m]) ** 2 for m in range(3)))
        mag = np.abs(s.u.values)

        def sup_outside(radius):
            out = mag[dist >= radius]
            return float(out.max()) if out.size else 0.0

        tails.append({rho: sup_outside(s.eps * rho) for rho in _RHO_LADDER})
        fixed.append({rad: sup_outside(rad) for rad in fixed_radii})
        gaps.append(abs(s.scaled_energy - sig))
    fixed_dec = all(
        all(b[rad] <= a[rad] + 1e-12 for rad in fixed_radii)
        for a, b in zip(fixed, fixed[1:])
    )
    notes = {
        "fixed_tails_decreasing": fixed_dec,
        "pointwise_bounded_away": bool(min(pointwise) > 0.5 * max(pointwise)),
        "energy_gap_final": gaps[-1] if gaps else float("nan"),
    }
    return ConcentrationStudy(
        eps_list=eps_list,
        spikes=spikes,
        scaled_energies=[s.scaled_energy for s in family],
        target_z=tuple(float(c) for c in z0),
        sigma_at_target=float(sig),
        pointwise=pointwise,
        tails=tails,
        fixed_tails=fixed,
        energy_gaps=gaps,
        notes=notes,
    )


# ---------------------------------------------------------------------------
# the aggregate report

@dataclass
class DiagnosticsReport:
    """One solution's identity residuals, with denominators in notes."""

    diamagnetic_slack_min: float
    current_density_norm: float
    pucci_serrin: tuple
    decay_rate_fit: tuple
    nehari_slack: float
    notes: dict


def _shell_fwhm(v: ComplexField3) -> float:
    mag = np.abs(v.values)
    h = v.grid.spacing
    X = v.grid.meshgrid()
    o = v.grid.origin
    rr = np.sqrt(sum((X[m] - o[m]) ** 2 for m in range(3)))
    idx = np.rint(rr / h).astype(np.int64).ravel()
    sup = np.zeros(int(idx.max()) + 1)
    np.maximum.at(sup, idx, mag.ravel())
    peak = sup.max()
    below = np.where(sup < 0.5 * peak)[0]
    j = int(below[below > int(np.argmax(sup))][0]) if below.size else sup.size - 1
    return 2.0 * h * j


def run_diagnostics(sol: MagneticSolution, model: ModelSpec, window=None) -> DiagnosticsReport:
    """Assemble the standard report for one converged magnetic solution.

    The field is blown up around its spike, phase-split there, and pushed
    through every identity check.  The decay window defaults to starting at
    twice the blow-up profile's width and ending just inside the box.
    """
    z0 = tuple(float(c) for c in sol.spike)
    dia = diamagnetic_check(sol.u, model, sol.eps)
    v = rescale(sol, z0)
    split = phase_factor_split(v, z0, model)
    _, cnorm = current_density(split.U)
    ps_vec, ps_rel = pucci_serrin_residual(v, z0, sol.eps, model)
    if window is None:
        r_box = float(v.grid.half_extent())
        window = (2.0 * _shell_fwhm(v), 0.8 * r_box)
    fit = decay_fit(v, window)
    g = gradient(split.U).values
    notes = {
        "pucci_serrin_terms_sum": (
            float(np.linalg.norm(ps_vec)) / ps_rel if ps_rel > 0.0 else 0.0
        ),
        "current_density_denominator": float(np.abs(split.U.values).max())
        * float(np.sqrt(np.sum(np.abs(g) ** 2, axis=0)).max()),
        "decay_points": fit.n_points,
        "phase_imag_fraction": split.imag_fraction,
    }
    return DiagnosticsReport(
        diamagnetic_slack_min=dia,
        current_density_norm=cnorm,
        pucci_serrin=(ps_vec, ps_rel),
        decay_rate_fit=(fit.corrected_rate, fit.window),
        nehari_slack=sol.nehari_slack,
        notes=notes,
    )
