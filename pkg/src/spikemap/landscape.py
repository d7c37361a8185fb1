"""Sweeps of the ground-energy map and the candidate spike sets.

The map z -> Sigma(z) is scalar and cheap for power nonlinearities (explicit
formula) and a shooting solve per point otherwise.  Everything else in this
module is root finding on top of it: the Clarke-critical set S, the algebraic
set S_p, the weak-concentration set S*, the critical points of K, and the
drift study that tracks dist(S_p, Crit K) as p approaches 5.
"""

from __future__ import annotations

import csv
import json
import os
import pickle
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .diagnostics import ProbeSpec, _direction_net, clarke_critical_test, gamma_pm
from .frozen_solver import (
    FrozenPoint,
    GroundEnergySample,
    explicit_sigma_and_grad,
    profile_moments,
    shoot_radial,
    sigma_r,
)
from .model import ModelSpec


class LandscapeError(Exception):
    """A sweep or root search was asked for something it cannot do."""


def _as_region(region) -> np.ndarray:
    r = np.asarray(region, dtype=np.float64)
    if r.shape != (3, 2):
        raise LandscapeError("region must be three (lo, hi) pairs")
    if not np.all(r[:, 1] > r[:, 0]):
        raise LandscapeError("region bounds need lo < hi on every axis")
    return r


def _as_resolution(resolution) -> tuple:
    if np.isscalar(resolution):
        resolution = (resolution, resolution, resolution)
    res = tuple(int(n) for n in resolution)
    if len(res) != 3 or min(res) < 1:
        raise LandscapeError("resolution must be three positive counts")
    return res


def _lattice(region: np.ndarray, res: tuple):
    axes = [np.linspace(region[k, 0], region[k, 1], res[k]) for k in range(3)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    return axes, pts


@dataclass
class GroundEnergyMap:
    """Sigma sampled on a rectangular lattice, row-major over the axes.

    failures lists (lattice index, message) pairs for samples whose solve
    failed; those samples carry sigma = nan and stay in place so the lattice
    shape survives.
    """

    region: tuple
    resolution: tuple
    samples: list
    failures: list = field(default_factory=list)

    def __post_init__(self):
        want = int(np.prod(self.resolution))
        if len(self.samples) != want:
            raise LandscapeError(
                f"lattice of {self.resolution} needs {want} samples, got {len(self.samples)}"
            )
        for s in self.samples:
            if np.isfinite(s.sigma) and s.sigma <= 0.0:
                raise LandscapeError(f"ground energy must be positive, got {s.sigma} at {s.z}")

    def points(self) -> np.ndarray:
        return np.stack([s.z for s in self.samples])

    def sigma_lattice(self) -> np.ndarray:
        return np.array([s.sigma for s in self.samples]).reshape(self.resolution)

    def grad_lattice(self) -> np.ndarray:
        rows = [
            s.grad_sigma if s.grad_sigma is not None else (np.nan, np.nan, np.nan)
            for s in self.samples
        ]
        return np.asarray(rows, dtype=np.float64).reshape(self.resolution + (3,))


def _shoot_sample(task):
    z, model, n = task
    try:
        s = sigma_r(FrozenPoint.from_model(model, z), model.nonlin, n=n)
        return ("ok", float(s.sigma), np.asarray(s.grad_sigma, dtype=np.float64))
    except Exception as exc:
        return ("err", f"{type(exc).__name__}: {exc}", None)


def _worker_count() -> int:
    raw = os.environ.get("SPIKEMAP_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise LandscapeError(f"SPIKEMAP_WORKERS must be an integer, got {raw!r}") from None


def sweep_sigma(region, resolution, model: ModelSpec, n_shoot: int = 4000) -> GroundEnergyMap:
    """Sample the ground-energy map over a lattice.

    Power nonlinearities go through the explicit formula in one vectorized
    call.  Anything else is one shooting solve per lattice point, fanned out
    over SPIKEMAP_WORKERS processes when that is set above 1 (models that do
    not pickle fall back to serial); results are aggregated in lattice order
    either way, so the output does not depend on the worker count.  n_shoot
    is the radial step count for the shooting path.
    """
    reg = _as_region(region)
    res = _as_resolution(resolution)
    _, pts = _lattice(reg, res)
    region_t = tuple((float(lo), float(hi)) for lo, hi in reg)

    if model.nonlin.is_power:
        sig, grad = explicit_sigma_and_grad(pts, model)
        samples = [
            GroundEnergySample(pts[i], float(sig[i]), np.asarray(grad[i]), "explicit")
            for i in range(len(pts))
        ]
        return GroundEnergyMap(region_t, res, samples)

    tasks = [(pts[i], model, int(n_shoot)) for i in range(len(pts))]
    workers = _worker_count()
    if workers > 1:
        try:
            pickle.dumps(model)
        except Exception:
            workers = 1
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_shoot_sample, tasks, chunksize=max(1, len(tasks) // (4 * workers))))
    else:
        results = [_shoot_sample(t) for t in tasks]
    samples, failures = [], []
    for i, (tag, payload, grad) in enumerate(results):
        if tag == "ok":
            samples.append(GroundEnergySample(pts[i], payload, grad, "shooting"))
        else:
            failures.append((i, payload))
            samples.append(GroundEnergySample(pts[i], float("nan"), None, "failed"))
    return GroundEnergyMap(region_t, res, samples, failures)


@dataclass
class CriticalSetResult:
    """Accepted roots of one of the candidate-set conditions.

    kind is one of S, Sp, Sstar, CritK.  residuals holds the acceptance
    measure per point (gradient norm, scaled |G|, or worst bracket margin).
    degenerate flags regions where the condition holds everywhere, in which
    case points stays empty rather than listing the lattice.  notes records
    dropped seeds and rejected candidates.
    """

    kind: str
    points: list
    residuals: list
    p: float | None = None
    degenerate: bool = False
    method: str = ""
    notes: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("S", "Sp", "Sstar", "CritK"):
            raise LandscapeError(f"unknown critical-set kind {self.kind!r}")
        if len(self.points) != len(self.residuals):
            raise LandscapeError("one residual per point is required")


def _in_region(z: np.ndarray, reg: np.ndarray, span: float) -> bool:
    """Whether z lies in the region box, up to a hairline boundary margin."""
    if not np.all(np.isfinite(z)):
        return False
    overshoot = float(np.linalg.norm(z - np.clip(z, reg[:, 0], reg[:, 1])))
    return overshoot <= 1e-9 + 1e-6 * span


def _fd_jacobian(grad_fn, z: np.ndarray) -> np.ndarray:
    d = 1e-6 * (1.0 + float(np.abs(z).max()))
    cols = []
    for k in range(3):
        e = np.zeros(3)
        e[k] = d
        cols.append((np.asarray(grad_fn(z + e)) - np.asarray(grad_fn(z - e))) / (2.0 * d))
    return np.stack(cols, axis=-1)


def _newton(grad_fn, z0, span: float, max_iter: int = 40):
    """Damped Newton on a 3-vector field, Jacobian by differencing grad_fn.

    Returns (z, |grad_fn(z)|, clean).  clean goes False when the iteration
    ended for a structural reason: a singular or vanishing Jacobian, a
    non-finite value, or an iterate running more than 10 spans from its
    seed.  Flat tails of decaying coefficients produce tiny gradients over
    huge sets, and there Newton stalls rather than converges; the flag is
    what lets callers tell a root from a stall, since the gradient norm
    alone cannot.
    """
    z = np.asarray(z0, dtype=np.float64).copy()
    g = np.asarray(grad_fn(z), dtype=np.float64)
    for _ in range(max_iter):
        gn = float(np.linalg.norm(g))
        if not np.isfinite(gn):
            return z, gn, False
        if gn == 0.0:
            break
        jac = _fd_jacobian(grad_fn, z)
        try:
            step = np.linalg.solve(jac, g)
        except np.linalg.LinAlgError:
            return z, gn, False
        if not np.all(np.isfinite(step)) or float(np.linalg.norm(step)) > 10.0 * span:
            return z, gn, False
        t = 1.0
        zn, gnew = z, g
        for _ in range(12):
            zn = z - t * step
            gnew = np.asarray(grad_fn(zn), dtype=np.float64)
            if float(np.linalg.norm(gnew)) <= gn or t < 1e-3:
                break
            t *= 0.5
        z, g = zn, gnew
        if float(np.linalg.norm(z - np.asarray(z0))) > 10.0 * span:
            return z, float(np.linalg.norm(g)), False
    return z, float(np.linalg.norm(g)), True


def _lattice_minima(values: np.ndarray) -> np.ndarray:
    """Flat indices of nodes not exceeded by any of their six neighbors."""
    pad = np.pad(values, 1, mode="constant", constant_values=np.inf)
    ok = np.isfinite(values)
    for ax in range(3):
        for shift in (0, 2):
            sl = [slice(1, -1)] * 3
            sl[ax] = slice(shift, pad.shape[ax] - 2 + shift)
            ok &= values <= pad[tuple(sl)]
    return np.flatnonzero(ok.ravel())


def _dedupe(points, residuals, tol: float = 1e-6):
    kept_p, kept_r = [], []
    for z, r in zip(points, residuals):
        if all(float(np.linalg.norm(z - q)) > tol for q in kept_p):
            kept_p.append(z)
            kept_r.append(r)
    return kept_p, kept_r


def find_S(emap: GroundEnergyMap, model: ModelSpec, probe: ProbeSpec | None = None) -> CriticalSetResult:
    """Critical points of the ground-energy map in the Clarke sense.

    Power case: Newton on the analytic gradient, seeded from lattice minima
    of |grad Sigma|, accepted at |grad Sigma| < 1e-8.  Other nonlinearities:
    the sampled generalized-gradient test at lattice minima of Sigma itself
    (probe forwards a sampling plan to it).  A map whose sampled gradient
    never leaves rounding noise is reported as degenerate: every point is
    critical and a list would be meaningless.
    """
    sig = emap.sigma_lattice()
    grads = emap.grad_lattice()
    gnorm = np.sqrt(np.sum(grads**2, axis=-1))
    scale = float(np.nanmax(np.abs(sig))) if np.isfinite(sig).any() else 1.0
    if np.isfinite(gnorm).any() and np.nanmax(gnorm) <= 1e-12 * max(1.0, scale):
        return CriticalSetResult(
            kind="S",
            points=[],
            residuals=[],
            degenerate=True,
            method="degenerate",
            notes=["sigma is constant over the sweep region"],
        )
    pts = emap.points()
    span = float(np.linalg.norm([hi - lo for lo, hi in emap.region]))
    notes = []

    if model.nonlin.is_power:
        seeds = _lattice_minima(gnorm)
        if seeds.size > 200:
            order = np.argsort(gnorm.ravel()[seeds], kind="stable")
            seeds = seeds[order[:200]]
        grad_fn = lambda z: explicit_sigma_and_grad(z, model)[1]
        reg = np.asarray(emap.region, dtype=np.float64)
        roots, resids = [], []
        for i in seeds:
            z, r, clean = _newton(grad_fn, pts[i], span)
            if clean and r < 1e-8 and _in_region(z, reg, span):
                roots.append(z)
                resids.append(r)
            else:
                notes.append(f"seed {pts[i].tolist()} did not converge (|grad| {r:.3e})")
        roots, resids = _dedupe(roots, resids)
        return CriticalSetResult("S", roots, resids, method="newton-explicit", notes=notes)

    roots, resids = [], []
    for i in _lattice_minima(sig):
        verdict = clarke_critical_test(pts[i], model, probe)
        if verdict.member:
            roots.append(pts[i])
            resids.append(max(0.0, -verdict.margin))
        else:
            notes.append(
                f"candidate {pts[i].tolist()} rejected: margin {verdict.margin:.3e}"
            )
    roots, resids = _dedupe(roots, resids)
    return CriticalSetResult("S", roots, resids, method="clarke-sampled", notes=notes)


def find_Sp(model: ModelSpec, p: float, region, seeds=None) -> CriticalSetResult:
    """Roots of G(z) = (5 - p) K grad V - 4 V grad K inside the region.

    Newton from a seed lattice (an int n means n^3 over the region, default
    9^3; any iterable of points works too).  A root is accepted when |G| is
    below 1e-8 times the local gradient scale 1 + |grad V| + |grad K|; the
    condition is algebraic in the analytic gradients, so no discretization
    error enters.  An empty result is a legitimate outcome.
    """
    if not model.nonlin.is_power:
        raise LandscapeError("the algebraic condition is defined for power nonlinearities")
    if not 1.0 < float(p) < 5.0:
        raise LandscapeError(f"p must sit in (1, 5), got {p}")
    reg = _as_region(region)
    span = float(np.linalg.norm(reg[:, 1] - reg[:, 0]))
    p = float(p)

    def G(z):
        v, gv = model.V_and_grad(np.asarray(z, dtype=np.float64))
        k, gk = model.K_and_grad(np.asarray(z, dtype=np.float64))
        return (5.0 - p) * float(k) * np.asarray(gv) - 4.0 * float(v) * np.asarray(gk)

    if seeds is None:
        seeds = 9
    if np.isscalar(seeds):
        _, seed_pts = _lattice(reg, _as_resolution(int(seeds)))
    else:
        seed_pts = np.asarray(list(seeds), dtype=np.float64).reshape(-1, 3)

    roots, resids, notes = [], [], []
    for z0 in seed_pts:
        z, r, clean = _newton(G, z0, span)
        if not clean or not _in_region(z, reg, span):
            continue
        _, gv = model.V_and_grad(z)
        _, gk = model.K_and_grad(z)
        tol = 1e-8 * (1.0 + float(np.linalg.norm(gv)) + float(np.linalg.norm(gk)))
        if r < tol:
            roots.append(z)
            resids.append(r)
    roots, resids = _dedupe(roots, resids)
    return CriticalSetResult("Sp", roots, resids, p=p, method="newton-analytic", notes=notes)


def crit_K(model: ModelSpec, region, seeds=None) -> CriticalSetResult:
    """Critical points of K by Newton on its analytic gradient.

    Residual threshold 1e-10.  A constant K is degenerate and reported as
    such instead of a point list.
    """
    reg = _as_region(region)
    span = float(np.linalg.norm(reg[:, 1] - reg[:, 0]))
    if seeds is None:
        seeds = 9
    if np.isscalar(seeds):
        _, seed_pts = _lattice(reg, _as_resolution(int(seeds)))
    else:
        seed_pts = np.asarray(list(seeds), dtype=np.float64).reshape(-1, 3)

    grad_fn = lambda z: model.K_and_grad(np.asarray(z, dtype=np.float64))[1]
    kvals = np.array([float(model.K_and_grad(z)[0]) for z in seed_pts])
    gmax = max(float(np.linalg.norm(grad_fn(z))) for z in seed_pts)
    if gmax <= 1e-14 * max(1.0, float(np.abs(kvals).max())):
        return CriticalSetResult(
            kind="CritK",
            points=[],
            residuals=[],
            degenerate=True,
            method="degenerate",
            notes=["K is constant over the seed lattice"],
        )
    roots, resids = [], []
    for z0 in seed_pts:
        z, r, clean = _newton(grad_fn, z0, span)
        if clean and r < 1e-10 and _in_region(z, reg, span):
            roots.append(z)
            resids.append(r)
    roots, resids = _dedupe(roots, resids)
    return CriticalSetResult("CritK", roots, resids, method="newton-analytic")


def find_Sstar(model: ModelSpec, candidates, solutions_provider=None, tol: float = 1e-4) -> CriticalSetResult:
    """Weak-concentration membership of finitely many candidate points.

    For each candidate the directional brackets are evaluated over the 26
    lattice directions; membership needs the upper bracket above -tol and
    the lower below +tol in every direction (the brackets are linear in the
    direction for a single orbit, so the lattice net decides membership up
    to the tolerance scale).  The reported residual is the worst violation
    max(-sup, inf) over the net.

    With no solutions_provider the brackets come from the radial shooting
    moments, which is exact for the least-energy representation and the only
    route whose quadrature error sits below tol.  A provider mapping z to a
    list of computed 3D solutions switches to the sampled bracket; its
    failures propagate.
    """
    net = _direction_net(ProbeSpec(n_random=0))
    points, resids, notes = [], [], []
    for cand in candidates:
        z = np.asarray(cand, dtype=np.float64)
        if solutions_provider is None:
            point = FrozenPoint.from_model(model, z)
            prof = shoot_radial(point, model.nonlin)
            mom = profile_moments(prof, model.nonlin)
            bvec = 0.5 * mom["mass2"] * np.asarray(point.grad_Vz) - mom["intF"] * np.asarray(
                point.grad_Kz
            )
            his = los = net @ bvec
        else:
            sols = solutions_provider(z)
            pairs = [gamma_pm(tuple(z), tuple(w), model, sols) for w in net]
            his = np.array([hi for hi, _ in pairs])
            los = np.array([lo for _, lo in pairs])
        residual = float(np.maximum(-his, los).max())
        if np.all(his >= -tol) and np.all(los <= tol):
            points.append(z)
            resids.append(residual)
        else:
            notes.append(f"candidate {z.tolist()} rejected: worst bracket {residual:.3e}")
    method = "moments" if solutions_provider is None else "gamma-pm"
    return CriticalSetResult("Sstar", points, resids, method=method, notes=notes)


@dataclass
class DriftStudy:
    """dist(S_p, Crit K) per p, with a monotone-decrease summary.

    distances uses the one-sided reading: max over S_p of the distance to
    the nearest critical point of K.  A p whose S_p came back empty is
    recorded in gaps and carries nan.  monotone_decreasing covers the non-gap
    entries in order.
    """

    p_list: list
    distances: list
    gaps: list
    monotone_decreasing: bool


def p_to_5_study(model: ModelSpec, p_list, region, seeds=None) -> DriftStudy:
    if not model.nonlin.is_power:
        raise LandscapeError("the drift study needs the power nonlinearity")
    p_list = [float(p) for p in p_list]
    if not all(a < b for a, b in zip(p_list, p_list[1:])):
        raise LandscapeError("p_list must increase toward 5")
    ck = crit_K(model, region, seeds)
    distances, gaps = [], []
    for p in p_list:
        sp = find_Sp(model, p, region, seeds)
        if not sp.points:
            gaps.append(p)
            distances.append(float("nan"))
        elif ck.degenerate:
            distances.append(0.0)
        else:
            distances.append(
                max(
                    min(float(np.linalg.norm(z - c)) for c in ck.points)
                    for z in sp.points
                )
            )
    seen = [d for d in distances if np.isfinite(d)]
    monotone = all(b <= a + 1e-12 for a, b in zip(seen, seen[1:]))
    return DriftStudy(p_list, distances, gaps, monotone)


# ---------------------------------------------------------------------------
# file formats

def write_sweep_csv(emap: GroundEnergyMap, path) -> None:
    """One row per lattice sample, in lattice order: position, sigma,
    gradient, method.  Floats are written as their shortest round-trip
    representation, so equal sweeps produce identical bytes."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["z1", "z2", "z3", "sigma", "grad1", "grad2", "grad3", "method"])
        for s in emap.samples:
            g = s.grad_sigma if s.grad_sigma is not None else [float("nan")] * 3
            writer.writerow(
                [repr(float(c)) for c in s.z]
                + [repr(float(s.sigma))]
                + [repr(float(c)) for c in g]
                + [s.method]
            )


def write_critical_json(result: CriticalSetResult, path) -> None:
    """Critical set with per-point residuals and method metadata."""
    payload = {
        "kind": result.kind,
        "p": result.p,
        "degenerate": result.degenerate,
        "method": result.method,
        "points": [[float(c) for c in z] for z in result.points],
        "residuals": [float(r) for r in result.residuals],
        "notes": list(result.notes),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
