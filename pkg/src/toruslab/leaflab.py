"""Critical points of S₁, kernel-foliation leaf tracing and torus certification."""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .action import (
    AveragedForm,
    TorusAction,
    check_invariance,
    flow,
    generator_value,
    group_action,
    moment_gradient,
    orbit_points,
)
from .geometry import (
    GeometryError,
    LevelSetManifold,
    OneForm,
    ProjectionError,
    TangentKernelData,
    kernel_residual,
    project_to_manifold,
    rank_and_kernel,
    sample_manifold,
    subspace_distance,
    tangent_basis,
)

if TYPE_CHECKING:
    from .scenario import Scenario

log = logging.getLogger(__name__)

__all__ = [
    "CriticalPointResult",
    "LeafCertificate",
    "LeafReport",
    "LeafTrace",
    "LeafTraceError",
    "OptimizationError",
    "classify",
    "optimize_moment",
    "orbit_distance",
    "trace_leaf",
    "verify_torus_leaf",
]

VERDICTS = (
    "two_distinct_toroidal_leaves",
    "all_leaves_toroidal",
    "hypotheses_violated",
    "inconclusive",
)


class OptimizationError(RuntimeError):
    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class LeafTraceError(GeometryError):
    pass


# ---------------------------------------------------------------------------
# Optimization of S₁
# ---------------------------------------------------------------------------


@dataclass
class CriticalPointResult:
    point: np.ndarray
    value: float
    projected_gradient_norm: float
    mode: str
    restarts_used: int
    iterations: int = 0
    converged: bool = True
    other_values: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "point": self.point.tolist(),
            "value": self.value,
            "projected_gradient_norm": self.projected_gradient_norm,
            "mode": self.mode,
            "restarts_used": self.restarts_used,
            "iterations": self.iterations,
            "converged": self.converged,
            "other_critical_values": list(self.other_values),
        }


def _tangential(v, p, M):
    T = tangent_basis(p, M, check=False).tangent_basis
    return T @ (T.T @ v)


def _ascend(p, M, avg: AveragedForm, sign: float, grad_tol: float, max_iter: int, eta: float):
    """Projected gradient ascent of sign·S₁ with BB trial steps and Armijo backtracking."""
    A = avg.action

    def f(x):
        return sign * avg.moment(1, x)

    def g(x):
        return sign * _tangential(moment_gradient(avg.base, A, 1, x, avg.N), x, M)

    fx, gx = f(p), g(p)
    prev = None
    for it in range(max_iter):
        gn = float(np.linalg.norm(gx))
        if gn < grad_tol:
            return p, fx, gn, it, True
        if prev is not None:
            s, y = p - prev[0], gx - prev[1]
            sy = abs(float(s @ y))
            if sy > 0:
                eta = float(np.clip(s @ s / sy, 1e-10, 10.0))
        accepted = False
        for _ in range(50):
            try:
                trial = project_to_manifold(p + eta * gx, M)
            except ProjectionError:
                eta *= 0.5
                continue
            ft = f(trial)
            if ft >= fx + 1e-4 * eta * gn * gn or (
                gn < 1e-5 and ft >= fx - 4e-15 * max(1.0, abs(fx))
            ):
                accepted = True
                break
            eta *= 0.5
        if not accepted:
            return p, fx, gn, it, False
        prev = (p, gx)
        p, fx = trial, ft
        gx = g(p)
    gn = float(np.linalg.norm(gx))
    return p, fx, gn, max_iter, gn < grad_tol


def optimize_moment(
    M: LevelSetManifold,
    alpha: OneForm,
    A: TorusAction,
    mode: str = "max",
    restarts: int = 16,
    rng: np.random.Generator | None = None,
    N: int = 32,
    grad_tol: float = 1e-8,
    max_iter: int = 2000,
    box: float = 2.0,
    distinct_tol: float = 1e-6,
    seeds=None,
    initial_step: float = 0.05,
) -> CriticalPointResult:
    """Maximize or minimize S₁ on M from random seeds; returns the best converged run."""
    if mode not in ("max", "min"):
        raise ValueError("mode must be 'max' or 'min'")
    rng = np.random.default_rng(0) if rng is None else rng
    sign = 1.0 if mode == "max" else -1.0
    avg = AveragedForm(alpha, A, N)
    if seeds is None:
        seeds = sample_manifold(M, restarts, rng, box)
    runs = []
    for seed in seeds:
        p, fx, gn, its, ok = _ascend(np.asarray(seed, float), M, avg, sign, grad_tol, max_iter, initial_step)
        runs.append((ok, fx, p, gn, its))
    good = [r for r in runs if r[0]]
    if not good:
        best = max(runs, key=lambda r: r[1])
        raise OptimizationError(
            f"no restart converged (best |grad| {best[3]:.3e})",
            best=CriticalPointResult(best[2], sign * best[1], best[3], mode, len(runs), best[4], False),
        )
    ok, fx, p, gn, its = max(good, key=lambda r: r[1])
    others = sorted({round(sign * r[1], 9) for r in good if abs(r[1] - fx) > distinct_tol})
    return CriticalPointResult(
        point=p,
        value=sign * fx,
        projected_gradient_norm=gn,
        mode=mode,
        restarts_used=len(runs),
        iterations=its,
        other_values=others,
    )


# ---------------------------------------------------------------------------
# Leaf tracing
# ---------------------------------------------------------------------------


@dataclass
class LeafTrace:
    seed: np.ndarray
    points: np.ndarray
    kernel_residuals: np.ndarray  # (n_points, r)
    orbit_distances: np.ndarray
    closed: bool
    closure_residual: float

    def as_dict(self) -> dict:
        return {
            "seed": self.seed.tolist(),
            "n_points": int(len(self.points)),
            "kernel_residual_max": self.kernel_residuals.max(axis=0).tolist(),
            "orbit_distance_max": float(self.orbit_distances.max()),
            "closed": self.closed,
            "closure_residual": self.closure_residual,
        }


def _align(K: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Rotate the columns of K onto ``ref`` (orthogonal Procrustes)."""
    u, _, vt = np.linalg.svd(K.T @ ref)
    return K @ (u @ vt)


def _kernel_frame(alpha, x, M, ref, check=False) -> TangentKernelData:
    data = rank_and_kernel(alpha, x, M, check=check)
    if data.kernel_basis.shape[1] != ref.shape[1]:
        raise LeafTraceError(
            f"kernel dimension drifted from {ref.shape[1]} to {data.kernel_basis.shape[1]}"
        )
    return data


def _frame_step(alpha, M, x, ref, j, h):
    """One RK4 step along column j of the kernel frame aligned to ``ref``."""

    def field_at(y):
        K = _align(_kernel_frame(alpha, y, M, ref).kernel_basis, ref)
        return K[:, j]

    k1 = field_at(x)
    k2 = field_at(x + 0.5 * h * k1)
    k3 = field_at(x + 0.5 * h * k2)
    k4 = field_at(x + h * k3)
    return x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def orbit_distance(A: TorusAction, p, q, grid: int = 64, orbit=None, refine: int = 20):
    """min_s ‖ρ^s(p) - q‖: grid search, then Gauss–Newton in the torus parameters.

    Returns ``(distance, s)``.
    """
    q = np.asarray(q, dtype=float)
    if orbit is None:
        orbit = orbit_points(A, p, grid)
    d = np.linalg.norm(orbit - q, axis=1)
    k = int(np.argmin(d))
    idx = np.unravel_index(k, (grid,) * A.r)
    s = np.array(idx, dtype=float) / grid
    best = float(d[k])
    for _ in range(refine):
        x = group_action(A, s, p)
        res = x - q
        J = A.generator_matrix(x)  # ∂ρ^s(p)/∂s_i = Z_i(ρ^s(p))
        ds = np.linalg.lstsq(J, -res, rcond=None)[0]
        trial = s + ds
        dist = float(np.linalg.norm(group_action(A, trial, p) - q))
        if dist >= best:
            break
        s, best = trial, dist
    return best, np.mod(s, 1.0)


def _closure_residual(A: TorusAction, p) -> float:
    return max(float(np.linalg.norm(flow(A, i, 1.0, p) - p)) for i in range(1, A.r + 1))


def trace_leaf(
    M: LevelSetManifold,
    alpha: OneForm,
    A: TorusAction,
    p,
    steps: int = 48,
    step_size: float = 0.05,
    grid: int = 64,
    closure_tol: float = 1e-6,
) -> LeafTrace:
    """Breadth-first exploration of the leaf through p along the kernel frame.

    Grid neighbours (±1 in each kernel direction) are reached by an RK4 step
    along the frame field, followed by a retraction onto M.  Each new frame is
    aligned with its parent's frame.  Returns ``steps + 1`` points.
    """
    p = np.asarray(p, dtype=float)
    M.require(p)
    root = rank_and_kernel(alpha, p, M)
    k = root.kernel_basis.shape[1]
    if k != A.r:
        raise LeafTraceError(f"kernel dimension {k} at the seed differs from r={A.r}")
    pts, datas = [p], [root]
    seen = {(0,) * k}
    queue = deque([((0,) * k, p, root.kernel_basis)])
    while queue and len(pts) < steps + 1:
        idx, x, K = queue.popleft()
        for j in range(k):
            for sgn in (1, -1):
                if len(pts) >= steps + 1:
                    break
                nidx = list(idx)
                nidx[j] += sgn
                nidx = tuple(nidx)
                if nidx in seen:
                    continue
                seen.add(nidx)
                y = _frame_step(alpha, M, x, K, j, sgn * step_size)
                y = project_to_manifold(y, M)
                data = _kernel_frame(alpha, y, M, K, check=True)
                pts.append(y)
                datas.append(data)
                queue.append((nidx, y, _align(data.kernel_basis, K)))
    pts = np.array(pts)
    res = np.array(
        [
            [kernel_residual(generator_value(A, i, x), alpha, x, M, data=dt) for i in range(1, A.r + 1)]
            for x, dt in zip(pts, datas)
        ]
    )
    orbit = orbit_points(A, p, grid)
    dists = np.array([orbit_distance(A, p, x, grid, orbit)[0] for x in pts])
    closure = _closure_residual(A, p)
    return LeafTrace(
        seed=p,
        points=pts,
        kernel_residuals=res,
        orbit_distances=dists,
        closed=closure < closure_tol,
        closure_residual=closure,
    )


# ---------------------------------------------------------------------------
# Certification
# ---------------------------------------------------------------------------


@dataclass
class LeafCertificate:
    certified: bool
    seed: np.ndarray
    kernel_residual_max: list
    orbit_distance_max: float
    closure_residual: float
    failure: dict | None
    trace: LeafTrace

    def as_dict(self) -> dict:
        return {
            "certified": self.certified,
            "seed": self.seed.tolist(),
            "kernel_residual_max": list(self.kernel_residual_max),
            "orbit_distance_max": self.orbit_distance_max,
            "closure_residual": self.closure_residual,
            "failure": self.failure,
            "trace_points": int(len(self.trace.points)),
        }


def verify_torus_leaf(
    M: LevelSetManifold,
    alpha: OneForm,
    A: TorusAction,
    p,
    steps: int = 48,
    step_size: float = 0.05,
    leaf_tol: float = 1e-6,
    orbit_tol: float = 1e-5,
    closure_tol: float = 1e-6,
    grid: int = 64,
) -> LeafCertificate:
    """Certify that the leaf through p is the torus orbit of p.

    Checks, along a traced patch of the leaf: every generator lies in the
    kernel (``leaf_tol``); every traced point lies on the orbit of p
    (``orbit_tol``); each generator's time-1 flow returns to p (``closure_tol``).
    """
    trace = trace_leaf(M, alpha, A, p, steps, step_size, grid, closure_tol)
    kmax = trace.kernel_residuals.max(axis=0)
    failure = None
    bad = np.argwhere(trace.kernel_residuals >= leaf_tol)
    if bad.size:
        n, i = bad[np.argmax(trace.kernel_residuals[bad[:, 0], bad[:, 1]])]
        failure = {
            "criterion": "kernel",
            "generator": int(i) + 1,
            "point": trace.points[n].tolist(),
            "residual": float(trace.kernel_residuals[n, i]),
        }
    elif trace.orbit_distances.max() >= orbit_tol:
        n = int(np.argmax(trace.orbit_distances))
        failure = {
            "criterion": "orbit",
            "point": trace.points[n].tolist(),
            "residual": float(trace.orbit_distances[n]),
        }
    elif not trace.closed:
        failure = {"criterion": "closure", "point": trace.seed.tolist(), "residual": trace.closure_residual}
    return LeafCertificate(
        certified=failure is None,
        seed=trace.seed,
        kernel_residual_max=kmax.tolist(),
        orbit_distance_max=float(trace.orbit_distances.max()),
        closure_residual=trace.closure_residual,
        failure=failure,
        trace=trace,
    )


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------


@dataclass
class LeafReport:
    scenario_id: str
    verdict: str
    hypotheses: dict
    global_sample: dict
    critical: dict = field(default_factory=dict)
    certifications: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "verdict": self.verdict,
            "hypotheses": self.hypotheses,
            "global_sample": self.global_sample,
            "critical": self.critical,
            "certifications": self.certifications,
            "diagnostics": self.diagnostics,
        }


def global_sample_stats(alpha, A, M, points, N: int = 32) -> dict:
    """Rank, kernel residuals of every Z_i, kernel-vs-orbit distance and S₁ spread."""
    avg = AveragedForm(alpha, A, N)
    ranks, res, dist, s1 = [], [], [], []
    for p in points:
        data = rank_and_kernel(alpha, p, M)
        ranks.append(data.rank)
        res.append([kernel_residual(generator_value(A, i, p), alpha, p, M, data=data) for i in range(1, A.r + 1)])
        if data.kernel_basis.shape[1] == A.r:
            dist.append(subspace_distance(data.kernel_basis, A.generator_matrix(p)))
        s1.append(avg.moment(1, p))
    res = np.array(res).reshape(-1, A.r)
    return {
        "points": len(points),
        "ranks": sorted(set(int(r) for r in ranks)),
        "kernel_residual_max": res.max(axis=0).tolist(),
        "kernel_residual_min": res.min(axis=0).tolist(),
        "kernel_orbit_distance_max": float(max(dist)) if dist else None,
        "s1_mean": float(np.mean(s1)),
        "s1_std": float(np.std(s1)),
    }


def classify(scenario: "Scenario") -> LeafReport:
    """Run the full pipeline on a scenario and return a verdict with diagnostics."""
    tol = scenario.tolerances
    smp = scenario.sampling
    M, alpha, A = scenario.manifold, scenario.alpha, scenario.action
    rng = np.random.default_rng(smp["seed"])
    N = smp["quadrature"]
    report = LeafReport(scenario.id, "inconclusive", {}, {})
    try:
        points = sample_manifold(M, smp["points"], rng, smp["box"])
    except ProjectionError as exc:
        report.diagnostics["error"] = f"sampling failed: {exc}"
        return report
    inv = check_invariance(alpha, A, M, points, rng, thresholds=invariance_thresholds(tol))
    report.hypotheses = inv.as_dict()
    if not inv.hypotheses_hold:
        report.verdict = "hypotheses_violated"
        return report
    try:
        stats = global_sample_stats(alpha, A, M, points, N)
    except GeometryError as exc:
        report.diagnostics["error"] = f"kernel extraction failed: {exc}"
        return report
    report.global_sample = stats
    trace_kw = dict(
        steps=smp["trace_steps"],
        step_size=smp["trace_step_size"],
        leaf_tol=tol["leaf_tol"],
        orbit_tol=tol["orbit_tol"],
        closure_tol=tol["closure_tol"],
        grid=smp["orbit_grid"],
    )
    all_constant = all(inv.constant(i) for i in range(1, A.r + 1))
    if all_constant and max(stats["kernel_residual_max"]) < tol["kernel_tol"]:
        if stats["s1_std"] >= tol["s1_constant_tol"]:
            report.diagnostics["error"] = "S1 is not constant although alpha(Z_i) are"
            return report
        try:
            cert = verify_torus_leaf(M, alpha, A, points[0], **trace_kw)
        except GeometryError as exc:
            report.diagnostics["error"] = f"leaf certification failed: {exc}"
            return report
        report.certifications["sample"] = cert.as_dict()
        report.verdict = "all_leaves_toroidal" if cert.certified else "inconclusive"
        return report

    opt_kw = dict(
        restarts=smp["restarts"],
        N=N,
        grad_tol=tol["grad_tol"],
        box=smp["box"],
        distinct_tol=tol["distinctness_tol"],
    )
    try:
        pmax = optimize_moment(M, alpha, A, "max", rng=rng, **opt_kw)
        pmin = optimize_moment(M, alpha, A, "min", rng=rng, **opt_kw)
    except (OptimizationError, GeometryError) as exc:
        report.diagnostics["error"] = f"optimization failed: {exc}"
        return report
    report.critical = {"max": pmax.as_dict(), "min": pmin.as_dict()}
    try:
        cmax = verify_torus_leaf(M, alpha, A, pmax.point, **trace_kw)
        cmin = verify_torus_leaf(M, alpha, A, pmin.point, **trace_kw)
    except GeometryError as exc:
        report.diagnostics["error"] = f"leaf certification failed: {exc}"
        return report
    report.certifications = {"max": cmax.as_dict(), "min": cmin.as_dict()}
    gap = abs(pmax.value - pmin.value)
    sep = float(
        np.min(np.linalg.norm(cmax.trace.points[:, None, :] - cmin.trace.points[None, :, :], axis=-1))
    )
    report.diagnostics.update({"s1_gap": gap, "leaf_separation": sep})
    if cmax.certified and cmin.certified and gap > tol["distinctness_tol"]:
        report.verdict = "two_distinct_toroidal_leaves"
    return report


def invariance_thresholds(tol: dict) -> dict:
    return {
        "pullback": tol["pullback_tol"],
        "freeness": tol["freeness_tol"],
        "commutator": tol["commutator_tol"],
        "periodicity": tol["periodicity_tol"],
        "constant": tol["constant_tol"],
    }
