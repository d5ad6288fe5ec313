"""Torus actions from generators, Haar averaging of 1-forms, moment-like functions."""
from __future__ import annotations

import itertools
import math
import threading
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .expr import Expression, jacobian
from .geometry import (
    AmbientSpace,
    LevelSetManifold,
    OneForm,
    ProjectionError,
    omega_matrix,
    project_to_manifold,
    tangent_basis,
)

__all__ = [
    "AveragedForm",
    "FlowDivergenceError",
    "Generator",
    "InvarianceReport",
    "TorusAction",
    "check_dS_identity",
    "check_invariance",
    "dS_identity_sides",
    "flow",
    "generator_value",
    "group_action",
    "haar_average_oneform",
    "moment_function",
    "moment_gradient",
    "orbit_points",
    "pushforward",
]

RK4_MAX_STEP = 1e-3
PUSHFORWARD_H = 1e-6


class FlowDivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class Generator:
    """Infinitesimal generator of one circle factor.

    ``kind`` is ``"linear_rotation"`` (closed-form flow; ``weights`` gives one
    integer weight per pairing) or ``"numeric"`` (RK4 flow of ``components``).
    """

    components: tuple
    kind: str = "numeric"
    weights: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("linear_rotation", "numeric"):
            raise ValueError(f"unknown flow kind {self.kind!r}")
        if self.kind == "linear_rotation" and self.weights is None:
            raise ValueError("linear_rotation generators need weights")

    @classmethod
    def rotation(cls, ambient: AmbientSpace, weights: Sequence[int]) -> "Generator":
        """Σ_j w_j 2π(-y_j ∂/∂x_j + x_j ∂/∂y_j) over the ambient pairing."""
        if len(weights) != len(ambient.pairing):
            raise ValueError("one weight per symplectic pair is required")
        if any(float(w) != int(w) for w in weights):
            raise ValueError("rotation weights must be integers")
        weights = tuple(int(w) for w in weights)
        comps = ["0"] * ambient.dim
        names = ambient.coord_names
        for w, (qi, pi) in zip(weights, ambient.pairing):
            if w:
                comps[qi] = f"-2*pi*{w}*{names[pi]}"
                comps[pi] = f"2*pi*{w}*{names[qi]}"
        return cls(tuple(ambient.parse(c) for c in comps), "linear_rotation", weights)

    @classmethod
    def from_strings(cls, ambient: AmbientSpace, comps: Sequence[str]) -> "Generator":
        if len(comps) != ambient.dim:
            raise ValueError(f"expected {ambient.dim} components, got {len(comps)}")
        return cls(tuple(ambient.parse(c) for c in comps), "numeric")

    def __call__(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return np.stack([np.broadcast_to(c.eval(p), p.shape[:-1]) for c in self.components], -1)


@dataclass(frozen=True)
class TorusAction:
    """T^r action given by r commuting, 1-periodic generators.

    ``manifold`` is only used by numeric flows, which retract onto it after
    integration.
    """

    ambient: AmbientSpace
    generators: tuple
    manifold: LevelSetManifold | None = None

    def __post_init__(self):
        object.__setattr__(self, "generators", tuple(self.generators))
        if not self.generators:
            raise ValueError("a torus action needs at least one generator")
        for g in self.generators:
            if len(g.components) != self.ambient.dim:
                raise ValueError("generator dimension does not match ambient")

    @property
    def r(self) -> int:
        return len(self.generators)

    @property
    def is_linear(self) -> bool:
        return all(g.kind == "linear_rotation" for g in self.generators)

    @classmethod
    def rotations(cls, ambient: AmbientSpace, weights: Sequence[Sequence[int]], manifold=None):
        return cls(ambient, tuple(Generator.rotation(ambient, w) for w in weights), manifold)

    def generator_matrix(self, p) -> np.ndarray:
        """Columns Z_1(p), ..., Z_r(p); shape ``(..., dim, r)``."""
        return np.stack([g(p) for g in self.generators], axis=-1)


def generator_value(A: TorusAction, i: int, p) -> np.ndarray:
    """Z_i(p) for a 1-based generator index ``i``."""
    if not 1 <= i <= A.r:
        raise IndexError(f"generator index {i} outside 1..{A.r}")
    return A.generators[i - 1](p)


# ---------------------------------------------------------------------------
# Flows
# ---------------------------------------------------------------------------


def _rotation_angles(A: TorusAction, s) -> np.ndarray:
    """Per-pair rotation angles 2π Σ_i w_i s_i; shape ``s.shape[:-1] + (npairs,)``."""
    W = np.array([g.weights for g in A.generators], dtype=float)  # (r, npairs)
    return 2 * math.pi * np.asarray(s, float) @ W


def _rotation_matrices(A: TorusAction, angles) -> np.ndarray:
    angles = np.asarray(angles, float)
    d = A.ambient.dim
    R = np.zeros(angles.shape[:-1] + (d, d))
    paired = set()
    for j, (qi, pi) in enumerate(A.ambient.pairing):
        c, s = np.cos(angles[..., j]), np.sin(angles[..., j])
        R[..., qi, qi] = c
        R[..., qi, pi] = -s
        R[..., pi, qi] = s
        R[..., pi, pi] = c
        paired.update((qi, pi))
    for k in range(d):
        if k not in paired:
            R[..., k, k] = 1.0
    return R


def _rk4(g: Generator, t: float, p: np.ndarray) -> np.ndarray:
    n = max(1, int(math.ceil(abs(t) / RK4_MAX_STEP)))
    h = t / n
    x = np.array(p, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(n):
            k1 = g(x)
            k2 = g(x + 0.5 * h * k1)
            k3 = g(x + 0.5 * h * k2)
            k4 = g(x + h * k3)
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(x)):
                raise FlowDivergenceError("numeric flow produced non-finite values")
    return x


def _retract(A: TorusAction, x: np.ndarray) -> np.ndarray:
    if A.manifold is None:
        return x
    try:
        if x.ndim == 1:
            return project_to_manifold(x, A.manifold)
        return np.array([project_to_manifold(row, A.manifold) for row in x])
    except ProjectionError as exc:
        raise FlowDivergenceError(f"numeric flow left the projection basin: {exc}") from exc


def flow(A: TorusAction, i: int, t: float, p, retract: bool = True) -> np.ndarray:
    """φ_i^t(p).  Batched over leading axes of ``p``."""
    g = A.generators[i - 1]
    p = np.asarray(p, dtype=float)
    if g.kind == "linear_rotation":
        angles = 2 * math.pi * float(t) * np.asarray(g.weights, float)
        return p @ _rotation_matrices(A, angles).T
    x = _rk4(g, t, p)
    return _retract(A, x) if retract else x


def group_action(A: TorusAction, s, p, retract: bool = True) -> np.ndarray:
    """ρ^s(p) = φ_1^{s_1} ∘ ... ∘ φ_r^{s_r}(p)."""
    s = np.asarray(s, dtype=float)
    p = np.asarray(p, dtype=float)
    if s.shape[-1] != A.r:
        raise ValueError(f"expected {A.r} torus parameters")
    if A.is_linear:
        R = _rotation_matrices(A, _rotation_angles(A, s))
        return np.einsum("...ij,...j->...i", R, p)
    if s.ndim != 1:
        return np.array([group_action(A, si, p, retract) for si in s])
    x = p
    for i in range(A.r, 0, -1):
        if s[i - 1] != 0.0:
            x = flow(A, i, s[i - 1], x, retract=False)
    return _retract(A, x) if retract else x


def pushforward(A: TorusAction, s, p) -> np.ndarray:
    """Dρ^s(p): exact for linear rotations, central differences otherwise."""
    s = np.asarray(s, dtype=float)
    if A.is_linear:
        return _rotation_matrices(A, _rotation_angles(A, s))
    p = np.asarray(p, dtype=float)
    d = p.shape[-1]
    h = PUSHFORWARD_H
    cols = []
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        cols.append(
            (group_action(A, s, p + e, retract=False) - group_action(A, s, p - e, retract=False))
            / (2 * h)
        )
    return np.stack(cols, axis=-1)


def torus_grid(r: int, N: int) -> np.ndarray:
    """Uniform N^r grid s_k = k/N on [0,1)^r, shape ``(N^r, r)``."""
    ticks = np.arange(N) / N
    return np.array(list(itertools.product(ticks, repeat=r)), dtype=float).reshape(-1, r)


def _orbit_samples(A: TorusAction, p, N: int):
    """Points ρ^{s_k}(p) and pushforwards Dρ^{s_k}(p) over the Haar grid."""
    p = np.asarray(p, dtype=float)
    grid = torus_grid(A.r, N)
    if A.is_linear:
        R = _rotation_matrices(A, _rotation_angles(A, grid))
        return R @ p, R
    d = p.shape[0]
    h = PUSHFORWARD_H
    # base point plus ±h perturbations, flowed together in one batch
    starts = [p] + [p + sgn * h * np.eye(d)[j] for j in range(d) for sgn in (1.0, -1.0)]
    batch = np.array(starts)
    # apply φ_r first; stacking the new index in front of earlier ones leaves
    # axes ordered (start, k_1, ..., k_r), matching torus_grid
    for i in range(A.r, 0, -1):
        layers = [batch]
        for _ in range(N - 1):
            layers.append(flow(A, i, 1.0 / N, layers[-1], retract=False))
        batch = np.stack(layers, axis=1)
    batch = batch.reshape(len(starts), -1, d)
    points = batch[0]
    D = np.empty((points.shape[0], d, d))
    for j in range(d):
        D[:, :, j] = (batch[1 + 2 * j] - batch[2 + 2 * j]) / (2 * h)
    return _retract(A, points), D


def orbit_points(A: TorusAction, p, N: int) -> np.ndarray:
    """ρ^{s_k}(p) over the uniform N^r grid (``torus_grid`` order)."""
    p = np.asarray(p, dtype=float)
    if A.is_linear:
        return _rotation_matrices(A, _rotation_angles(A, torus_grid(A.r, N))) @ p
    batch = p[None]
    for i in range(A.r, 0, -1):
        layers = [batch]
        for _ in range(N - 1):
            layers.append(flow(A, i, 1.0 / N, layers[-1], retract=False))
        batch = np.stack(layers, axis=1)
    return _retract(A, batch.reshape(-1, p.shape[0]))


# ---------------------------------------------------------------------------
# Haar averaging
# ---------------------------------------------------------------------------


class AveragedForm:
    """α₀ = ∫_{T^r} (s*α) dσ by the rectangle rule on an N^r grid.

    Covector evaluations are memoized on a 1e-12 coordinate grid.
    """

    def __init__(self, base: OneForm, action: TorusAction, N: int = 32, cache: bool = True):
        if N < 1:
            raise ValueError("quadrature needs N >= 1")
        self.base = base
        self.action = action
        self.N = int(N)
        self._cache = {} if cache else None
        self._lock = threading.Lock()

    def covector(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        key = None
        if self._cache is not None:
            key = tuple(np.round(p * 1e12).astype(np.int64).tolist())
            hit = self._cache.get(key)
            if hit is not None:
                return hit
        pts, D = _orbit_samples(self.action, p, self.N)
        a = self.base.values(pts)  # (K, d)
        # (s*α)(p)(v) = α(ρ^s p)(Dρ^s v)  ->  covector Dᵀ α(ρ^s p)
        val = np.einsum("kij,ki->j", D, a) / pts.shape[0]
        if key is not None:
            with self._lock:
                self._cache[key] = val
        return val

    def __call__(self, p, v) -> float:
        return float(self.covector(p) @ np.asarray(v, float))

    def moment(self, i: int, p) -> float:
        return -self(p, generator_value(self.action, i, p))


def haar_average_oneform(alpha: OneForm, A: TorusAction, p, v, N: int = 32) -> float:
    """α₀(p)(v) averaged over the uniform N^r torus grid."""
    return AveragedForm(alpha, A, N, cache=False)(p, v)


def moment_function(alpha: OneForm, A: TorusAction, i: int, p, N: int = 32) -> float:
    """S_i(p) = -α₀(p)(Z_i(p))."""
    return -haar_average_oneform(alpha, A, p, generator_value(A, i, p), N)


def moment_gradient(alpha: OneForm, A: TorusAction, i: int, p, N: int = 32, h: float = 1e-6) -> np.ndarray:
    """Ambient gradient of S_i.

    Exact (chain rule through the rotation grid) for linear actions; central
    differences of :func:`moment_function` otherwise.
    """
    p = np.asarray(p, dtype=float)
    if A.is_linear:
        grid = torus_grid(A.r, N)
        R = _rotation_matrices(A, _rotation_angles(A, grid))  # (K, d, d)
        pts = R @ p
        a_val = alpha.values(pts)  # (K, d)
        a_jac = jacobian(alpha.coeffs, pts) @ R  # d/dp α(R p) = Jα(Rp) R
        g = A.generators[i - 1]
        z_val = g(p)
        z_jac = jacobian(g.components, p)  # (d, d)
        rz_val = np.einsum("kij,j->ki", R, z_val)
        rz_jac = R @ z_jac
        grad = np.einsum("kjl,kj->l", a_jac, rz_val) + np.einsum("kj,kjl->l", a_val, rz_jac)
        return -grad / grid.shape[0]
    d = p.shape[0]
    out = np.empty(d)
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        out[j] = (moment_function(alpha, A, i, p + e, N) - moment_function(alpha, A, i, p - e, N)) / (2 * h)
    return out


# ---------------------------------------------------------------------------
# Hypothesis checks
# ---------------------------------------------------------------------------


def commutator(A: TorusAction, i: int, j: int, p) -> np.ndarray:
    """Lie bracket [Z_i, Z_j](p) = DZ_j Z_i - DZ_i Z_j."""
    gi, gj = A.generators[i - 1], A.generators[j - 1]
    return jacobian(gj.components, p) @ gi(p) - jacobian(gi.components, p) @ gj(p)


def freeness(A: TorusAction, p) -> float:
    """σ_min/σ_max of the generator matrix (0 when all generators vanish)."""
    s = np.linalg.svd(A.generator_matrix(p), compute_uv=False)
    return 0.0 if s[0] == 0.0 else float(s[-1] / s[0])


@dataclass
class InvarianceReport:
    pullback_residual: float
    alpha_z_mean: list
    alpha_z_std: list
    freeness_min: float
    commutator_max: float
    periodicity_max: float
    samples: int
    thresholds: dict = field(default_factory=dict)

    @property
    def preserves_omega(self) -> bool:
        return self.pullback_residual < self.thresholds.get("pullback", 1e-8)

    @property
    def locally_free(self) -> bool:
        return self.freeness_min > self.thresholds.get("freeness", 1e-8)

    @property
    def commuting(self) -> bool:
        return self.commutator_max < self.thresholds.get("commutator", 1e-8)

    @property
    def periodic(self) -> bool:
        return self.periodicity_max < self.thresholds.get("periodicity", 1e-8)

    def constant(self, i: int) -> bool:
        """Whether α(Z_i) is constant over the sample (1-based ``i``)."""
        return self.alpha_z_std[i - 1] < self.thresholds.get("constant", 1e-10)

    @property
    def hypotheses_hold(self) -> bool:
        tail = all(self.constant(i) for i in range(2, len(self.alpha_z_std) + 1))
        return self.preserves_omega and self.locally_free and self.commuting and self.periodic and tail

    def failures(self) -> list:
        out = []
        if not self.preserves_omega:
            out.append("action does not preserve omega")
        if not self.locally_free:
            out.append("action is not locally free")
        if not self.commuting:
            out.append("generators do not commute")
        if not self.periodic:
            out.append("flows are not 1-periodic")
        for i in range(2, len(self.alpha_z_std) + 1):
            if not self.constant(i):
                out.append(f"alpha(Z_{i}) is not constant")
        return out

    def as_dict(self) -> dict:
        return {
            "pullback_residual": self.pullback_residual,
            "alpha_z_mean": list(self.alpha_z_mean),
            "alpha_z_std": list(self.alpha_z_std),
            "freeness_min": self.freeness_min,
            "commutator_max": self.commutator_max,
            "periodicity_max": self.periodicity_max,
            "samples": self.samples,
            "hypotheses_hold": self.hypotheses_hold,
            "failures": self.failures(),
        }


def check_invariance(
    alpha: OneForm,
    A: TorusAction,
    M: LevelSetManifold,
    points,
    rng: np.random.Generator | None = None,
    thresholds: dict | None = None,
) -> InvarianceReport:
    """Numerical residuals of the action hypotheses over sample points on M."""
    rng = np.random.default_rng(0) if rng is None else rng
    points = np.asarray(points, dtype=float)
    pull, comm, per, free = 0.0, 0.0, 0.0, np.inf
    az = []
    for p in points:
        s = rng.uniform(0.0, 1.0, A.r)
        q = group_action(A, s, p)
        D = pushforward(A, s, p)
        T = tangent_basis(p, M, check=False).tangent_basis
        diff = D.T @ omega_matrix(alpha, q) @ D - omega_matrix(alpha, p)
        pull = max(pull, float(np.linalg.norm(T.T @ diff @ T)))
        free = min(free, freeness(A, p))
        for i in range(1, A.r + 1):
            for j in range(i + 1, A.r + 1):
                comm = max(comm, float(np.linalg.norm(commutator(A, i, j, p))))
        az.append([float(alpha(p, generator_value(A, i, p))) for i in range(1, A.r + 1)])
    for i in range(1, A.r + 1):
        for p in points[: min(len(points), 4)]:
            per = max(per, float(np.linalg.norm(flow(A, i, 1.0, p) - p)))
    az = np.array(az).reshape(-1, A.r)
    return InvarianceReport(
        pullback_residual=pull,
        alpha_z_mean=az.mean(axis=0).tolist(),
        alpha_z_std=az.std(axis=0).tolist(),
        freeness_min=float(free),
        commutator_max=comm,
        periodicity_max=per,
        samples=len(points),
        thresholds=dict(thresholds or {}),
    )


def dS_identity_sides(alpha, A, M, i, p, N: int = 32, h: float = 1e-5, averaged=None):
    """Both sides of dS_i = i_{Z_i}ω along an orthonormal tangent basis at p.

    The left side differentiates S_i along the retracted curves
    t ↦ project(p + t e_k) by central differences.
    """
    p = np.asarray(p, dtype=float)
    M.require(p)
    avg = AveragedForm(alpha, A, N) if averaged is None else averaged
    T = tangent_basis(p, M).tangent_basis
    Z = generator_value(A, i, p)
    rhs = Z @ omega_matrix(alpha, p) @ T
    lhs = np.empty(T.shape[1])
    for k in range(T.shape[1]):
        fwd = project_to_manifold(p + h * T[:, k], M)
        bwd = project_to_manifold(p - h * T[:, k], M)
        lhs[k] = (avg.moment(i, fwd) - avg.moment(i, bwd)) / (2 * h)
    return lhs, rhs


def check_dS_identity(alpha, A, M, i, p, N: int = 32, h: float = 1e-5) -> float:
    """max_k |D_{e_k} S_i(p) - ω(Z_i(p), e_k)|."""
    lhs, rhs = dS_identity_sides(alpha, A, M, i, p, N, h)
    return float(np.max(np.abs(lhs - rhs)))
