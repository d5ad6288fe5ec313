"""Level-set manifolds, the exact 2-form dα and its kernel on tangent spaces."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .expr import Expression, gradient, jacobian, parse, value_and_jacobian

__all__ = [
    "AmbientSpace",
    "GeometryError",
    "LevelSetManifold",
    "OffManifoldError",
    "OneForm",
    "ProjectionError",
    "RankAmbiguityError",
    "SingularLevelSetError",
    "TangentKernelData",
    "TwoFormMatrix",
    "kernel_residual",
    "liouville_form",
    "poisson_bracket",
    "project_to_manifold",
    "rank_and_kernel",
    "sample_manifold",
    "subspace_distance",
    "tangent_basis",
    "two_form_matrix",
]


class GeometryError(RuntimeError):
    pass


class ProjectionError(GeometryError):
    def __init__(self, message, residual=None, point=None):
        super().__init__(message)
        self.residual = residual
        self.point = point


class SingularLevelSetError(GeometryError):
    """Constraint Jacobian is rank deficient: not a regular level set."""

    def __init__(self, message, singular_values=None):
        super().__init__(message)
        self.singular_values = singular_values


class RankAmbiguityError(GeometryError):
    def __init__(self, message, singular_values=None):
        super().__init__(message)
        self.singular_values = singular_values


class OffManifoldError(GeometryError):
    pass


@dataclass(frozen=True)
class AmbientSpace:
    """Coordinates of ℝ^dim, with optional (position, momentum) index pairs."""

    coord_names: tuple
    pairing: tuple = ()

    def __post_init__(self):
        names = tuple(self.coord_names)
        object.__setattr__(self, "coord_names", names)
        if len(set(names)) != len(names):
            raise ValueError("coordinate names must be distinct")
        pairs = tuple((int(a), int(b)) for a, b in self.pairing)
        object.__setattr__(self, "pairing", pairs)
        flat = [i for pair in pairs for i in pair]
        if len(set(flat)) != len(flat):
            raise ValueError("pairing indices must be disjoint")
        if any(i < 0 or i >= len(names) for i in flat):
            raise ValueError("pairing index out of range")

    @property
    def dim(self) -> int:
        return len(self.coord_names)

    @classmethod
    def canonical(cls, n: int, q: str = "x", p: str = "y") -> "AmbientSpace":
        """ℝ^{2n} with coordinates ``x1, y1, ..., xn, yn`` paired per index."""
        names = [f"{s}{j}" for j in range(1, n + 1) for s in (q, p)]
        return cls(tuple(names), tuple((2 * j, 2 * j + 1) for j in range(n)))

    def parse(self, text: str) -> Expression:
        return parse(text, self.coord_names)


@dataclass(frozen=True)
class LevelSetManifold:
    ambient: AmbientSpace
    constraints: tuple
    levels: tuple
    constraint_tol: float = 1e-10
    rank_tol: float = 1e-8
    max_iter: int = 50

    def __post_init__(self):
        cons = tuple(
            c if isinstance(c, Expression) else self.ambient.parse(c) for c in self.constraints
        )
        object.__setattr__(self, "constraints", cons)
        object.__setattr__(self, "levels", tuple(float(c) for c in self.levels))
        if len(cons) != len(self.levels):
            raise ValueError("one level value per constraint is required")
        if any(c.arity != self.ambient.dim for c in cons):
            raise ValueError("constraint arity does not match ambient dimension")

    @property
    def dim(self) -> int:
        return self.ambient.dim - len(self.constraints)

    def residual(self, p) -> np.ndarray:
        """``G_i(p) - c_i``; batched over leading axes."""
        p = np.asarray(p, dtype=float)
        vals = [np.asarray(g.eval(p)) for g in self.constraints]
        return np.stack(vals, axis=-1) - np.asarray(self.levels)

    def constraint_jacobian(self, p) -> np.ndarray:
        return jacobian(self.constraints, p)

    def contains(self, p) -> bool:
        return bool(np.all(np.abs(self.residual(p)) < self.constraint_tol))

    def require(self, p):
        res = np.max(np.abs(self.residual(p)))
        if not res < self.constraint_tol:
            raise OffManifoldError(
                f"point is off the manifold (constraint residual {res:.3e})"
            )


@dataclass(frozen=True)
class OneForm:
    """Coefficients α_i, one expression per ambient coordinate."""

    coeffs: tuple

    def __post_init__(self):
        object.__setattr__(self, "coeffs", tuple(self.coeffs))
        arities = {c.arity for c in self.coeffs}
        if arities and arities != {len(self.coeffs)}:
            raise ValueError("each coefficient must have arity equal to ambient dim")

    @classmethod
    def from_strings(cls, ambient: AmbientSpace, coeffs: Sequence[str]) -> "OneForm":
        if len(coeffs) != ambient.dim:
            raise ValueError(f"expected {ambient.dim} coefficients, got {len(coeffs)}")
        return cls(tuple(ambient.parse(c) for c in coeffs))

    @property
    def dim(self) -> int:
        return len(self.coeffs)

    def values(self, p) -> np.ndarray:
        """Covector α(p); batched over leading axes."""
        p = np.asarray(p, dtype=float)
        return np.stack([np.broadcast_to(c.eval(p), p.shape[:-1]) for c in self.coeffs], -1)

    def __call__(self, p, v) -> float:
        return np.sum(self.values(p) * np.asarray(v, float), axis=-1)


def liouville_form(ambient: AmbientSpace) -> OneForm:
    """λ = ½ Σ (y_j dx_j - x_j dy_j) over the declared pairing."""
    coeffs = ["0"] * ambient.dim
    names = ambient.coord_names
    for qi, pi in ambient.pairing:
        coeffs[qi] = f"{names[pi]}/2"
        coeffs[pi] = f"-{names[qi]}/2"
    return OneForm.from_strings(ambient, coeffs)


@dataclass(frozen=True)
class TwoFormMatrix:
    point: np.ndarray
    omega: np.ndarray

    def __call__(self, u, v) -> float:
        return float(np.asarray(u) @ self.omega @ np.asarray(v))


@dataclass(frozen=True)
class TangentKernelData:
    point: np.ndarray
    tangent_basis: np.ndarray
    restricted_form: np.ndarray | None = None
    rank: int | None = None
    kernel_basis: np.ndarray | None = None
    singular_values: np.ndarray | None = field(default=None, repr=False)

    def as_dict(self) -> dict:
        return {
            "point": self.point.tolist(),
            "rank": self.rank,
            "tangent_dim": int(self.tangent_basis.shape[1]),
            "kernel_basis": None if self.kernel_basis is None else self.kernel_basis.T.tolist(),
            "singular_values": (
                None if self.singular_values is None else self.singular_values.tolist()
            ),
        }


# ---------------------------------------------------------------------------
# Projection and tangent spaces
# ---------------------------------------------------------------------------


def project_to_manifold(q, M: LevelSetManifold, max_iter: int | None = None) -> np.ndarray:
    """Gauss–Newton retraction onto M using minimal-norm corrections.

    Raises :class:`ProjectionError` when the iteration stalls or the
    constraint Jacobian becomes singular.
    """
    p = np.array(q, dtype=float)
    if p.shape != (M.ambient.dim,):
        raise ValueError(f"expected a point of dimension {M.ambient.dim}")
    max_iter = M.max_iter if max_iter is None else max_iter
    levels = np.asarray(M.levels)

    def evaluate(x):
        vals, J = value_and_jacobian(M.constraints, x)
        r = vals - levels
        return r, J, float(np.max(np.abs(r)))

    r, J, res = evaluate(p)
    for _ in range(max_iter):
        s = np.linalg.svd(J, compute_uv=False)
        if not np.all(np.isfinite(s)) or s[0] == 0.0 or s[-1] <= M.rank_tol * s[0]:
            raise ProjectionError(
                "singular constraint Jacobian during projection", residual=res, point=p
            )
        step = np.linalg.lstsq(J, r, rcond=None)[0]
        if res < M.constraint_tol:
            # converged; one more Newton step polishes to rounding level
            trial = p - step
            tr, _, tres = evaluate(trial)
            return trial if tres <= res else p
        t = 1.0
        for _ in range(40):
            trial = p - t * step
            tr, tJ, tres = evaluate(trial)
            if np.isfinite(tres) and tres < res:
                break
            t *= 0.5
        else:
            raise ProjectionError("projection stalled", residual=res, point=p)
        p, r, J, res = trial, tr, tJ, tres
    if res < M.constraint_tol:
        return p
    raise ProjectionError(
        f"projection did not converge in {max_iter} iterations (residual {res:.3e})",
        residual=res,
        point=p,
    )


def tangent_basis(p, M: LevelSetManifold, check: bool = True) -> TangentKernelData:
    """Orthonormal basis of T_pM = null space of the constraint Jacobian."""
    p = np.asarray(p, dtype=float)
    if check:
        M.require(p)
    J = M.constraint_jacobian(p)
    k = J.shape[0]
    if k == 0:
        return TangentKernelData(point=p, tangent_basis=np.eye(M.ambient.dim))
    u, s, vt = np.linalg.svd(J)
    if s[0] == 0.0 or s[-1] <= M.rank_tol * s[0]:
        raise SingularLevelSetError(
            "not a regular level set: constraint gradients are dependent", singular_values=s
        )
    return TangentKernelData(point=p, tangent_basis=vt[k:].T)


def tangent_projector(p, M: LevelSetManifold) -> np.ndarray:
    T = tangent_basis(p, M, check=False).tangent_basis
    return T @ T.T


# ---------------------------------------------------------------------------
# The 2-form
# ---------------------------------------------------------------------------


def omega_matrix(alpha: OneForm, p) -> np.ndarray:
    """Ω_ij = ∂α_j/∂x_i - ∂α_i/∂x_j; batched over leading axes of ``p``."""
    D = jacobian(alpha.coeffs, p)  # D[..., j, i] = ∂α_j/∂x_i
    A = np.swapaxes(D, -1, -2)
    return A - np.swapaxes(A, -1, -2)


def two_form_matrix(alpha: OneForm, p) -> TwoFormMatrix:
    p = np.asarray(p, dtype=float)
    return TwoFormMatrix(point=p, omega=omega_matrix(alpha, p))


def _sign_fix(K: np.ndarray) -> np.ndarray:
    K = K.copy()
    for j in range(K.shape[1]):
        col = K[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0:
            K[:, j] = -col
    return K


def rank_and_kernel(alpha: OneForm, p, M: LevelSetManifold, check: bool = True) -> TangentKernelData:
    """Rank of ω restricted to T_pM and an orthonormal ambient basis of its kernel."""
    tk = tangent_basis(p, M, check=check)
    T = tk.tangent_basis
    B = T.T @ omega_matrix(alpha, tk.point) @ T
    B = 0.5 * (B - B.T)
    _, s, vt = np.linalg.svd(B)
    if s.size == 0 or s[0] == 0.0:
        rank = 0
    else:
        rank = int(np.sum(s > M.rank_tol * s[0]))
    if rank % 2:
        raise RankAmbiguityError(
            f"odd numerical rank {rank}; singular spectrum {s.tolist()}", singular_values=s
        )
    K = T @ vt[rank:].T
    if K.shape[1]:
        K, _ = np.linalg.qr(K)
        K = _sign_fix(K)
    return TangentKernelData(
        point=tk.point,
        tangent_basis=T,
        restricted_form=B,
        rank=rank,
        kernel_basis=K,
        singular_values=s,
    )


def kernel_residual(v, alpha: OneForm, p, M: LevelSetManifold, data: TangentKernelData | None = None) -> float:
    """‖B c‖ / max(‖v‖, ε) with c the tangent coordinates of v.

    Zero exactly when the tangential part of ``v`` lies in ker(ω|T_pM).
    """
    if data is None:
        data = rank_and_kernel(alpha, p, M)
    v = np.asarray(v, dtype=float)
    c = data.tangent_basis.T @ v
    return float(np.linalg.norm(data.restricted_form @ c) / max(np.linalg.norm(v), 1e-300))


def subspace_distance(A: np.ndarray, B: np.ndarray) -> float:
    """Spectral-norm distance between orthogonal projectors onto col(A), col(B)."""
    qa, _ = np.linalg.qr(np.asarray(A, float))
    qb, _ = np.linalg.qr(np.asarray(B, float))
    return float(np.linalg.norm(qa @ qa.T - qb @ qb.T, 2))


# ---------------------------------------------------------------------------
# Poisson bracket
# ---------------------------------------------------------------------------


def poisson_bracket(F: Expression, G: Expression, p, ambient: AmbientSpace) -> float:
    """{F, G} = Σ_j (∂F/∂x_j ∂G/∂y_j - ∂F/∂y_j ∂G/∂x_j); {x_j, y_j} = +1."""
    if not ambient.pairing:
        raise ValueError("ambient space declares no symplectic pairing")
    dF = gradient(F, p)
    dG = gradient(G, p)
    qi = [a for a, _ in ambient.pairing]
    pi = [b for _, b in ambient.pairing]
    out = np.sum(dF[..., qi] * dG[..., pi] - dF[..., pi] * dG[..., qi], axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def sample_manifold(
    M: LevelSetManifold,
    n: int,
    rng: np.random.Generator,
    box: float = 2.0,
    max_tries: int | None = None,
) -> np.ndarray:
    """Rejection sampling: uniform points in [-box, box]^dim projected onto M.

    Candidates whose projection fails or lands on a singular point of the
    constraint map are discarded.
    """
    max_tries = 50 * n + 100 if max_tries is None else max_tries
    out = []
    tries = 0
    while len(out) < n:
        if tries >= max_tries:
            raise ProjectionError(f"only {len(out)} of {n} samples reached the manifold")
        tries += 1
        q = rng.uniform(-box, box, M.ambient.dim)
        try:
            p = project_to_manifold(q, M)
            tangent_basis(p, M)
        except GeometryError:
            continue
        out.append(p)
    return np.array(out).reshape(n, M.ambient.dim)
