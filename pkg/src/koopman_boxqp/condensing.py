"""Multi-step prediction matrices and the dynamics-relaxed Koopman BoxQP.

The decision vector of the BoxQP is ``z = (u_0, ..., u_{N-1}, x_1, ..., x_N)``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .boxqp import BoxQpProblem, KoopmanHessian


@dataclass(frozen=True)
class NmpcSpec:
    """Tracking MPC data: horizon, diagonal weights, references and penalty."""

    N: int
    W_x: np.ndarray
    W_u: np.ndarray
    W_du: np.ndarray
    x_r: np.ndarray
    u_r: np.ndarray
    rho: float

    def __post_init__(self):
        for name in ("W_x", "W_u", "W_du", "x_r", "u_r"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1))
        if self.N < 1:
            raise ValueError("horizon N must be at least 1")
        if self.W_u.shape != (self.n_u,) or self.W_du.shape != (self.n_u,) or self.u_r.shape != (self.n_u,):
            raise ValueError("W_u, W_du and u_r must all have length n_u")
        if self.x_r.shape != (self.n_x,):
            raise ValueError("x_r must have length n_x")
        if np.any(self.W_x <= 0) or np.any(self.W_u <= 0):
            raise ValueError("W_x and W_u must be positive definite")
        if np.any(self.W_du < 0):
            raise ValueError("W_du must be non-negative")
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if np.any(np.abs(self.x_r) > 1) or np.any(np.abs(self.u_r) > 1):
            raise ValueError("references must lie inside the scaled box [-1, 1]")

    @property
    def n_x(self) -> int:
        return self.W_x.size

    @property
    def n_u(self) -> int:
        return self.W_u.size

    @property
    def n(self) -> int:
        return self.N * (self.n_u + self.n_x)

    @classmethod
    def kdv_default(cls, n_x: int = 100, n_u: int = 4, N: int = 10, rho: float = 100.0) -> "NmpcSpec":
        return cls(N, np.ones(n_x), np.full(n_u, 0.05), np.zeros(n_u), np.zeros(n_x), np.zeros(n_u), rho)

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NmpcSpec":
        for key in ("N", "W_x", "W_u", "W_du", "x_r", "u_r", "rho"):
            if key not in d:
                raise KeyError(f"NMPC spec is missing field {key!r}")
        return cls(int(d["N"]), d["W_x"], d["W_u"], d["W_du"], d["x_r"], d["u_r"], float(d["rho"]))


@dataclass(frozen=True)
class PredictionStack:
    """``col(x_1..x_N) = E psi_0 + F col(u_0..u_{N-1})``."""

    E: np.ndarray
    F: np.ndarray
    N: int

    @property
    def n_x(self) -> int:
        return self.E.shape[0] // self.N

    @property
    def n_u(self) -> int:
        return self.F.shape[1] // self.N


def build_prediction_stack(model, N: int) -> PredictionStack:
    """Stack ``C A^{k+1}`` into E and ``C A^{i-j} B`` into the lower block triangle of F.

    ``model`` is anything with ``A``, ``B`` and ``C`` attributes.
    """
    if N < 1:
        raise ValueError("horizon N must be at least 1")
    A, B, C = np.atleast_2d(model.A), np.atleast_2d(model.B), np.atleast_2d(model.C)
    n_x, n_u = C.shape[0], B.shape[1]
    E = np.empty((N * n_x, A.shape[0]))
    F = np.zeros((N * n_x, N * n_u))
    CAk = C.copy()  # C A^k
    for k in range(N):
        CB = CAk @ B  # C A^k B
        for j in range(N - k):
            i = j + k
            F[i * n_x:(i + 1) * n_x, j * n_u:(j + 1) * n_u] = CB
        CAk = CAk @ A
        E[k * n_x:(k + 1) * n_x] = CAk
    return PredictionStack(E, F, N)


def build_rbar(W_du, N: int) -> np.ndarray:
    """Matrix of ``sum_k ||u_k - u_{k-1}||^2_{W_du}`` over the stacked inputs, ``u_{-1} = 0``.

    Block tridiagonal: ``2 W`` on the diagonal except ``W`` in the last block,
    ``-W`` on the off-diagonals.
    """
    w = np.asarray(W_du, dtype=float).reshape(-1)
    n_u = w.size
    T = 2.0 * np.eye(N) - np.eye(N, k=1) - np.eye(N, k=-1)
    T[-1, -1] = 1.0
    return np.kron(T, np.diag(w)).reshape(N * n_u, N * n_u)


def _check_dims(spec: NmpcSpec, stack: PredictionStack) -> None:
    if stack.N != spec.N or stack.n_x != spec.n_x or stack.n_u != spec.n_u:
        raise ValueError(
            f"prediction stack (N={stack.N}, n_x={stack.n_x}, n_u={stack.n_u}) does not match "
            f"spec (N={spec.N}, n_x={spec.n_x}, n_u={spec.n_u})"
        )


class KoopmanBoxQp:
    """Dynamics-relaxed BoxQP with a fixed Hessian and an affine linear term.

    ``h(psi0) = rho [F'E; -E] psi0 - [W_u u_r; W_x x_r]`` (references repeated
    over the horizon).  Only the linear term changes between sampling
    instants, so everything else is built once here.
    """

    def __init__(self, spec: NmpcSpec, stack: PredictionStack):
        _check_dims(spec, stack)
        self.spec = spec
        self.stack = stack
        N, F, E, rho = spec.N, stack.F, stack.E, spec.rho
        input_block = np.diag(np.tile(spec.W_u, N)) + build_rbar(spec.W_du, N)
        self.hessian = KoopmanHessian(F, input_block, np.tile(spec.W_x, N), rho)
        self.h_map = rho * np.vstack([F.T @ E, -E])
        self._wu_bar = np.tile(spec.W_u, N)
        self._wx_bar = np.tile(spec.W_x, N)
        self.h_const = self.reference_term(spec.x_r, spec.u_r)
        self._template: Optional[BoxQpProblem] = None

    @property
    def n(self) -> int:
        return self.spec.n

    @property
    def n_inputs(self) -> int:
        return self.spec.N * self.spec.n_u

    def reference_term(self, x_r=None, u_r=None) -> np.ndarray:
        x_r = self.spec.x_r if x_r is None else np.asarray(x_r, dtype=float)
        u_r = self.spec.u_r if u_r is None else np.asarray(u_r, dtype=float)
        N = self.spec.N
        return np.concatenate([self._wu_bar * np.tile(u_r, N), self._wx_bar * np.tile(x_r, N)])

    def h(self, psi0: np.ndarray, x_r=None, u_r=None, out: Optional[np.ndarray] = None) -> np.ndarray:
        """Linear term for a lifted feedback state; optional time-varying references."""
        if out is None:
            out = np.empty(self.n)
        np.dot(self.h_map, psi0, out=out)
        if x_r is None and u_r is None:
            out -= self.h_const
        else:
            out -= self.reference_term(x_r, u_r)
        return out

    def problem(self, psi0: np.ndarray, x_r=None, u_r=None) -> BoxQpProblem:
        if self._template is None:
            self._template = BoxQpProblem(self.hessian, self.h(psi0, x_r, u_r))
            return self._template
        # Hessian already validated; skip the construction-time factorization
        p = object.__new__(BoxQpProblem)
        object.__setattr__(p, "hessian", self._template.hessian)
        object.__setattr__(p, "h", self.h(psi0, x_r, u_r))
        return p

    def split(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Split a decision vector into input rows (N, n_u) and state rows (N, n_x)."""
        m = self.n_inputs
        return z[:m].reshape(self.spec.N, self.spec.n_u), z[m:].reshape(self.spec.N, self.spec.n_x)

    def dynamics_residual(self, z: np.ndarray, psi0: np.ndarray) -> float:
        m = self.n_inputs
        return float(np.linalg.norm(z[m:] - self.stack.E @ psi0 - self.stack.F @ z[:m]))


def build_boxqp(spec: NmpcSpec, stack: PredictionStack, psi0: np.ndarray) -> tuple[KoopmanBoxQp, np.ndarray]:
    qp = KoopmanBoxQp(spec, stack)
    return qp, qp.h(psi0)


@dataclass(frozen=True)
class GeneralQp:
    """Condensed input-only QP ``min z'Hz + 2z'h`` s.t. ``-1 <= E psi0 + F z <= 1``, ``-1 <= z <= 1``.

    Built for inspection only; nothing in this package solves it.
    """

    H: np.ndarray
    h: np.ndarray
    state_map: np.ndarray
    state_offset: np.ndarray

    @property
    def n_dec(self) -> int:
        return self.H.shape[0]

    @property
    def n_constraints(self) -> int:
        return 2 * (self.state_map.shape[0] + self.n_dec)


def build_general_qp(spec: NmpcSpec, stack: PredictionStack, psi0: np.ndarray) -> GeneralQp:
    _check_dims(spec, stack)
    N, E, F = spec.N, stack.E, stack.F
    wx = np.tile(spec.W_x, N)
    wu = np.tile(spec.W_u, N)
    H = F.T @ (wx[:, None] * F) + np.diag(wu) + build_rbar(spec.W_du, N)
    offset = E @ psi0
    h = F.T @ (wx * (offset - np.tile(spec.x_r, N))) - wu * np.tile(spec.u_r, N)
    return GeneralQp(H, h, F.copy(), offset)
