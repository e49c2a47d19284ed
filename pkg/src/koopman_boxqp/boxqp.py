"""Feasible predictor-corrector interior-point solver for box-constrained QPs.

Solves

    min_z  1/2 z^T H z + z^T h     s.t.  -1 <= z <= 1

with H symmetric positive definite.  The iteration count is bounded a priori
by :func:`certified_iteration_bound`, independent of the problem data.

Two linear-algebra backends are provided.  The dense backend factorizes the
full reduced Newton matrix with Cholesky.  The structured backend handles
Hessians of the form

    rho * [[F^T F, -F^T], [-F, I]] + blkdiag(Q_u, diag(q_x))

(the dynamics-relaxed MPC layout) and only factorizes an (N n_u)-sized Schur
complement.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
import scipy.linalg as sla

CONTRACTION_CONSTANT = 0.2348
NEIGHBORHOOD_BETA = 0.25


class NumericalBreakdown(RuntimeError):
    """A Cholesky factorization failed or an iterate lost strict positivity."""


# ------------------------------------------------------------------ problem types


@dataclass(frozen=True)
class DenseHessian:
    matrix: np.ndarray

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def to_dense(self) -> np.ndarray:
        return self.matrix

    def matvec(self, z: np.ndarray) -> np.ndarray:
        return self.matrix @ z


@dataclass(frozen=True)
class KoopmanHessian:
    """Structured Hessian ``rho*[[F'F, -F'], [-F, I]] + blkdiag(input_block, diag(state_diag))``.

    ``input_block`` holds ``W_u + R`` (stacked over the horizon) and
    ``state_diag`` the stacked diagonal of ``W_x``.  Decision vector order is
    ``(U, X)``.
    """

    F: np.ndarray
    input_block: np.ndarray
    state_diag: np.ndarray
    rho: float

    @property
    def n_inputs(self) -> int:
        return self.F.shape[1]

    @property
    def n_states(self) -> int:
        return self.F.shape[0]

    @property
    def n(self) -> int:
        return self.n_inputs + self.n_states

    def to_dense(self) -> np.ndarray:
        F, rho = self.F, self.rho
        m = self.n_inputs
        H = np.empty((self.n, self.n))
        H[:m, :m] = rho * (F.T @ F) + self.input_block
        H[:m, m:] = -rho * F.T
        H[m:, :m] = -rho * F
        H[m:, m:] = np.diag(rho + self.state_diag)
        return H

    def matvec(self, z: np.ndarray) -> np.ndarray:
        m = self.n_inputs
        zu, zx = z[:m], z[m:]
        r = self.F @ zu - zx
        return np.concatenate(
            [self.rho * (self.F.T @ r) + self.input_block @ zu,
             -self.rho * r + self.state_diag * zx]
        )


HessianForm = Union[DenseHessian, KoopmanHessian]


@dataclass(frozen=True)
class BoxQpProblem:
    """Strictly convex QP over the box ``[-1, 1]^n``.

    Positive definiteness of the Hessian is verified at construction by a
    Cholesky factorization (of the Schur complement for the structured form).
    """

    hessian: HessianForm
    h: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h, dtype=float).reshape(-1)
        object.__setattr__(self, "h", h)
        hess = self.hessian
        if isinstance(hess, DenseHessian):
            H = np.asarray(hess.matrix, dtype=float)
            if H.ndim != 2 or H.shape[0] != H.shape[1]:
                raise ValueError(f"dense Hessian must be square, got shape {H.shape}")
            if not np.allclose(H, H.T, rtol=1e-12, atol=1e-12 * max(1.0, np.abs(H).max())):
                raise ValueError("dense Hessian is not symmetric")
            object.__setattr__(self, "hessian", DenseHessian(H))
            try:
                sla.cholesky(H, lower=True)
            except np.linalg.LinAlgError as exc:
                raise ValueError("Hessian is not positive definite") from exc
        elif isinstance(hess, KoopmanHessian):
            F = np.asarray(hess.F, dtype=float)
            Q = np.asarray(hess.input_block, dtype=float)
            q = np.asarray(hess.state_diag, dtype=float).reshape(-1)
            rho = float(hess.rho)
            if F.ndim != 2 or Q.shape != (F.shape[1], F.shape[1]) or q.shape != (F.shape[0],):
                raise ValueError(
                    f"inconsistent structured Hessian shapes F{F.shape}, "
                    f"input_block{Q.shape}, state_diag{q.shape}"
                )
            if rho <= 0:
                raise ValueError("rho must be positive")
            if np.any(q <= 0):
                raise ValueError("state_diag entries must be strictly positive")
            if not np.allclose(Q, Q.T, atol=1e-12 * max(1.0, np.abs(Q).max(initial=0.0))):
                raise ValueError("input_block is not symmetric")
            object.__setattr__(self, "hessian", KoopmanHessian(F, Q, q, rho))
            # Schur complement of the state block: Q + rho F^T (I - rho (rho + q)^-1) F
            w = rho * q / (rho + q)
            S = Q + F.T @ (w[:, None] * F)
            try:
                sla.cholesky(S, lower=True)
            except np.linalg.LinAlgError as exc:
                raise ValueError("structured Hessian is not positive definite") from exc
        else:
            raise TypeError(f"unsupported Hessian form {type(hess).__name__}")
        if h.shape != (self.hessian.n,):
            raise ValueError(f"h has length {h.size}, expected {self.hessian.n}")
        if not np.all(np.isfinite(h)):
            raise ValueError("h contains non-finite entries")

    @property
    def n(self) -> int:
        return self.hessian.n

    @property
    def is_structured(self) -> bool:
        return isinstance(self.hessian, KoopmanHessian)

    def objective(self, z: np.ndarray) -> float:
        return 0.5 * float(z @ self.hessian.matvec(z)) + float(self.h @ z)

    def with_dense_hessian(self) -> "BoxQpProblem":
        return BoxQpProblem(DenseHessian(self.hessian.to_dense()), self.h)


@dataclass
class IpmIterate:
    """Primal, dual and slack variables of the scaled problem.

    ``gamma``/``phi`` pair with the constraint ``z <= 1`` (``phi = 1 - z``) and
    ``theta``/``psi`` with ``z >= -1`` (``psi = 1 + z``).  ``lam`` is the
    objective scaling applied at initialization.
    """

    z: np.ndarray
    gamma: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    lam: float

    @property
    def n(self) -> int:
        return self.z.size

    @property
    def v(self) -> np.ndarray:
        return np.concatenate([self.gamma, self.theta])

    @property
    def s(self) -> np.ndarray:
        return np.concatenate([self.phi, self.psi])

    @property
    def gap(self) -> float:
        return float(self.gamma @ self.phi + self.theta @ self.psi)

    @property
    def mu(self) -> float:
        return self.gap / (2 * self.n)

    def copy(self) -> "IpmIterate":
        return IpmIterate(self.z.copy(), self.gamma.copy(), self.theta.copy(),
                          self.phi.copy(), self.psi.copy(), self.lam)


@dataclass(frozen=True)
class NewtonDirection:
    dz: np.ndarray
    dgamma: np.ndarray
    dtheta: np.ndarray
    dphi: np.ndarray
    dpsi: np.ndarray

    @property
    def dv(self) -> np.ndarray:
        return np.concatenate([self.dgamma, self.dtheta])

    @property
    def ds(self) -> np.ndarray:
        return np.concatenate([self.dphi, self.dpsi])

    @property
    def curvature(self) -> float:
        """``dv^T ds``; equals ``dz^T (2 lam H) dz`` for an exact solve."""
        return float(self.dgamma @ self.dphi + self.dtheta @ self.dpsi)


@dataclass
class SolveReport:
    z_star: np.ndarray
    iterations: int
    certified_bound: int
    final_gap: float
    epsilon: float
    lam: float
    mu_trace: list = field(default_factory=list)
    per_iteration_contraction: list = field(default_factory=list)
    step_sizes: list = field(default_factory=list)
    neighborhood_trace: list = field(default_factory=list)
    curvature_trace: list = field(default_factory=list)
    backend: str = "dense"
    wall_time: float = 0.0

    @property
    def converged(self) -> bool:
        return self.final_gap <= self.epsilon

    def to_dict(self) -> dict:
        return {
            "z_star": self.z_star.tolist(),
            "iterations": self.iterations,
            "certified_bound": self.certified_bound,
            "final_gap": self.final_gap,
            "epsilon": self.epsilon,
            "converged": self.converged,
            "lambda": self.lam,
            "backend": self.backend,
            "mu_trace": list(self.mu_trace),
            "per_iteration_contraction": list(self.per_iteration_contraction),
            "step_sizes": list(self.step_sizes),
            "wall_time": self.wall_time,
        }


# ------------------------------------------------------------------ certificate


def contraction_factor(n: int) -> float:
    """Guaranteed per-iteration decrease factor of the duality measure."""
    return (1.0 - CONTRACTION_CONSTANT / math.sqrt(2 * n)) ** 2


def certified_iteration_bound(n: int, epsilon: float) -> int:
    """Data-independent worst-case iteration count for an n-variable BoxQP.

    ``ceil(log(2n/eps) / (-2 log(1 - 0.2348/sqrt(2n))))``.
    """
    if int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n!r}")
    if not (0.0 < epsilon < 2 * n):
        raise ValueError(f"epsilon must lie in (0, 2n) = (0, {2 * n}), got {epsilon!r}")
    ratio = math.log(2 * n / epsilon) / (-2.0 * math.log(1.0 - CONTRACTION_CONSTANT / math.sqrt(2 * n)))
    return max(1, math.ceil(ratio))


# ------------------------------------------------------------------ IPM pieces


def initialize(problem: BoxQpProblem) -> Optional[IpmIterate]:
    """Cost-free strictly feasible starting point in the 1/4-neighborhood.

    Returns ``None`` when ``h = 0``; the minimizer is then ``z = 0``.
    """
    h = problem.h
    hnorm = float(np.linalg.norm(h))
    if hnorm == 0.0:
        return None
    lam = 1.0 / (4.0 * math.sqrt(2.0) * hnorm)
    n = problem.n
    ones = np.ones(n)
    return IpmIterate(
        z=np.zeros(n),
        gamma=1.0 - lam * h,
        theta=1.0 + lam * h,
        phi=ones.copy(),
        psi=ones.copy(),
        lam=lam,
    )


def neighborhood_residual(it: IpmIterate) -> float:
    """``||[gamma*phi; theta*psi] - mu 1||_2 / mu``."""
    mu = it.mu
    return float(np.linalg.norm(np.concatenate([it.gamma * it.phi, it.theta * it.psi]) - mu)) / mu


def kkt_residuals(it: IpmIterate, problem: BoxQpProblem) -> tuple[float, float, float]:
    """Relative stationarity residual and the two absolute slack residuals."""
    lam = it.lam
    Hz = problem.hessian.matvec(it.z)
    stat = 2 * lam * Hz + 2 * lam * problem.h + it.gamma - it.theta
    scale = max(1.0, float(np.linalg.norm(it.gamma)), float(np.linalg.norm(it.theta)),
                float(np.linalg.norm(2 * lam * Hz)))
    return (
        float(np.linalg.norm(stat)) / scale,
        float(np.max(np.abs(it.z + it.phi - 1.0))),
        float(np.max(np.abs(it.z - it.psi + 1.0))),
    )


class _DenseFactor:
    name = "dense"

    def __init__(self, problem: BoxQpProblem, lam: float, refine: bool = False):
        self._H2 = 2.0 * lam * problem.hessian.to_dense()
        self._refine = refine
        self._M = None
        self._cho = None

    def factorize(self, d: np.ndarray) -> None:
        M = self._H2.copy()
        M.flat[:: M.shape[0] + 1] += d
        try:
            self._cho = sla.cho_factor(M, lower=True, overwrite_a=not self._refine, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise NumericalBreakdown("Cholesky of the reduced Newton matrix failed") from exc
        self._M = M if self._refine else None

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        x = sla.cho_solve(self._cho, rhs, check_finite=False)
        if self._refine:
            x += sla.cho_solve(self._cho, rhs - self._M @ x, check_finite=False)
        return x


class _StructuredFactor:
    """Schur-complement solve of ``[[H11, -c F^T], [-c F, diag(h22)]]`` with ``c = 2 lam rho``.

    Only the (N n_u)-sized Schur complement ``H11 - c^2 F^T diag(h22)^-1 F``
    is Cholesky-factorized; the state block is diagonal.
    """

    name = "structured"

    def __init__(self, problem: BoxQpProblem, lam: float):
        hess = problem.hessian
        self._F = hess.F
        self._m = hess.n_inputs
        self._c = 2.0 * lam * hess.rho
        self._base11 = 2.0 * lam * hess.input_block
        self._base22 = self._c + 2.0 * lam * hess.state_diag
        self._cho = None
        self._inv22 = None

    def factorize(self, d: np.ndarray) -> None:
        m, c, F = self._m, self._c, self._F
        h22 = self._base22 + d[m:]
        inv22 = 1.0 / h22
        # H11 - c^2 F' D^-1 F = base11 + diag(d_u) + F' diag(c - c^2/h22) F
        w = c - c * c * inv22
        S = self._base11 + F.T @ (w[:, None] * F)
        S.flat[:: m + 1] += d[:m]
        try:
            self._cho = sla.cho_factor(S, lower=True, overwrite_a=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise NumericalBreakdown("Cholesky of the Schur complement failed") from exc
        self._inv22 = inv22

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        m, c, F = self._m, self._c, self._F
        r1, r2 = rhs[:m], rhs[m:]
        t = self._inv22 * r2
        du = sla.cho_solve(self._cho, r1 + c * (F.T @ t), check_finite=False)
        dx = t + c * self._inv22 * (F @ du)
        return np.concatenate([du, dx])


def make_factor(problem: BoxQpProblem, lam: float, backend: str = "auto", refine: bool = False):
    if backend == "auto":
        backend = "structured" if problem.is_structured else "dense"
    if backend == "dense":
        return _DenseFactor(problem, lam, refine=refine)
    if backend == "structured":
        if not problem.is_structured:
            raise ValueError("structured backend needs a KoopmanHessian")
        return _StructuredFactor(problem, lam)
    raise ValueError(f"unknown backend {backend!r}")


def _direction(it: IpmIterate, sigma: float, mu: float, factor, factorize: bool = True) -> NewtonDirection:
    g_over_phi = it.gamma / it.phi
    t_over_psi = it.theta / it.psi
    if factorize:
        factor.factorize(g_over_phi + t_over_psi)
    if sigma:
        sm_phi = sigma * mu / it.phi
        sm_psi = sigma * mu / it.psi
        rhs = it.gamma - it.theta + sm_psi - sm_phi
    else:
        rhs = it.gamma - it.theta
    dz = factor.solve(rhs)
    if sigma:
        dgamma = sm_phi - it.gamma + g_over_phi * dz
        dtheta = sm_psi - it.theta - t_over_psi * dz
    else:
        dgamma = g_over_phi * dz - it.gamma
        dtheta = -it.theta - t_over_psi * dz
    return NewtonDirection(dz, dgamma, dtheta, -dz, dz.copy())


def newton_direction(it: IpmIterate, problem: BoxQpProblem, sigma: float, mu: float,
                     refine: bool = False) -> NewtonDirection:
    """Newton direction from the dense reduced system.

    The reduced matrix is ``2 lam H + diag(gamma/phi + theta/psi)``; the dual
    and slack components are recovered by elimination.
    """
    return _direction(it, sigma, mu, make_factor(problem, it.lam, "dense", refine=refine))


def newton_direction_structured(it: IpmIterate, problem: BoxQpProblem, sigma: float,
                                mu: float) -> NewtonDirection:
    """Same contract as :func:`newton_direction`, via the Schur-complement backend."""
    return _direction(it, sigma, mu, make_factor(problem, it.lam, "structured"))


def predictor_step_size(mu: float, dv: np.ndarray, ds: np.ndarray) -> float:
    prod = dv * ds
    dmu = prod.sum() / prod.size
    dev = float(np.linalg.norm(prod - dmu))
    if dev == 0.0:
        return 0.5
    return min(0.5, math.sqrt(mu / (8.0 * dev)))


def _step(it: IpmIterate, d: NewtonDirection, alpha: float) -> IpmIterate:
    return IpmIterate(
        it.z + alpha * d.dz,
        it.gamma + alpha * d.dgamma,
        it.theta + alpha * d.dtheta,
        it.phi + alpha * d.dphi,
        it.psi + alpha * d.dpsi,
        it.lam,
    )


def _check_positive(it: IpmIterate, where: str, k: int) -> None:
    if (it.gamma.min() <= 0 or it.theta.min() <= 0 or it.phi.min() <= 0 or it.psi.min() <= 0):
        raise NumericalBreakdown(f"iterate lost strict positivity after the {where} step of iteration {k}")


IterationCallback = Callable[[int, IpmIterate, dict], None]


def solve(problem: BoxQpProblem, epsilon: float = 1e-6, backend: str = "auto",
          refine: bool = False, callback: Optional[IterationCallback] = None) -> SolveReport:
    """Run the certified predictor-corrector IPM.

    Each iteration takes one predictor step (affine direction, adaptive step
    length) followed by one unit corrector step toward the central path.
    Terminates when the duality gap ``v^T s`` of the scaled problem drops to
    ``epsilon`` or after ``certified_iteration_bound(n, epsilon)`` iterations.

    ``callback(k, iterate, info)`` is invoked after every accepted iterate
    (``k = 0`` for the starting point).

    Raises
    ------
    NumericalBreakdown
        If a factorization fails or positivity is lost.
    """
    t0 = time.perf_counter()
    n = problem.n
    bound = certified_iteration_bound(n, epsilon)
    it = initialize(problem)
    if it is None:
        return SolveReport(np.zeros(n), 0, bound, 0.0, epsilon, 0.0, mu_trace=[0.0],
                           backend=backend, wall_time=time.perf_counter() - t0)

    factor = make_factor(problem, it.lam, backend, refine=refine)
    twon = 2 * n
    gap = it.gap
    mu = gap / twon
    report = SolveReport(it.z, 0, bound, gap, epsilon, it.lam, backend=factor.name)
    report.mu_trace.append(mu)
    report.neighborhood_trace.append(neighborhood_residual(it))
    if callback is not None:
        callback(0, it, {})

    k = 0
    while k < bound:
        if gap <= epsilon:
            break
        pred = _direction(it, 0.0, mu, factor)
        dvp, dsp = pred.dv, pred.ds
        alpha = predictor_step_size(mu, dvp, dsp)
        hat = _step(it, pred, alpha)
        _check_positive(hat, "predictor", k)
        mu_hat = hat.gap / twon
        corr = _direction(hat, 1.0, mu_hat, factor)
        it = _step(hat, corr, 1.0)
        k += 1
        _check_positive(it, "corrector", k)

        gap = it.gap
        mu_next = gap / twon
        report.per_iteration_contraction.append(mu_next / mu)
        report.mu_trace.append(mu_next)
        report.step_sizes.append(alpha)
        report.curvature_trace.extend([pred.curvature, corr.curvature])
        report.neighborhood_trace.append(neighborhood_residual(it))
        if callback is not None:
            callback(k, it, {"predictor": pred, "corrector": corr, "alpha": alpha,
                             "mu_hat": mu_hat, "mu_prev": mu})
        mu = mu_next

    report.z_star = it.z
    report.iterations = k
    report.final_gap = gap
    report.wall_time = time.perf_counter() - t0
    return report


# ------------------------------------------------------------------ JSON format


def problem_to_dict(problem: BoxQpProblem, epsilon: float = 1e-6) -> dict:
    hess = problem.hessian
    if isinstance(hess, DenseHessian):
        hd = {"dense": hess.matrix.tolist()}
    else:
        hd = {"koopman": {"F": hess.F.tolist(), "input_block": hess.input_block.tolist(),
                          "state_diag": hess.state_diag.tolist(), "rho": hess.rho}}
    return {"n": problem.n, "hessian": hd, "h": problem.h.tolist(), "epsilon": epsilon}


def problem_from_dict(data: dict) -> tuple[BoxQpProblem, float]:
    """Parse the JSON problem layout; returns the problem and its epsilon."""
    for key in ("n", "hessian", "h"):
        if key not in data:
            raise KeyError(f"problem file is missing field {key!r}")
    hd = data["hessian"]
    if "dense" in hd:
        hess = DenseHessian(np.asarray(hd["dense"], dtype=float))
    elif "koopman" in hd:
        kd = hd["koopman"]
        for key in ("F", "input_block", "state_diag", "rho"):
            if key not in kd:
                raise KeyError(f"koopman hessian is missing field {key!r}")
        F = np.asarray(kd["F"], dtype=float)
        hess = KoopmanHessian(F.reshape(len(kd["F"]), -1), np.asarray(kd["input_block"], dtype=float),
                              np.asarray(kd["state_diag"], dtype=float), float(kd["rho"]))
    else:
        raise KeyError("hessian must contain either 'dense' or 'koopman'")
    problem = BoxQpProblem(hess, np.asarray(data["h"], dtype=float))
    if problem.n != int(data["n"]):
        raise ValueError(f"declared n={data['n']} does not match data dimension {problem.n}")
    return problem, float(data.get("epsilon", 1e-6))


def time_factorization(problem: BoxQpProblem, backend: str, repeats: int = 5) -> float:
    """Median wall time of one reduced-Newton factorization at the starting point."""
    it = initialize(problem)
    lam = it.lam if it is not None else 1.0
    factor = make_factor(problem, lam, backend)
    d = np.ones(problem.n) * 2.0 if it is None else it.gamma / it.phi + it.theta / it.psi
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        factor.factorize(d)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))
