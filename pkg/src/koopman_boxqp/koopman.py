"""Thin-plate RBF lifting and EDMD identification of a linear Koopman predictor."""
from __future__ import annotations

import gzip
import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import scipy.linalg as sla

logger = logging.getLogger(__name__)

DEFAULT_RIDGE = 1e-8


class RankDeficientError(np.linalg.LinAlgError):
    """The EDMD regressor matrix is (numerically) rank deficient."""

    def __init__(self, smallest_singular_value: float):
        self.smallest_singular_value = smallest_singular_value
        super().__init__(
            "EDMD regressor is rank deficient "
            f"(smallest singular value {smallest_singular_value:.3e}); use ridge > 0"
        )


@dataclass(frozen=True)
class LiftSpec:
    """Lifting ``psi(x) = [x; phi_1(x); ...; phi_m(x)]`` with thin-plate RBFs.

    ``phi_i(x) = r^2 log r`` with ``r = ||x - c_i||`` and ``phi_i = 0`` at ``r = 0``.
    """

    centers: np.ndarray
    n_x: int
    kind: str = "thin_plate"

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=float).reshape(-1, self.n_x)
        object.__setattr__(self, "centers", c)
        if self.kind != "thin_plate":
            raise ValueError(f"unsupported RBF kind {self.kind!r}")

    @property
    def n_rbf(self) -> int:
        return self.centers.shape[0]

    @property
    def n_psi(self) -> int:
        return self.n_x + self.n_rbf

    @classmethod
    def identity(cls, n_x: int) -> "LiftSpec":
        return cls(np.zeros((0, n_x)), n_x)


def sample_rbf_centers(n_rbf: int, n_x: int, bounds=(-1.0, 1.0), seed: int = 0) -> np.ndarray:
    """Uniform i.i.d. centers inside ``bounds`` (a pair, or one pair per coordinate)."""
    if n_rbf < 1:
        raise ValueError("n_rbf must be at least 1")
    b = np.asarray(bounds, dtype=float)
    lo, hi = (b[0], b[1]) if b.ndim == 1 else (b[:, 0], b[:, 1])
    rng = np.random.default_rng(seed)
    return rng.uniform(lo, hi, size=(n_rbf, n_x))


def _thin_plate(X: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # r^2 log r = 0.5 r^2 log r^2, using ||x||^2 - 2 x.c + ||c||^2
    r2 = (X * X).sum(1)[:, None] - 2.0 * X @ centers.T + (centers * centers).sum(1)[None, :]
    np.maximum(r2, 0.0, out=r2)
    out = np.zeros_like(r2)
    pos = r2 > 0
    out[pos] = 0.5 * r2[pos] * np.log(r2[pos])
    return out


def lift(x: np.ndarray, spec: LiftSpec) -> np.ndarray:
    """Lift one state (1-D) or a batch of states (rows of a 2-D array)."""
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != spec.n_x:
        raise ValueError(f"state has dimension {X.shape[1]}, lift expects {spec.n_x}")
    if spec.n_rbf == 0:
        out = X.copy()
    else:
        out = np.hstack([X, _thin_plate(X, spec.centers)])
    return out[0] if single else out


@dataclass(frozen=True)
class SnapshotSet:
    """Rows of ``(x_j, u_j, x_j^+)`` triples."""

    X: np.ndarray
    U: np.ndarray
    Xplus: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        U = np.asarray(self.U, dtype=float)
        U = U.reshape(X.shape[0], -1) if U.ndim < 2 else U
        Xp = np.atleast_2d(np.asarray(self.Xplus, dtype=float))
        if not (X.shape[0] == U.shape[0] == Xp.shape[0]):
            raise ValueError(f"row counts differ: X {X.shape[0]}, U {U.shape[0]}, Xplus {Xp.shape[0]}")
        if X.shape[1] != Xp.shape[1]:
            raise ValueError("X and Xplus have different state dimensions")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(U)) and np.all(np.isfinite(Xp))):
            raise ValueError("snapshot data contains non-finite entries")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "Xplus", Xp)

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def n_x(self) -> int:
        return self.X.shape[1]

    @property
    def n_u(self) -> int:
        return self.U.shape[1]

    def subset(self, rows) -> "SnapshotSet":
        return SnapshotSet(self.X[rows], self.U[rows], self.Xplus[rows])

    def split_holdout(self, fraction: float = 0.1) -> tuple["SnapshotSet", "SnapshotSet"]:
        """Split off the trailing ``fraction`` of rows (rows are trajectory-major)."""
        n_hold = int(round(len(self) * fraction))
        cut = len(self) - n_hold
        return self.subset(slice(0, cut)), self.subset(slice(cut, None))

    def to_csv(self, path) -> None:
        header = ",".join(
            [f"x{i}" for i in range(self.n_x)]
            + [f"u{i}" for i in range(self.n_u)]
            + [f"xplus{i}" for i in range(self.n_x)]
        )
        np.savetxt(path, np.hstack([self.X, self.U, self.Xplus]), delimiter=",",
                   header=header, comments="", fmt="%.17g")

    @classmethod
    def from_csv(cls, path) -> "SnapshotSet":
        path = Path(path)
        opener = gzip.open if path.suffix == ".gz" else open
        with opener(path, "rt") as fh:
            header = fh.readline().strip().split(",")
        n_x = sum(1 for c in header if c.startswith("x") and not c.startswith("xplus"))
        n_u = sum(1 for c in header if c.startswith("u"))
        if n_x == 0 or len(header) != 2 * n_x + n_u:
            raise ValueError(f"{path}: unrecognized snapshot header")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, :n_x], data[:, n_x:n_x + n_u], data[:, n_x + n_u:])


@dataclass(frozen=True)
class KoopmanModel:
    """Lifted linear predictor ``psi+ = A psi + B u``, ``x = C psi`` with ``C = [I, 0]``."""

    A: np.ndarray
    B: np.ndarray
    lift: LiftSpec
    ridge: float = 0.0
    seed: Optional[int] = None

    @property
    def n_psi(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def n_x(self) -> int:
        return self.lift.n_x

    @property
    def C(self) -> np.ndarray:
        return np.eye(self.n_x, self.n_psi)

    def to_dict(self) -> dict:
        return {
            "n_x": self.n_x,
            "n_u": self.n_u,
            "n_psi": self.n_psi,
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "centers": self.lift.centers.tolist(),
            "ridge": self.ridge,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KoopmanModel":
        for key in ("n_x", "n_u", "n_psi", "A", "B", "centers"):
            if key not in d:
                raise KeyError(f"model file is missing field {key!r}")
        n_x, n_u, n_psi = int(d["n_x"]), int(d["n_u"]), int(d["n_psi"])
        A = np.asarray(d["A"], dtype=float).reshape(n_psi, n_psi)
        B = np.asarray(d["B"], dtype=float).reshape(n_psi, n_u)
        centers = np.asarray(d["centers"], dtype=float).reshape(n_psi - n_x, n_x)
        return cls(A, B, LiftSpec(centers, n_x), float(d.get("ridge", 0.0)), d.get("seed"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "KoopmanModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _chunks(n: int, size: int) -> Iterable[slice]:
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def _normal_equations(data: SnapshotSet, spec: LiftSpec, chunk: int):
    n_psi, n_u = spec.n_psi, data.n_u
    p = n_psi + n_u
    G = np.zeros((p, p))
    R = np.zeros((p, n_psi))
    for sl in _chunks(len(data), chunk):
        Phi = np.hstack([lift(data.X[sl], spec), data.U[sl]])
        G += Phi.T @ Phi
        R += Phi.T @ lift(data.Xplus[sl], spec)
    return G, R


def fit_edmd(data: SnapshotSet, spec: LiftSpec, ridge: float = DEFAULT_RIDGE,
             seed: Optional[int] = None, chunk: int = 20000) -> KoopmanModel:
    """Least-squares fit of ``[A B]`` minimizing ``sum ||psi(x+) - A psi(x) - B u||^2``.

    Solved through the normal equations with a Tikhonov term ``ridge * I``;
    ``ridge = 0`` gives the pseudoinverse solution on full-rank data.  The
    Gram matrix is accumulated in row chunks so the lifted data never needs
    to be held in memory at once.
    """
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    if data.n_x != spec.n_x:
        raise ValueError(f"data state dimension {data.n_x} != lift dimension {spec.n_x}")
    n_psi, n_u = spec.n_psi, data.n_u
    if len(data) < n_psi + n_u:
        warnings.warn(
            f"only {len(data)} snapshots for {n_psi + n_u} regressors; the fit is underdetermined",
            stacklevel=2,
        )
    G, R = _normal_equations(data, spec, chunk)
    if ridge == 0:
        eig = np.linalg.eigvalsh(G)
        if eig[0] <= np.finfo(float).eps * G.shape[0] * eig[-1]:
            raise RankDeficientError(float(np.sqrt(max(eig[0], 0.0))))
    else:
        G.flat[:: G.shape[0] + 1] += ridge
    try:
        AB_T = sla.cho_solve(sla.cho_factor(G, lower=True, check_finite=False), R, check_finite=False)
    except np.linalg.LinAlgError:
        # tiny ridge on a badly conditioned Gram matrix; fall back to a symmetric solve
        logger.warning("Cholesky of the EDMD Gram matrix failed; using a symmetric indefinite solve")
        AB_T = sla.solve(G, R, assume_a="sym")
    AB = AB_T.T
    return KoopmanModel(AB[:, :n_psi].copy(), AB[:, n_psi:].copy(), spec, float(ridge), seed)


def edmd_objective(model: KoopmanModel, data: SnapshotSet) -> float:
    """Sum of squared one-step lifted prediction errors, ``J(A, B)``."""
    Psi = lift(data.X, model.lift)
    Psip = lift(data.Xplus, model.lift)
    res = Psip - Psi @ model.A.T - data.U @ model.B.T
    return float((res * res).sum())


def one_step_rms(model: KoopmanModel, data: SnapshotSet, trivial: bool = False) -> float:
    """RMS of the one-step lifted prediction error (``trivial`` uses ``psi+ = psi``)."""
    Psi = lift(data.X, model.lift)
    Psip = lift(data.Xplus, model.lift)
    pred = Psi if trivial else Psi @ model.A.T + data.U @ model.B.T
    return float(np.sqrt(np.mean((Psip - pred) ** 2)))


def predict(model: KoopmanModel, x0: np.ndarray, u_seq: np.ndarray) -> np.ndarray:
    """Roll the lifted model forward; returns states ``x_1 .. x_N`` as rows."""
    U = np.asarray(u_seq, dtype=float).reshape(-1, model.n_u)
    psi = lift(np.asarray(x0, dtype=float), model.lift)
    out = np.empty((U.shape[0], model.n_x))
    for k, u in enumerate(U):
        psi = model.A @ psi + model.B @ u
        out[k] = psi[: model.n_x]
    return out
