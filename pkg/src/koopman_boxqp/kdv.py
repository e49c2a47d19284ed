"""Forced Korteweg-de Vries plant ``y_t + y y_x + y_xxx = sum_i u_i v_i(x)`` on a periodic grid.

Time stepping is Strang splitting: exact dispersion in Fourier space for half
a step, an RK4 step of ``y_t = -(y^2/2)_x + forcing`` with spectral
derivatives (2/3-rule dealiased), then another half dispersion step.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .boxqp import NumericalBreakdown, certified_iteration_bound, solve
from .condensing import KoopmanBoxQp, NmpcSpec, build_prediction_stack
from .koopman import KoopmanModel, SnapshotSet, lift

logger = logging.getLogger(__name__)

PROFILE_CENTERS = (-math.pi / 2, -math.pi / 6, math.pi / 6, math.pi / 2)


class BlowUpError(FloatingPointError):
    """The KdV state became non-finite."""


@dataclass(frozen=True)
class KdvConfig:
    n_grid: int = 100
    dt: float = 0.01
    half_length: float = math.pi
    profile_centers: tuple = PROFILE_CENTERS
    profile_width: float = 25.0

    def __post_init__(self):
        if self.n_grid < 16 or self.n_grid % 2:
            raise ValueError("n_grid must be even and at least 16")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "profile_centers", tuple(float(m) for m in self.profile_centers))

    @property
    def n_u(self) -> int:
        return len(self.profile_centers)

    @property
    def grid(self) -> np.ndarray:
        L = self.half_length
        return -L + 2 * L * np.arange(self.n_grid) / self.n_grid

    @property
    def profiles(self) -> np.ndarray:
        """Forcing shapes ``v_i(x) = exp(-w (x - m_i)^2)`` as rows."""
        x = self.grid
        m = np.asarray(self.profile_centers)[:, None]
        return np.exp(-self.profile_width * (x[None, :] - m) ** 2)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["profile_centers"] = list(self.profile_centers)
        return d


class _SplitStep:
    def __init__(self, cfg: KdvConfig):
        n, L, dt = cfg.n_grid, cfg.half_length, cfg.dt
        m = np.fft.rfftfreq(n, d=1.0 / n)  # integer mode numbers 0..n/2
        k = m * (math.pi / L)
        keep = m < n / 3.0
        self.ik_dealiased = np.where(keep, 1j * k, 0.0)
        half = np.exp(1j * k**3 * dt / 2)
        half[-1] = 1.0  # Nyquist mode of a real signal must stay real
        self.half_dispersion = half
        self.profiles = cfg.profiles
        self.dt = dt
        self.n = n

    def _rhs(self, y, forcing):
        flux = np.fft.rfft(0.5 * y * y, axis=-1)
        return forcing - np.fft.irfft(self.ik_dealiased * flux, n=self.n, axis=-1)

    def __call__(self, y, u):
        dt = self.dt
        forcing = np.asarray(u, dtype=float) @ self.profiles
        y = np.fft.irfft(self.half_dispersion * np.fft.rfft(y, axis=-1), n=self.n, axis=-1)
        k1 = self._rhs(y, forcing)
        k2 = self._rhs(y + 0.5 * dt * k1, forcing)
        k3 = self._rhs(y + 0.5 * dt * k2, forcing)
        k4 = self._rhs(y + dt * k3, forcing)
        y = y + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        return np.fft.irfft(self.half_dispersion * np.fft.rfft(y, axis=-1), n=self.n, axis=-1)


@lru_cache(maxsize=16)
def _stepper(cfg: KdvConfig) -> _SplitStep:
    return _SplitStep(cfg)


def kdv_step(y: np.ndarray, u: np.ndarray, cfg: KdvConfig, check: bool = True) -> np.ndarray:
    """Advance the grid state by one ``cfg.dt``.

    ``y`` may be a batch (rows); ``u`` then has one row of coefficients per state.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        y_next = _stepper(cfg)(np.asarray(y, dtype=float), u)
    if check and not np.all(np.isfinite(y_next)):
        raise BlowUpError("KdV state became non-finite")
    return y_next


def soliton(x: np.ndarray, t: float, k: float, x0: float = 0.0) -> np.ndarray:
    """One-soliton solution ``12 k^2 sech^2(k (x - 4 k^2 t - x0))`` of the unforced equation."""
    return 12 * k**2 / np.cosh(k * (x - 4 * k**2 * t - x0)) ** 2


# ------------------------------------------------------------------ data generation


@dataclass
class DatasetInfo:
    n_traj: int
    traj_len: int
    seed: int
    discarded: int = 0


def _trajectory_rng(seed: int, index: int, attempt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index, attempt]))


def generate_dataset(cfg: KdvConfig, n_traj: int = 1000, traj_len: int = 200, seed: int = 0,
                     blowup_threshold: float = 1e6, max_attempts: int = 10) -> tuple[SnapshotSet, DatasetInfo]:
    """Random-input trajectories recorded as ``(y_k, u_k, y_{k+1})`` snapshot triples.

    Initial states are ``sum_i a_i v_i`` with ``a_i ~ U[-1, 1]``; inputs are
    drawn from ``U[-1, 1]^4`` at every step.  Each trajectory has its own
    random stream derived from ``(seed, index, attempt)``; trajectories that
    blow up are redrawn with the next attempt number.  All trajectories are
    integrated together as one batch.
    """
    if n_traj < 1 or traj_len < 2:
        raise ValueError("need n_traj >= 1 and traj_len >= 2")
    n_u, n = cfg.n_u, cfg.n_grid
    states = np.empty((n_traj, traj_len, n))
    inputs = np.empty((n_traj, traj_len - 1, n_u))
    attempts = np.zeros(n_traj, dtype=int)
    pending = np.arange(n_traj)
    info = DatasetInfo(n_traj, traj_len, seed)
    profiles = cfg.profiles
    while pending.size:
        for i in pending:
            rng = _trajectory_rng(seed, int(i), int(attempts[i]))
            states[i, 0] = rng.uniform(-1.0, 1.0, n_u) @ profiles
            inputs[i] = rng.uniform(-1.0, 1.0, (traj_len - 1, n_u))
        y = states[pending, 0]
        with np.errstate(all="ignore"):
            for k in range(traj_len - 1):
                y = kdv_step(y, inputs[pending, k], cfg, check=False)
                states[pending, k + 1] = y
        seg = states[pending]
        bad = ~np.all(np.isfinite(seg), axis=(1, 2)) | (np.nanmax(np.abs(seg), axis=(1, 2)) > blowup_threshold)
        bad_idx = pending[bad]
        info.discarded += int(bad_idx.size)
        attempts[bad_idx] += 1
        if np.any(attempts[bad_idx] >= max_attempts):
            raise BlowUpError(f"trajectories kept blowing up after {max_attempts} attempts")
        pending = bad_idx
    if info.discarded:
        logger.info("discarded and resampled %d blown-up trajectories", info.discarded)
    data = SnapshotSet(
        states[:, :-1].reshape(-1, n),
        inputs.reshape(-1, n_u),
        states[:, 1:].reshape(-1, n),
    )
    return data, info


# ------------------------------------------------------------------ closed loop


def sinusoidal_reference(t: float, n_grid: int = 100, amplitude: float = 0.5,
                         omega: float = 2 * math.pi / 25) -> np.ndarray:
    """Spatially uniform reference ``a sin(omega t)``."""
    return np.full(n_grid, amplitude * math.sin(omega * t))


@dataclass
class TrajectoryLog:
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    references: np.ndarray
    iterations: np.ndarray
    certified_bound: int
    final_gaps: np.ndarray
    converged: np.ndarray
    solve_times: np.ndarray
    dynamics_residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    min_curvatures: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def steps(self) -> int:
        return self.inputs.shape[0]

    @property
    def state_violation(self) -> float:
        """Largest excursion of logged states beyond ``[-1, 1]`` (0 if none)."""
        return float(max(0.0, np.abs(self.states).max() - 1.0))

    def summary(self) -> dict:
        it = self.iterations
        return {
            "steps": self.steps,
            "certified_bound": self.certified_bound,
            "iterations_mean": float(it.mean()) if it.size else 0.0,
            "iterations_max": int(it.max()) if it.size else 0,
            "all_converged": bool(self.converged.all()),
            "max_final_gap": float(self.final_gaps.max()) if it.size else 0.0,
            "input_abs_max": float(np.abs(self.inputs).max()) if it.size else 0.0,
            "state_violation": self.state_violation,
            "tracking_rms": float(np.sqrt(np.mean((self.states[1:] - self.references) ** 2))) if it.size else 0.0,
            "solve_time_mean": float(self.solve_times.mean()) if it.size else 0.0,
            "solve_time_max": float(self.solve_times.max()) if it.size else 0.0,
            "min_curvature": float(self.min_curvatures.min()) if self.min_curvatures.size else 0.0,
        }

    def write_csv(self, out_dir) -> dict:
        """Write states, inputs, references and per-step solver records; returns the paths."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        n_x = self.states.shape[1]
        paths = {
            "states": out / "states.csv",
            "inputs": out / "inputs.csv",
            "references": out / "references.csv",
            "iterations": out / "iterations.csv",
        }
        np.savetxt(paths["states"], np.column_stack([self.times, self.states]), delimiter=",", fmt="%.17g",
                   header=",".join(["t"] + [f"y{i}" for i in range(n_x)]), comments="")
        np.savetxt(paths["inputs"], np.column_stack([self.times[:-1], self.inputs]), delimiter=",", fmt="%.17g",
                   header=",".join(["t"] + [f"u{i}" for i in range(self.inputs.shape[1])]), comments="")
        np.savetxt(paths["references"], np.column_stack([self.times[:-1], self.references]), delimiter=",",
                   fmt="%.17g", header=",".join(["t"] + [f"r{i}" for i in range(n_x)]), comments="")
        with open(paths["iterations"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "t", "iterations", "certified_bound", "final_gap", "converged", "solve_time"])
            for k in range(self.steps):
                w.writerow([k, repr(float(self.times[k])), int(self.iterations[k]), self.certified_bound,
                            repr(float(self.final_gaps[k])), int(self.converged[k]), repr(float(self.solve_times[k]))])
        return paths


class ClosedLoopError(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        self.step = step
        super().__init__(f"sampling instant {step}: {cause}")


def closed_loop(cfg: KdvConfig, model: KoopmanModel, spec: NmpcSpec,
                reference: Optional[Callable[[float], np.ndarray]] = None,
                duration: float = 50.0, y0: Optional[np.ndarray] = None,
                epsilon: float = 1e-6, backend: str = "auto",
                progress: Optional[Callable[[int, int], None]] = None) -> TrajectoryLog:
    """Koopman-BoxQP MPC on the KdV plant with zero-order hold over each ``dt``.

    At each instant the current state is lifted, the linear term of the BoxQP
    is rebuilt, the QP is solved from a cold start and the first input block
    is applied.  ``reference(t)`` defaults to :func:`sinusoidal_reference`.
    """
    if model.n_x != cfg.n_grid or model.n_u != cfg.n_u:
        raise ValueError("model dimensions do not match the plant")
    if spec.n_x != cfg.n_grid or spec.n_u != cfg.n_u:
        raise ValueError("NMPC spec dimensions do not match the plant")
    if reference is None:
        reference = lambda t: sinusoidal_reference(t, cfg.n_grid)  # noqa: E731
    steps = int(round(duration / cfg.dt))
    qp = KoopmanBoxQp(spec, build_prediction_stack(model, spec.N))
    bound = certified_iteration_bound(spec.n, epsilon)
    n, n_u = cfg.n_grid, cfg.n_u
    y = np.zeros(n) if y0 is None else np.asarray(y0, dtype=float).copy()

    times = np.arange(steps + 1) * cfg.dt
    states = np.empty((steps + 1, n))
    inputs = np.empty((steps, n_u))
    refs = np.empty((steps, n))
    iters = np.empty(steps, dtype=int)
    gaps = np.empty(steps)
    conv = np.empty(steps, dtype=bool)
    stimes = np.empty(steps)
    dres = np.empty(steps)
    curv = np.empty(steps)
    states[0] = y
    for k in range(steps):
        t = times[k]
        x_r = np.asarray(reference(t), dtype=float)
        psi0 = lift(y, model.lift)
        try:
            rep = solve(qp.problem(psi0, x_r=x_r), epsilon, backend=backend)
            u = rep.z_star[:n_u].copy()
            y = kdv_step(y, u, cfg)
        except (NumericalBreakdown, BlowUpError) as exc:
            raise ClosedLoopError(k, exc) from exc
        refs[k] = x_r
        inputs[k] = u
        iters[k] = rep.iterations
        gaps[k] = rep.final_gap
        conv[k] = rep.converged
        stimes[k] = rep.wall_time
        dres[k] = qp.dynamics_residual(rep.z_star, psi0)
        curv[k] = min(rep.curvature_trace, default=0.0)
        states[k + 1] = y
        if progress is not None:
            progress(k, steps)
    return TrajectoryLog(times, states, inputs, refs, iters, bound, gaps, conv, stimes, dres, curv)
