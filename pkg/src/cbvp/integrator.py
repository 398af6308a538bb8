"""Adaptive explicit Runge-Kutta propagation with fixed-interval sampling.

The default stepper is the 12-stage Dormand-Prince 8(5,3) pair ("dop853");
a classic Dormand-Prince 5(4) pair ("dopri5") sits behind the same config
switch. Both are driven by the usual embedded-error step controller and
support backward integration by sign convention.

Uniform sampling integrates segment-by-segment to each sample epoch, so
every stored sample is an exact integration endpoint rather than an
interpolant. State vectors of shape ``(6,)`` and ensembles of shape
``(n, 6)`` share the same stepping core; for an ensemble the error norm is
the worst per-member norm, so each member is controlled at least as tightly
as it would be alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _dop853_tableau as _d8
from .errors import DomainError, StepLimitError

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 10.0

# Dormand-Prince 5(4): 6 working stages plus FSAL; E is b - b_hat including
# the FSAL stage.
_DP54_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
_DP54_A = np.array([
    [0.0, 0.0, 0.0, 0.0, 0.0],
    [1 / 5, 0.0, 0.0, 0.0, 0.0],
    [3 / 40, 9 / 40, 0.0, 0.0, 0.0],
    [44 / 45, -56 / 15, 32 / 9, 0.0, 0.0],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729, 0.0],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
])
_DP54_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
_DP54_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920,
                    -17253 / 339200, 22 / 525, -1 / 40])


@dataclass(frozen=True)
class IntegratorConfig:
    """Error-control knobs for the adaptive stepper."""

    rel_tol: float = 1e-12
    abs_tol: float = 1e-12
    max_step: float = math.inf
    max_steps: int = 1_000_000
    method: str = "dop853"

    def __post_init__(self):
        for name in ("rel_tol", "abs_tol"):
            tol = getattr(self, name)
            if not 0.0 < tol < 1.0:
                raise DomainError(f"{name} must lie in (0, 1), got {tol}")
        if self.max_steps <= 0:
            raise DomainError(f"max_steps must be positive, got {self.max_steps}")
        if not self.max_step > 0.0:
            raise DomainError(f"max_step must be positive, got {self.max_step}")
        if self.method not in ("dop853", "dopri5"):
            raise DomainError(f"unknown method {self.method!r}")


@dataclass
class Trajectory:
    """Uniformly sampled states in chronological order.

    ``states`` has shape ``(n, 6)``, sample ``k`` sits at ``t0 + k * dt``.
    ``meta`` carries provenance (V-infinity magnitude, post-flyby angle,
    seed, anchor epoch for backward-generated arcs, ...).
    """

    t0: float
    dt: float
    states: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 2 or self.states.shape[1] != 6:
            raise DomainError(f"states must have shape (n, 6), got {self.states.shape}")
        if self.states.shape[0] == 0:
            raise DomainError("trajectory must contain at least one sample")
        if not np.all(np.isfinite(self.states)):
            raise DomainError("trajectory states must be finite")
        if not self.dt > 0.0:
            raise DomainError(f"dt must be positive, got {self.dt}")

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n)

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, :3]

    @property
    def velocities(self) -> np.ndarray:
        return self.states[:, 3:]


def _error_norm(err: np.ndarray, scale: np.ndarray) -> float:
    """Scaled RMS error; for an (n, d) ensemble, the worst member's RMS."""
    e = err / scale
    if e.ndim == 1:
        return float(np.sqrt(np.mean(e * e)))
    return float(np.sqrt(np.max(np.mean(e * e, axis=-1))))


def _dop853_error_norm(K, h, scale) -> float:
    """Combined 5th/3rd-order estimate of the DOP853 pair (Hairer's rule)."""
    err5 = np.tensordot(_d8.E5, K, axes=1) / scale
    err3 = np.tensordot(_d8.E3, K, axes=1) / scale
    if err5.ndim == 1:
        e5 = float(np.sum(err5 * err5))
        e3 = float(np.sum(err3 * err3))
        denom = e5 + 0.01 * e3
        if denom == 0.0:
            return 0.0
        return abs(h) * e5 / math.sqrt(denom * err5.size)
    e5 = np.sum(err5 * err5, axis=-1)
    e3 = np.sum(err3 * err3, axis=-1)
    denom = e5 + 0.01 * e3
    n = err5.shape[-1]
    out = np.zeros_like(e5)
    nz = denom > 0.0
    out[nz] = abs(h) * e5[nz] / np.sqrt(denom[nz] * n)
    return float(np.max(out))


class _Stepper:
    """One embedded RK attempt: stages, candidate state, error norm."""

    def __init__(self, method: str):
        if method == "dop853":
            self.A, self.B, self.C = _d8.A, _d8.B, _d8.C
            self.n_stages = _d8.N_STAGES
            self.error_exponent = -1.0 / 8.0
            self._dop853 = True
        else:
            self.A, self.B, self.C = _DP54_A, _DP54_B, _DP54_C
            self.n_stages = 6
            self.error_exponent = -1.0 / 5.0
            self._dop853 = False

    def order_hint(self) -> float:
        return 8.0 if self._dop853 else 5.0

    def attempt(self, f, t, y, h, f0, rtol, atol):
        K = np.empty((self.n_stages + 1,) + y.shape)
        K[0] = f0
        for i in range(1, self.n_stages):
            ys = y + h * np.tensordot(self.A[i, :i], K[:i], axes=1)
            K[i] = f(t + self.C[i] * h, ys)
        y_new = y + h * np.tensordot(self.B, K[: self.n_stages], axes=1)
        f_new = f(t + h, y_new)
        K[self.n_stages] = f_new
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        if self._dop853:
            err = _dop853_error_norm(K, h, scale)
        else:
            err = _error_norm(h * np.tensordot(_DP54_E, K, axes=1), scale)
        return y_new, f_new, err


def _initial_step(f, t0, y0, f0, direction, order, rtol, atol, max_step):
    """Hairer's starting-step heuristic, clamped to max_step."""
    scale = atol + rtol * np.abs(y0)
    d0 = _error_norm(y0, scale)
    d1 = _error_norm(f0, scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    y1 = y0 + h0 * direction * f0
    f1 = f(t0 + h0 * direction, y1)
    d2 = _error_norm(f1 - f0, scale) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / (order + 1.0))
    return min(100.0 * h0, h1, max_step)


class _AdaptiveRun:
    """Carries stepper state (h, FSAL derivative, step budget) across segments."""

    def __init__(self, f, t0, y0, direction, cfg: IntegratorConfig):
        self.f = f
        self.t = float(t0)
        self.y = np.asarray(y0, dtype=float)
        self.direction = float(direction)
        self.cfg = cfg
        self.stepper = _Stepper(cfg.method)
        self.f_cur = f(self.t, self.y)
        self.h = _initial_step(f, self.t, self.y, self.f_cur, self.direction,
                               self.stepper.order_hint(), cfg.rel_tol,
                               cfg.abs_tol, cfg.max_step)
        self.steps_taken = 0

    def advance_to(self, t_target: float) -> np.ndarray:
        """Integrate exactly to ``t_target`` (same direction as the run)."""
        cfg = self.cfg
        rejected = False
        while (t_target - self.t) * self.direction > 0.0:
            remaining = abs(t_target - self.t)
            h = min(self.h, cfg.max_step, remaining)
            tiny = 16.0 * np.finfo(float).eps * max(abs(self.t), abs(t_target))
            if h <= tiny:
                raise StepLimitError(
                    f"step size underflow at t={self.t!r} (h={h!r})")
            if self.steps_taken >= cfg.max_steps:
                raise StepLimitError(
                    f"exceeded max_steps={cfg.max_steps} at t={self.t!r}")
            self.steps_taken += 1
            h_signed = h * self.direction
            y_new, f_new, err = self.stepper.attempt(
                self.f, self.t, self.y, h_signed, self.f_cur,
                cfg.rel_tol, cfg.abs_tol)
            exp = self.stepper.error_exponent
            if err < 1.0:
                factor = MAX_FACTOR if err == 0.0 else min(
                    MAX_FACTOR, SAFETY * err**exp)
                if rejected:
                    factor = min(1.0, factor)
                hit_target = h >= remaining
                self.t = t_target if hit_target else self.t + h_signed
                self.y = y_new
                self.f_cur = f_new
                self.h = h * factor
                rejected = False
            else:
                if not np.isfinite(err):
                    factor = MIN_FACTOR
                else:
                    factor = max(MIN_FACTOR, SAFETY * err**exp)
                self.h = h * factor
                rejected = True
        return self.y


def propagate(f, state0: np.ndarray, t_span: tuple[float, float],
              cfg: IntegratorConfig | None = None) -> np.ndarray:
    """Propagate ``state0`` from ``t_span[0]`` to ``t_span[1]``.

    ``t1 < t0`` integrates backward. ``f(t, y)`` must return ``dy/dt`` with
    the shape of ``y``; shape ``(n, 6)`` inputs are treated as an ensemble
    sharing one step sequence.
    """
    cfg = cfg or IntegratorConfig()
    t0, t1 = float(t_span[0]), float(t_span[1])
    if t0 == t1:
        raise DomainError("t_span must have distinct endpoints")
    run = _AdaptiveRun(f, t0, state0, 1.0 if t1 > t0 else -1.0, cfg)
    return run.advance_to(t1)


def _sample(f, state0, t0, dt, n, direction, cfg):
    if n < 1:
        raise DomainError(f"sample count must be >= 1, got {n}")
    if not dt > 0.0:
        raise DomainError(f"dt must be positive, got {dt}")
    y0 = np.asarray(state0, dtype=float)
    out = np.empty((n,) + y0.shape)
    out[0] = y0
    if n > 1:
        sign = 1.0 if direction == "forward" else -1.0
        run = _AdaptiveRun(f, t0, y0, sign, cfg)
        for k in range(1, n):
            out[k] = run.advance_to(t0 + sign * k * dt)
    return out


def sample_uniform(f, state0: np.ndarray, t0: float, dt: float, n: int,
                   direction: str = "forward",
                   cfg: IntegratorConfig | None = None,
                   meta: dict | None = None) -> Trajectory:
    """Sample ``n`` states at ``t0, t0 +/- dt, ...`` with full adaptive accuracy.

    Backward runs are returned in chronological order; their ``meta`` records
    the anchor epoch (the start of the backward propagation).
    """
    if direction not in ("forward", "backward"):
        raise DomainError(f"direction must be 'forward' or 'backward', got {direction!r}")
    cfg = cfg or IntegratorConfig()
    states = _sample(f, state0, t0, dt, n, direction, cfg)
    meta = dict(meta or {})
    meta["direction"] = direction
    if direction == "backward":
        meta["anchor_epoch"] = t0
        return Trajectory(t0=t0 - (n - 1) * dt, dt=dt, states=states[::-1].copy(),
                          meta=meta)
    return Trajectory(t0=t0, dt=dt, states=states, meta=meta)


def sample_uniform_batch(f, states0: np.ndarray, t0: float, dt: float, n: int,
                         direction: str = "forward",
                         cfg: IntegratorConfig | None = None) -> np.ndarray:
    """Ensemble variant of :func:`sample_uniform`.

    ``states0`` has shape ``(m, 6)``; the result has shape ``(m, n, 6)`` with
    samples in propagation order (callers reorder backward runs as needed).
    Steps are shared across members and controlled by the worst member, so
    each member meets the configured tolerances.
    """
    if direction not in ("forward", "backward"):
        raise DomainError(f"direction must be 'forward' or 'backward', got {direction!r}")
    cfg = cfg or IntegratorConfig()
    states0 = np.asarray(states0, dtype=float)
    if states0.ndim != 2:
        raise DomainError(f"states0 must have shape (m, 6), got {states0.shape}")
    samples = _sample(f, states0, t0, dt, n, direction, cfg)
    return np.swapaxes(samples, 0, 1).copy()
