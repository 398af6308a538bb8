"""Sun-Earth circular restricted three-body dynamics in the rotating frame.

Everything here works in the standard non-dimensional rotating frame: the
primary separation is the length unit, the inverse mean motion is the time
unit, so the frame rotates at unit rate and the primaries sit at x = -mu
(Sun) and x = 1 - mu (Earth). States are plain numpy arrays of shape
``(..., 6)`` laid out as ``(x, y, z, vx, vy, vz)``; all functions broadcast
over leading axes so single states and ensembles share one code path.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, SingularityError

#: Default distance guard below which the vector field refuses to evaluate.
SINGULARITY_GUARD = 1e-12


@dataclass(frozen=True)
class SystemConstants:
    """Physical constants tying the non-dimensional frame to km and seconds.

    Defaults adopt the Sun vs. Earth+Moon-barycenter mass parameter, the
    Sun-Earth mean distance as the length unit, and one year over two pi as
    the time unit. All values are configurable; every derived quantity
    (velocity unit, non-dimensional Moon orbit radius, ...) is recomputed
    from whatever is configured here.
    """

    mu: float = 3.00348e-6
    length_unit_km: float = 1.495978707e8
    time_unit_s: float = 5.0226757e6
    mu_moon_km3_s2: float = 4902.800
    moon_orbit_radius_km: float = 384400.0
    moon_radius_km: float = 1737.4

    def __post_init__(self):
        if not 0.0 < self.mu < 0.5:
            raise DomainError(f"mass parameter must lie in (0, 0.5), got {self.mu}")
        for name in ("length_unit_km", "time_unit_s", "mu_moon_km3_s2",
                     "moon_orbit_radius_km", "moon_radius_km"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0.0):
                raise DomainError(f"{name} must be strictly positive, got {value}")

    @property
    def velocity_unit_kms(self) -> float:
        """km/s per non-dimensional velocity unit (length unit over time unit)."""
        return self.length_unit_km / self.time_unit_s

    # -- scalar conversions -------------------------------------------------

    def km_to_nd(self, km):
        return np.asarray(km) / self.length_unit_km

    def nd_to_km(self, nd):
        return np.asarray(nd) * self.length_unit_km

    def kms_to_nd(self, kms):
        return np.asarray(kms) / self.velocity_unit_kms

    def nd_to_kms(self, nd):
        return np.asarray(nd) * self.velocity_unit_kms

    def seconds_to_nd(self, seconds):
        return np.asarray(seconds) / self.time_unit_s

    def nd_to_seconds(self, nd):
        return np.asarray(nd) * self.time_unit_s

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SystemConstants":
        return cls(**d)


def _primary_distances(state: np.ndarray, mu: float, guard: float):
    """Squared-root distances to the Sun and Earth with singularity guard."""
    x = state[..., 0]
    y = state[..., 1]
    z = state[..., 2]
    r1 = np.sqrt((x + mu) ** 2 + y**2 + z**2)
    r2 = np.sqrt((x - 1.0 + mu) ** 2 + y**2 + z**2)
    if np.any(r1 <= guard) or np.any(r2 <= guard):
        raise SingularityError(
            f"state within {guard} of a primary (min r1={np.min(r1):.3e}, "
            f"min r2={np.min(r2):.3e})"
        )
    return r1, r2


def eom(state: np.ndarray, mu: float, guard: float = SINGULARITY_GUARD) -> np.ndarray:
    """Right-hand side of the rotating-frame equations of motion.

    Position derivatives are the velocities; the accelerations carry the
    Coriolis and centrifugal terms of the rotating frame plus the gravity of
    both primaries. Broadcasts over any leading axes of ``state``.
    """
    state = np.asarray(state, dtype=float)
    x = state[..., 0]
    y = state[..., 1]
    z = state[..., 2]
    vx = state[..., 3]
    vy = state[..., 4]
    vz = state[..., 5]
    r1, r2 = _primary_distances(state, mu, guard)
    r13 = r1 * r1 * r1
    r23 = r2 * r2 * r2
    one_mu = 1.0 - mu
    ax = 2.0 * vy + x - one_mu * (x + mu) / r13 - mu * (x - 1.0 + mu) / r23
    ay = -2.0 * vx + y - one_mu * y / r13 - mu * y / r23
    az = -one_mu * z / r13 - mu * z / r23
    return np.stack([vx, vy, vz, ax, ay, az], axis=-1)


def jacobi_constant(state: np.ndarray, mu: float,
                    guard: float = SINGULARITY_GUARD) -> np.ndarray:
    """Jacobi integral C = x^2 + y^2 + 2(1-mu)/r1 + 2 mu/r2 - v^2.

    Conserved along solutions of :func:`eom`; used as the artifact's
    integration-accuracy invariant.
    """
    state = np.asarray(state, dtype=float)
    x = state[..., 0]
    y = state[..., 1]
    r1, r2 = _primary_distances(state, mu, guard)
    v2 = state[..., 3] ** 2 + state[..., 4] ** 2 + state[..., 5] ** 2
    return x**2 + y**2 + 2.0 * (1.0 - mu) / r1 + 2.0 * mu / r2 - v2


def collinear_lagrange_x(mu: float, point: str = "L1") -> float:
    """x-coordinate of a collinear equilibrium, found by bisection.

    The equilibrium condition is zero x-acceleration for a state at rest on
    the x-axis. Serves as an independent oracle for the vector field: the
    returned point must map to a (near-)zero derivative.
    """
    def accel_x(x: float) -> float:
        d1 = x + mu
        d2 = x - 1.0 + mu
        return x - (1.0 - mu) * d1 / abs(d1) ** 3 - mu * d2 / abs(d2) ** 3

    eps = 1e-9
    brackets = {
        "L1": (-mu + eps, 1.0 - mu - eps),
        "L2": (1.0 - mu + eps, 2.0),
        "L3": (-2.0, -mu - eps),
    }
    if point not in brackets:
        raise DomainError(f"unknown collinear point {point!r}; expected L1, L2 or L3")
    lo, hi = brackets[point]
    flo, fhi = accel_x(lo), accel_x(hi)
    if flo * fhi > 0.0:
        raise DomainError(f"bisection bracket for {point} does not change sign")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        fmid = accel_x(mid)
        if fmid == 0.0:
            return mid
        if flo * fmid < 0.0:
            hi = mid
        else:
            lo, flo = mid, fmid
        if hi - lo <= abs(mid) * 1e-16:
            break
    return 0.5 * (lo + hi)


def to_dimensional(traj, constants: SystemConstants):
    """Convert a non-dimensional trajectory to km, km/s and seconds.

    Returns a new trajectory of the same type; ``meta`` gains a ``units``
    marker so round-trips can be sanity-checked.
    """
    states = np.array(traj.states, dtype=float)
    states[..., :3] *= constants.length_unit_km
    states[..., 3:] *= constants.velocity_unit_kms
    meta = dict(traj.meta)
    meta["units"] = "km, km/s, s"
    return dataclasses.replace(
        traj,
        t0=traj.t0 * constants.time_unit_s,
        dt=traj.dt * constants.time_unit_s,
        states=states,
        meta=meta,
    )


def to_nondimensional(traj, constants: SystemConstants):
    """Inverse of :func:`to_dimensional`."""
    states = np.array(traj.states, dtype=float)
    states[..., :3] /= constants.length_unit_km
    states[..., 3:] /= constants.velocity_unit_kms
    meta = dict(traj.meta)
    meta["units"] = "nondimensional"
    return dataclasses.replace(
        traj,
        t0=traj.t0 / constants.time_unit_s,
        dt=traj.dt / constants.time_unit_s,
        states=states,
        meta=meta,
    )
