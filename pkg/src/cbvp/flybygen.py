"""Lunar-flyby dataset generation under zero-SOI patched conics.

The pipeline: place the spacecraft at the Moon's rotating-frame position,
add a hyperbolic excess velocity, grid-search the incoming V-infinity whose
backward propagation best approaches Earth, back-propagate the shared
reference context, then fan out forward arcs over a range of post-flyby
angles per V-infinity magnitude, enforcing the periapsis-radius deflection
limit. Samples are shuffled, split, normalized against the training split,
and serialized to a binary dataset directory with a JSON manifest.

Generation is planar by construction (z = vz = 0 exactly); the 6-channel
state layout is kept so the downstream model interface stays general.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dynamics
from .dynamics import SystemConstants
from .errors import (DomainError, EmptySplitError, NoSolutionError,
                     ShapeError)
from .integrator import (IntegratorConfig, Trajectory, sample_uniform,
                         sample_uniform_batch)

FORMAT_VERSION = 1
TRAJ_MAGIC = b"CBVP"
SPLITS = ("train", "val", "test")

# 32-byte record-file header: magic, format version, n_samples, n_steps,
# n_channels, 4 pad bytes. All little-endian.
_HEADER = struct.Struct("<4sIQQI4x")
assert _HEADER.size == 32


@dataclass(frozen=True)
class FlybyConfig:
    """Dataset-generation parameters.

    ``vinf_mags_kms`` are the outgoing V-infinity magnitude classes;
    ``angle_range_deg`` is the post-flyby angle interval, measured from the
    incoming V-infinity direction; ``grid_*`` control the incoming-side
    search; ``earth_approach_radius_km`` is the acceptance threshold on the
    backward arc's closest Earth approach.
    """

    vinf_mags_kms: tuple = (1.2, 1.3, 1.4)
    angle_range_deg: tuple = (-90.0, 90.0)
    n_per_vinf: int = 1000
    context_steps: int = 512
    forward_days: float = 90.0
    dt_minutes: float = 7.0
    min_periapsis_alt_km: float = 200.0
    approach_angle_deg: float = 0.0
    seed: int = 123
    earth_approach_radius_km: float = 1e5
    grid_mags_kms: tuple = (0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.4)
    grid_step_deg: float = 1.0
    split_ratios: tuple = (0.7, 0.1, 0.2)

    def __post_init__(self):
        lo, hi = self.angle_range_deg
        if not (-180.0 <= lo < hi <= 180.0):
            raise DomainError(f"angle range must be an interval within [-180, 180], got {self.angle_range_deg}")
        if self.n_per_vinf < 1:
            raise DomainError(f"n_per_vinf must be >= 1, got {self.n_per_vinf}")
        if self.context_steps < 1:
            raise DomainError("context_steps must be >= 1")
        for name in ("forward_days", "dt_minutes", "min_periapsis_alt_km",
                     "earth_approach_radius_km", "grid_step_deg"):
            if not getattr(self, name) > 0.0:
                raise DomainError(f"{name} must be positive")
        if any(m <= 0.0 for m in self.vinf_mags_kms) or not self.vinf_mags_kms:
            raise DomainError("vinf_mags_kms must be non-empty and positive")
        if abs(sum(self.split_ratios) - 1.0) > 1e-12:
            raise DomainError(f"split ratios must sum to 1, got {self.split_ratios}")

    @property
    def dt_seconds(self) -> float:
        return self.dt_minutes * 60.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FlybyConfig":
        d = dict(d)
        for key in ("vinf_mags_kms", "angle_range_deg", "grid_mags_kms", "split_ratios"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class BoundaryPrefix:
    """Initial and terminal positions conditioning one trajectory."""

    r0: np.ndarray
    rf: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.r0, float), np.asarray(self.rf, float)])

    @classmethod
    def from_vector(cls, vec) -> "BoundaryPrefix":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (6,):
            raise ShapeError(f"prefix vector must have shape (6,), got {vec.shape}")
        return cls(r0=vec[:3].copy(), rf=vec[3:].copy())


def forward_sample_count(days: float, dt_minutes: float) -> int:
    """Number of samples covering ``days`` at the given sampling interval."""
    return int(round(days * 86400.0 / (dt_minutes * 60.0)))


def moon_state(constants: SystemConstants, approach_angle_deg: float = 0.0) -> np.ndarray:
    """Moon position and velocity in the rotating frame.

    Circular orbit of the configured radius about Earth in the z = 0 plane,
    phased by ``approach_angle_deg`` from the Sun-Earth line. The rotating
    frame sees the circular-orbit rate reduced by the frame rate, so the
    in-frame angular rate is ``omega_moon - 1``.
    """
    a = constants.moon_orbit_radius_km / constants.length_unit_km
    omega = math.sqrt(constants.mu / a**3)
    alpha = math.radians(approach_angle_deg)
    ca, sa = math.cos(alpha), math.sin(alpha)
    pos = np.array([1.0 - constants.mu + a * ca, a * sa, 0.0])
    vel = a * (omega - 1.0) * np.array([-sa, ca, 0.0])
    return np.concatenate([pos, vel])


def apply_vinf(moon: np.ndarray, vinf_vec_kms, constants: SystemConstants) -> np.ndarray:
    """Spacecraft state at the Moon after the zero-SOI velocity patch."""
    moon = np.asarray(moon, dtype=float)
    vinf_nd = np.asarray(vinf_vec_kms, dtype=float) / constants.velocity_unit_kms
    out = moon.copy()
    out[3:] += vinf_nd
    return out


def max_deflection_deg(vinf_mag_kms: float, r_pi_km: float,
                       mu_moon_km3_s2: float) -> float:
    """Largest flyby turn angle for a given periapsis radius.

    ``sin(phi/2) = 1 / (1 + r_pi * vinf^2 / mu_moon)``, in [0, 180] degrees.
    """
    if not (vinf_mag_kms > 0.0 and r_pi_km > 0.0 and mu_moon_km3_s2 > 0.0):
        raise DomainError("max_deflection requires strictly positive inputs")
    s = 1.0 / (1.0 + r_pi_km * vinf_mag_kms**2 / mu_moon_km3_s2)
    return math.degrees(2.0 * math.asin(s))


@dataclass(frozen=True)
class IncomingVinf:
    """Result of the incoming V-infinity grid search."""

    vec_kms: np.ndarray
    mag_kms: float
    angle_deg: float
    min_earth_distance_km: float

    def to_dict(self) -> dict:
        return {
            "vec_kms": [float(v) for v in self.vec_kms],
            "mag_kms": float(self.mag_kms),
            "angle_deg": float(self.angle_deg),
            "min_earth_distance_km": float(self.min_earth_distance_km),
        }


def _planar_vinf(mag_kms: float, angle_deg: float) -> np.ndarray:
    th = math.radians(angle_deg)
    return mag_kms * np.array([math.cos(th), math.sin(th), 0.0])


def find_incoming_vinf(config: FlybyConfig, constants: SystemConstants,
                       integ_cfg: IntegratorConfig | None = None,
                       grid_mags_kms=None, grid_angles_deg=None) -> IncomingVinf:
    """Grid search over incoming V-infinity magnitude and in-plane direction.

    Each grid point is back-propagated ``context_steps`` samples from the
    flyby state; the winner minimizes the closest Earth approach over those
    samples, subject to that minimum lying below the configured threshold.
    Ties break toward smaller magnitude, then smaller direction angle, so
    the result does not depend on grid ordering.
    """
    integ_cfg = integ_cfg or IntegratorConfig()
    mags = np.sort(np.unique(np.asarray(
        config.grid_mags_kms if grid_mags_kms is None else grid_mags_kms, float)))
    if grid_angles_deg is None:
        grid_angles_deg = np.arange(0.0, 360.0, config.grid_step_deg)
    angles = np.sort(np.unique(np.asarray(grid_angles_deg, float)))
    if mags.size == 0 or angles.size == 0:
        raise DomainError("incoming grid must be non-empty")

    moon = moon_state(constants, config.approach_angle_deg)
    mag_grid, ang_grid = [a.ravel() for a in np.meshgrid(mags, angles, indexing="ij")]
    th = np.radians(ang_grid)
    vinf_nd = (mag_grid / constants.velocity_unit_kms)[:, None] * np.stack(
        [np.cos(th), np.sin(th), np.zeros_like(th)], axis=1)
    states = np.tile(moon, (mag_grid.size, 1))
    states[:, 3:] += vinf_nd

    f = lambda t, y: dynamics.eom(y, constants.mu)
    dt_nd = config.dt_seconds / constants.time_unit_s
    arcs = sample_uniform_batch(f, states, 0.0, dt_nd, config.context_steps,
                                direction="backward", cfg=integ_cfg)
    earth = np.array([1.0 - constants.mu, 0.0, 0.0])
    dist = np.linalg.norm(arcs[:, :, :3] - earth, axis=2).min(axis=1)
    dist_km = dist * constants.length_unit_km

    best = np.lexsort((ang_grid, mag_grid, dist_km))[0]
    if dist_km[best] >= config.earth_approach_radius_km:
        raise NoSolutionError(
            f"no grid point approaches Earth within {config.earth_approach_radius_km} km "
            f"(best {dist_km[best]:.1f} km at mag {mag_grid[best]}, angle {ang_grid[best]})")
    return IncomingVinf(
        vec_kms=_planar_vinf(float(mag_grid[best]), float(ang_grid[best])),
        mag_kms=float(mag_grid[best]),
        angle_deg=float(ang_grid[best]),
        min_earth_distance_km=float(dist_km[best]),
    )


def generate_reference_context(vinf_in_kms, config: FlybyConfig,
                               constants: SystemConstants,
                               integ_cfg: IntegratorConfig | None = None) -> Trajectory:
    """Backward-propagated shared context anchored at the incoming flyby state."""
    integ_cfg = integ_cfg or IntegratorConfig()
    moon = moon_state(constants, config.approach_angle_deg)
    flyby = apply_vinf(moon, vinf_in_kms, constants)
    f = lambda t, y: dynamics.eom(y, constants.mu)
    dt_nd = config.dt_seconds / constants.time_unit_s
    vinf = np.asarray(vinf_in_kms, dtype=float)
    return sample_uniform(
        f, flyby, 0.0, dt_nd, config.context_steps, direction="backward",
        cfg=integ_cfg,
        meta={"kind": "reference_context", "vinf_kms": float(np.linalg.norm(vinf)),
              "seed": config.seed})


@dataclass
class FamilySample:
    """One forward flyby arc plus its boundary prefix (non-dimensional)."""

    vinf_mag_kms: float
    angle_deg: float
    forward: Trajectory
    prefix: BoundaryPrefix


@dataclass
class FamilyResult:
    incoming: IncomingVinf
    context: Trajectory
    samples: list
    rejections: dict  # mag class -> list of rejected post-flyby angles


def generate_family(config: FlybyConfig, constants: SystemConstants,
                    integ_cfg: IntegratorConfig | None = None,
                    incoming: IncomingVinf | None = None,
                    context: Trajectory | None = None) -> FamilyResult:
    """Forward flyby family over all magnitude classes and post-flyby angles.

    Per class, ``n_per_vinf`` angles uniformly span ``angle_range_deg``
    (inclusive endpoints). Angles whose magnitude exceeds the deflection
    limit for the minimum-periapsis radius are rejected and recorded; the
    surviving outgoing states are propagated forward together.
    """
    integ_cfg = integ_cfg or IntegratorConfig()
    if incoming is None:
        incoming = find_incoming_vinf(config, constants, integ_cfg)
    if context is None:
        context = generate_reference_context(incoming.vec_kms, config,
                                             constants, integ_cfg)
    if context.n != config.context_steps:
        raise DomainError("context length does not match config.context_steps")

    u_in = incoming.vec_kms / np.linalg.norm(incoming.vec_kms)
    moon = moon_state(constants, config.approach_angle_deg)
    r_pi_km = constants.moon_radius_km + config.min_periapsis_alt_km
    lo, hi = config.angle_range_deg
    angles = np.linspace(lo, hi, config.n_per_vinf)

    accepted = []  # (mag, angle, outgoing state)
    rejections: dict = {}
    for mag in config.vinf_mags_kms:
        phi_max = max_deflection_deg(mag, r_pi_km, constants.mu_moon_km3_s2)
        rejected = []
        for ang in angles:
            if abs(ang) > phi_max:
                rejected.append(float(ang))
                continue
            rad = math.radians(ang)
            c, s = math.cos(rad), math.sin(rad)
            direction = np.array([c * u_in[0] - s * u_in[1],
                                  s * u_in[0] + c * u_in[1], 0.0])
            accepted.append((float(mag), float(ang),
                             apply_vinf(moon, mag * direction, constants)))
        rejections[float(mag)] = rejected

    if not accepted:
        raise NoSolutionError("deflection constraint rejected every sample")

    f = lambda t, y: dynamics.eom(y, constants.mu)
    dt_nd = config.dt_seconds / constants.time_unit_s
    n_fwd = forward_sample_count(config.forward_days, config.dt_minutes)
    states0 = np.stack([s for _, _, s in accepted])
    arcs = sample_uniform_batch(f, states0, 0.0, dt_nd, n_fwd,
                                direction="forward", cfg=integ_cfg)

    r0 = context.states[0, :3].copy()
    samples = []
    for k, (mag, ang, _) in enumerate(accepted):
        traj = Trajectory(t0=0.0, dt=dt_nd, states=arcs[k],
                          meta={"vinf_kms": mag, "angle_deg": ang,
                                "seed": config.seed})
        prefix = BoundaryPrefix(r0=r0, rf=arcs[k, -1, :3].copy())
        samples.append(FamilySample(vinf_mag_kms=mag, angle_deg=ang,
                                    forward=traj, prefix=prefix))
    return FamilyResult(incoming=incoming, context=context, samples=samples,
                        rejections=rejections)


# -- shuffling, splitting, normalization -------------------------------------

def split_counts(n: int, ratios) -> list[int]:
    """Largest-remainder apportionment of ``n`` into ``len(ratios)`` parts."""
    ratios = np.asarray(ratios, dtype=float)
    if abs(ratios.sum() - 1.0) > 1e-12:
        raise DomainError(f"ratios must sum to 1, got {ratios.tolist()}")
    exact = n * ratios
    base = np.floor(exact).astype(int)
    deficit = n - int(base.sum())
    order = np.argsort(-(exact - base), kind="stable")
    for i in order[:deficit]:
        base[i] += 1
    return [int(c) for c in base]


def shuffle_split(n_or_items, ratios=(0.7, 0.1, 0.2), seed: int = 123):
    """Seeded permutation then contiguous slicing into len(ratios) groups.

    Accepts either a count or a sequence; returns index arrays for a count
    and sliced lists for a sequence. Raises :class:`EmptySplitError` when
    any group would be empty.
    """
    if isinstance(n_or_items, (int, np.integer)):
        n, items = int(n_or_items), None
    else:
        items = list(n_or_items)
        n = len(items)
    counts = split_counts(n, ratios)
    if any(c == 0 for c in counts):
        raise EmptySplitError(f"splitting {n} samples as {tuple(ratios)} "
                              f"leaves an empty split: {counts}")
    perm = np.random.default_rng(seed).permutation(n)
    groups = []
    start = 0
    for c in counts:
        idx = perm[start:start + c]
        groups.append(idx if items is None else [items[i] for i in idx])
        start += c
    return tuple(groups)


@dataclass(frozen=True)
class Normalizer:
    """Per-channel affine normalization fitted on the training split."""

    mean: np.ndarray
    scale: np.ndarray

    SCALE_FLOOR = 1e-12

    @classmethod
    def fit(cls, rows: np.ndarray) -> "Normalizer":
        if rows.size == 0:
            raise DomainError("cannot fit a normalizer on an empty split")
        flat = rows.reshape(-1, rows.shape[-1])
        mean = flat.mean(axis=0)
        scale = np.maximum(flat.std(axis=0), cls.SCALE_FLOOR)
        return cls(mean=mean, scale=scale)

    def apply(self, arr: np.ndarray) -> np.ndarray:
        return (np.asarray(arr, float) - self.mean) / self.scale

    def invert(self, arr: np.ndarray) -> np.ndarray:
        return np.asarray(arr, float) * self.scale + self.mean

    def apply_prefix(self, prefix: np.ndarray) -> np.ndarray:
        """Normalize an (r0 || rf) vector with the position-channel stats."""
        prefix = np.asarray(prefix, dtype=float)
        stats_mean = np.concatenate([self.mean[:3], self.mean[:3]])
        stats_scale = np.concatenate([self.scale[:3], self.scale[:3]])
        return (prefix - stats_mean) / stats_scale

    def invert_prefix(self, prefix: np.ndarray) -> np.ndarray:
        prefix = np.asarray(prefix, dtype=float)
        stats_mean = np.concatenate([self.mean[:3], self.mean[:3]])
        stats_scale = np.concatenate([self.scale[:3], self.scale[:3]])
        return prefix * stats_scale + stats_mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(mean=np.asarray(d["mean"], float),
                   scale=np.asarray(d["scale"], float))


# -- binary serialization -----------------------------------------------------

def write_record_file(path, arr: np.ndarray) -> str:
    """Write a (n_samples, n_steps, n_channels) float64 record file.

    Returns the SHA-256 hex digest of the written bytes.
    """
    arr = np.ascontiguousarray(arr, dtype="<f8")
    if arr.ndim != 3:
        raise ShapeError(f"record array must be 3-d, got shape {arr.shape}")
    header = _HEADER.pack(TRAJ_MAGIC, FORMAT_VERSION, arr.shape[0],
                          arr.shape[1], arr.shape[2])
    payload = header + arr.tobytes()
    Path(path).write_bytes(payload)
    return hashlib.sha256(payload).hexdigest()


def read_record_file(path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, version, n_samples, n_steps, n_channels = _HEADER.unpack_from(data)
    if magic != TRAJ_MAGIC:
        raise DomainError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DomainError(f"{path}: unsupported format version {version}")
    arr = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    expected = n_samples * n_steps * n_channels
    if arr.size != expected:
        raise DomainError(f"{path}: payload has {arr.size} values, header "
                          f"promises {expected}")
    return arr.reshape(n_samples, n_steps, n_channels).astype(float)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class DatasetSplit:
    """One split loaded back from disk (normalized model units)."""

    rows: np.ndarray      # (n, context_steps + forward_steps, 6)
    prefixes: np.ndarray  # (n, 6)
    manifest: dict


def generate_dataset(config: FlybyConfig, constants: SystemConstants,
                     integ_cfg: IntegratorConfig | None = None,
                     out_dir=None) -> dict:
    """Run the full generation pipeline and serialize a dataset directory.

    Rows hold the shared context concatenated with each forward arc, in
    normalized units; the manifest records counts, normalization statistics,
    configuration snapshots, per-sample provenance and file checksums.
    Memory scales with n_samples x n_steps; paper-scale settings need a few
    GB, desk-scale settings a few tens of MB.
    """
    integ_cfg = integ_cfg or IntegratorConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    family = generate_family(config, constants, integ_cfg)
    n = len(family.samples)
    n_fwd = family.samples[0].forward.n
    rows = np.empty((n, config.context_steps + n_fwd, 6))
    rows[:, :config.context_steps] = family.context.states
    for k, s in enumerate(family.samples):
        rows[k, config.context_steps:] = s.forward.states
    prefixes = np.stack([s.prefix.as_vector() for s in family.samples])

    idx_by_split = dict(zip(SPLITS, shuffle_split(n, config.split_ratios,
                                                  config.seed)))
    normalizer = Normalizer.fit(rows[idx_by_split["train"]])

    checksums = {}
    sample_meta = {}
    for split, idx in idx_by_split.items():
        checksums[f"{split}.traj"] = write_record_file(
            out_dir / f"{split}.traj", normalizer.apply(rows[idx]))
        checksums[f"{split}.prefix"] = write_record_file(
            out_dir / f"{split}.prefix",
            normalizer.apply_prefix(prefixes[idx])[:, None, :])
        sample_meta[split] = [
            {"vinf_kms": family.samples[i].vinf_mag_kms,
             "angle_deg": family.samples[i].angle_deg}
            for i in idx
        ]

    emitted = {}
    for mag in config.vinf_mags_kms:
        emitted[str(mag)] = sum(1 for s in family.samples
                                if s.vinf_mag_kms == mag)
    manifest = {
        "format_version": FORMAT_VERSION,
        "counts": {split: int(len(idx)) for split, idx in idx_by_split.items()},
        "split_ratios": list(config.split_ratios),
        "normalization": normalizer.to_dict(),
        "flyby_config": config.to_dict(),
        "constants": constants.to_dict(),
        "integrator_config": dataclasses.asdict(integ_cfg),
        "reference_incoming": family.incoming.to_dict(),
        "context_steps": config.context_steps,
        "forward_steps": int(n_fwd),
        "dt_seconds": config.dt_seconds,
        "samples": sample_meta,
        "emitted_per_vinf": emitted,
        "rejections_per_vinf": {str(k): v for k, v in family.rejections.items()},
        "checksums": checksums,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def read_manifest(dataset_dir) -> dict:
    return json.loads((Path(dataset_dir) / "manifest.json").read_text(encoding="utf-8"))


def load_split(dataset_dir, split: str, verify: bool = True) -> DatasetSplit:
    """Load one split; verifies counts and checksums against the manifest."""
    if split not in SPLITS:
        raise DomainError(f"unknown split {split!r}")
    dataset_dir = Path(dataset_dir)
    manifest = read_manifest(dataset_dir)
    rows_path = dataset_dir / f"{split}.traj"
    prefix_path = dataset_dir / f"{split}.prefix"
    if verify:
        for p in (rows_path, prefix_path):
            recorded = manifest["checksums"][p.name]
            actual = _sha256(p)
            if actual != recorded:
                raise DomainError(f"checksum mismatch for {p.name}")
    rows = read_record_file(rows_path)
    prefixes = read_record_file(prefix_path)[:, 0, :]
    if rows.shape[0] != manifest["counts"][split]:
        raise DomainError(f"{split}.traj holds {rows.shape[0]} samples, "
                          f"manifest promises {manifest['counts'][split]}")
    return DatasetSplit(rows=rows, prefixes=prefixes, manifest=manifest)
