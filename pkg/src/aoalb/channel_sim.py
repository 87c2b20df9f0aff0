"""Synthetic uplink CSI for a planar massive-MIMO array.

Each track is a Rician channel: one dominant path at the track azimuth plus
``multipath_count`` diffuse paths with random angles, delays and slow phase
drift, observed on every antenna and OFDM subcarrier.  Tracks are generated
lazily in fixed chunks of snapshots, so a 64 x 50 x 24000 tensor never has to
sit in memory unless a caller asks for all of it.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import AzimuthOutOfRange, CorruptInput, InvalidSpec, IoError
from .seeding import derive_seed

CHUNK = 1000
MAGIC = b"AOALB-CSI-v1\0\0\0\0"
HEADER_BYTES = len(MAGIC) + 12

DELAY_SPREAD_S = 1e-6
POWER_DECAY_S = 0.3e-6
PHASE_WALK_STD = 0.01
# diffuse paths rotate against the dominant path by at most this many
# radians per snapshot; slow enough that a track keeps its multipath signature
DIFFUSE_DRIFT_MAX = 2e-5
DIFFUSE_AZIMUTH_MAX = 75.0


@dataclass(frozen=True)
class ArrayGeometry:
    rows: int = 4
    cols: int = 16
    horizontal_spacing: float = 0.5
    vertical_spacing: float = 1.0
    carrier_hz: float = 2.18e9
    subcarriers: int = 50
    bandwidth_hz: float = 10e6

    def __post_init__(self):
        if self.rows < 1 or self.cols < 2:
            raise InvalidSpec("array needs at least one row of two elements")
        if self.rows * self.cols > 64:
            raise InvalidSpec("at most 64 antennas are supported")
        if self.horizontal_spacing <= 0 or self.vertical_spacing <= 0:
            raise InvalidSpec("antenna spacings must be positive")
        if self.subcarriers < 1:
            raise InvalidSpec("need at least one subcarrier")

    @property
    def antennas(self) -> int:
        return self.rows * self.cols

    def subcarrier_frequencies(self) -> np.ndarray:
        m = np.arange(self.subcarriers)
        return self.carrier_hz + (m - self.subcarriers / 2) * self.bandwidth_hz / self.subcarriers


@dataclass(frozen=True)
class TrackSpec:
    track_id: str
    region: str = "LoS"
    snapshots: int = 24000
    base_azimuth: float = 0.0
    azimuth_drift: float = 0.0
    rician_k_db: float = 15.0
    multipath_count: int = 6
    snr_db: float = 10.0

    def __post_init__(self):
        if self.region not in ("LoS", "NLoS"):
            raise InvalidSpec(f"region must be LoS or NLoS, got {self.region!r}")
        if self.snapshots < 1:
            raise InvalidSpec("a track needs at least one snapshot")
        end = self.base_azimuth + self.azimuth_drift
        if abs(self.base_azimuth) >= 90 or abs(end) >= 90:
            raise InvalidSpec("track azimuths must stay inside (-90, 90) degrees")
        if self.region == "LoS" and self.rician_k_db < 10:
            raise InvalidSpec("LoS tracks need a Rician K of at least 10 dB")
        if self.region == "NLoS" and self.rician_k_db > 0:
            raise InvalidSpec("NLoS tracks need a Rician K of at most 0 dB")
        if self.multipath_count < 0 or (self.region == "NLoS" and self.multipath_count < 1):
            raise InvalidSpec("NLoS tracks need at least one diffuse path")
        if math.isnan(self.snr_db) or math.isnan(self.rician_k_db):
            raise InvalidSpec("SNR and K must be numbers")

    @property
    def dominant_power(self) -> float:
        if self.multipath_count == 0 or self.rician_k_db == math.inf:
            return 1.0
        k = 10 ** (self.rician_k_db / 10)
        return k / (k + 1)

    @property
    def noise_variance(self) -> float:
        if self.snr_db == math.inf:
            return 0.0
        if self.snr_db == -math.inf:
            return 1.0
        return 10 ** (-self.snr_db / 10)

    @property
    def signal_scale(self) -> float:
        return 0.0 if self.snr_db == -math.inf else 1.0


def steering_vector(geometry: ArrayGeometry, azimuth: float, row: int = 0) -> np.ndarray:
    """Response of one array row to a plane wave from ``azimuth`` degrees.

    Elevation is not modelled, so every row shares the same horizontal phase
    progression; ``row`` is validated but does not change the result.
    """
    if abs(azimuth) > 90:
        raise AzimuthOutOfRange(f"azimuth {azimuth} outside [-90, 90]")
    if not 0 <= row < geometry.rows:
        raise InvalidSpec(f"row {row} outside the array")
    return steering_matrix(geometry.cols, geometry.horizontal_spacing, np.array([azimuth]))[:, 0]


def steering_matrix(sensors: int, spacing: float, azimuths_deg: np.ndarray) -> np.ndarray:
    """Columns are ULA steering vectors for each azimuth."""
    n = np.arange(sensors)[:, None]
    return np.exp(-2j * np.pi * spacing * n * np.sin(np.deg2rad(azimuths_deg))[None, :])


class TrackGenerator:
    """Draws one track's path parameters and synthesises any snapshot range."""

    def __init__(self, geometry: ArrayGeometry, track: TrackSpec, seed: int):
        self.geometry = geometry
        self.track = track
        self.seed = int(seed)
        rng = np.random.default_rng(derive_seed(seed, "paths"))
        n_paths = track.multipath_count
        self.delays = rng.uniform(0.0, DELAY_SPREAD_S, n_paths + 1)
        self.diffuse_azimuths = rng.uniform(-DIFFUSE_AZIMUTH_MAX, DIFFUSE_AZIMUTH_MAX, n_paths)
        self.diffuse_drift = rng.uniform(-DIFFUSE_DRIFT_MAX, DIFFUSE_DRIFT_MAX, n_paths)
        gains = rng.standard_normal(n_paths) + 1j * rng.standard_normal(n_paths)
        gains *= np.sqrt(np.exp(-self.delays[1:] / POWER_DECAY_S))
        start = rng.uniform(0, 2 * np.pi)
        walk = rng.normal(0.0, PHASE_WALK_STD, track.snapshots)
        walk[0] = 0.0
        # cart motion: a phase random walk shared by every path
        self.motion_phase = start + np.cumsum(walk)
        freqs = geometry.subcarrier_frequencies()
        # (paths, subcarriers) delay response, dominant path first
        self.freq_response = np.exp(-2j * np.pi * self.delays[:, None] * freqs[None, :])
        if n_paths:
            gains *= np.sqrt((1.0 - track.dominant_power) / self._mean_diffuse_power(gains))
        self.diffuse_gains = gains
        cols = np.arange(geometry.cols)
        self._col_index = np.tile(cols, geometry.rows)
        self._last = None

    def _mean_diffuse_power(self, gains: np.ndarray) -> float:
        """Diffuse power averaged over antennas, subcarriers and the whole track.

        Paths interfere, so this is the full quadratic form in the gains rather
        than the sum of their squared magnitudes.
        """
        g = self.geometry
        a = steering_matrix(g.cols, g.horizontal_spacing, self.diffuse_azimuths)
        f = self.freq_response[1:]
        gram = (a.T @ a.conj() / g.cols) * (f @ f.conj().T / g.subcarriers)
        # time average of exp(i (w_l - w_k) t) over t = 0 .. T-1
        dw = self.diffuse_drift[:, None] - self.diffuse_drift[None, :]
        t = self.track.snapshots
        with np.errstate(invalid="ignore", divide="ignore"):
            series = np.expm1(1j * dw * t) / np.expm1(1j * dw) / t
        series = np.where(np.abs(dw) < 1e-15, 1.0, series)
        return float(np.real(gains @ (gram * series) @ gains.conj()))

    def dominant_azimuth(self, t: np.ndarray) -> np.ndarray:
        span = max(self.track.snapshots - 1, 1)
        return self.track.base_azimuth + self.track.azimuth_drift * t / span

    def path_fields(self, t0: int, t1: int) -> tuple[np.ndarray, np.ndarray]:
        """Noise-free dominant and diffuse contributions, each (n, m, t1 - t0)."""
        g = self.geometry
        t = np.arange(t0, t1)
        d = g.horizontal_spacing
        scale = self.track.signal_scale
        motion = np.exp(1j * self.motion_phase[t0:t1])
        sin_dom = np.sin(np.deg2rad(self.dominant_azimuth(t)))
        # (n, t) dominant steering, times the cart-motion phase
        a_dom = np.exp(-2j * np.pi * d * self._col_index[:, None] * sin_dom[None, :])
        a_dom *= (scale * np.sqrt(self.track.dominant_power)) * motion
        dominant = a_dom[:, None, :] * self.freq_response[0][None, :, None]
        if self.track.multipath_count:
            a_dif = steering_matrix(g.cols, d, self.diffuse_azimuths)[self._col_index]
            # (n, m, paths) spatial-spectral response of each diffuse path
            resp = a_dif[:, None, :] * self.freq_response[1:].T[None, :, :]
            g_t = self.diffuse_gains[:, None] * np.exp(1j * self.diffuse_drift[:, None] * t[None, :])
            g_t *= scale * motion
            diffuse = (resp.reshape(-1, resp.shape[-1]) @ g_t).reshape(g.antennas, g.subcarriers, len(t))
        else:
            diffuse = np.zeros_like(dominant)
        return dominant, diffuse

    def chunk(self, index: int) -> np.ndarray:
        """Snapshots ``[index * CHUNK, (index + 1) * CHUNK)``; read-only, cached."""
        if self._last is not None and self._last[0] == index:
            return self._last[1]
        g = self.geometry
        t0 = index * CHUNK
        t1 = min(t0 + CHUNK, self.track.snapshots)
        dominant, diffuse = self.path_fields(t0, t1)
        out = dominant
        out += diffuse
        var = self.track.noise_variance
        if var > 0:
            rng = np.random.default_rng(derive_seed(self.seed, "noise", index))
            noise = rng.standard_normal((2, g.antennas, g.subcarriers, t1 - t0))
            noise *= math.sqrt(var / 2)
            out.real += noise[0]
            out.imag += noise[1]
        out.setflags(write=False)
        self._last = (index, out)
        return out

    def block(self, t0: int, t1: int) -> np.ndarray:
        first, last = t0 // CHUNK, (t1 - 1) // CHUNK
        parts = [self.chunk(i) for i in range(first, last + 1)]
        data = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=2)
        offset = first * CHUNK
        return data[:, :, t0 - offset : t1 - offset]


class CsiTensor:
    """Complex CSI indexed (antenna, subcarrier, snapshot).

    Backed either by an in-memory/memory-mapped array or by a lazy generator.
    ``block`` reads a snapshot range; ``data`` materialises everything.
    """

    def __init__(self, geometry: ArrayGeometry, track: TrackSpec, seed=None, *, array=None, generator=None):
        self.geometry = geometry
        self.track = track
        self.seed = seed
        self._array = array
        self._generator = generator
        if array is not None and array.shape != self.shape:
            raise InvalidSpec(f"CSI array shape {array.shape} does not match {self.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.geometry.antennas, self.geometry.subcarriers, self.track.snapshots)

    @property
    def snapshots(self) -> int:
        return self.track.snapshots

    def block(self, t0: int, t1: int) -> np.ndarray:
        if not 0 <= t0 < t1 <= self.snapshots:
            raise IndexError(f"snapshot range [{t0}, {t1}) outside [0, {self.snapshots})")
        if self._array is not None:
            return np.asarray(self._array[:, :, t0:t1])
        return self._generator.block(t0, t1)

    @property
    def data(self) -> np.ndarray:
        if self._array is None:
            self._array = self._generator.block(0, self.snapshots)
        return np.asarray(self._array)

    def iter_blocks(self, size: int = CHUNK):
        for t0 in range(0, self.snapshots, size):
            yield t0, self.block(t0, min(t0 + size, self.snapshots))


def generate_track(geometry: ArrayGeometry, track: TrackSpec, seed: int) -> CsiTensor:
    """Lazy CSI tensor for ``track``; identical seeds give identical data."""
    return CsiTensor(geometry, track, int(seed), generator=TrackGenerator(geometry, track, seed))


LOS_TABLE = (("6", -58.0, 3.0), ("9", -20.0, -2.0), ("10", 8.0, 2.5), ("11", -35.0, 0.0), ("12", 27.0, -3.0))
NLOS_TABLE = (("1", -47.0, 2.0), ("2", -14.0, -2.5), ("3", 18.0, 3.0), ("13", 41.0, -2.0), ("20", 63.0, 2.0))


def default_specs(snapshots: int = 24000) -> list[TrackSpec]:
    specs = [
        TrackSpec(tid, "LoS", snapshots, base, drift, rician_k_db=15.0, multipath_count=6)
        for tid, base, drift in LOS_TABLE
    ]
    specs += [
        TrackSpec(tid, "NLoS", snapshots, base, drift, rician_k_db=-5.0, multipath_count=6)
        for tid, base, drift in NLOS_TABLE
    ]
    return specs


def track_seed(seed: int, track_id: str) -> int:
    return derive_seed(seed, "track", track_id)


def default_campaign(seed: int, snapshots: int = 24000, geometry: ArrayGeometry | None = None) -> list[CsiTensor]:
    """Five LoS and five NLoS tracks with fixed, well separated azimuths."""
    geometry = geometry or ArrayGeometry()
    return [generate_track(geometry, spec, track_seed(seed, spec.track_id)) for spec in default_specs(snapshots)]


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def write_csi(path, csi: CsiTensor) -> None:
    """Binary tensor plus JSON sidecar describing geometry, track and seed."""
    path = Path(path)
    n, m, t = csi.shape
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(np.array([n, m, t], dtype="<u4").tobytes())
        out = np.memmap(path, dtype="<c16", mode="r+", offset=HEADER_BYTES, shape=(n, m, t))
        for t0, block in csi.iter_blocks():
            out[:, :, t0 : t0 + block.shape[2]] = block
        out.flush()
        del out
        meta = {"geometry": asdict(csi.geometry), "track": asdict(csi.track), "seed": csi.seed}
        sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_csi(path) -> CsiTensor:
    """Memory-map a tensor written by :func:`write_csi`."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            header = fh.read(HEADER_BYTES)
        meta = json.loads(sidecar_path(path).read_text())
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CorruptInput(f"bad sidecar for {path}: {exc}") from exc
    if len(header) != HEADER_BYTES or header[: len(MAGIC)] != MAGIC:
        raise CorruptInput(f"{path} is not a CSI tensor file")
    n, m, t = (int(v) for v in np.frombuffer(header[len(MAGIC):], dtype="<u4"))
    if os.path.getsize(path) != HEADER_BYTES + 16 * n * m * t:
        raise CorruptInput(f"{path} is truncated or padded")
    try:
        geometry = ArrayGeometry(**meta["geometry"])
        track = TrackSpec(**meta["track"])
    except (KeyError, TypeError) as exc:
        raise CorruptInput(f"bad sidecar for {path}: {exc}") from exc
    data = np.memmap(path, dtype="<c16", mode="r", offset=HEADER_BYTES, shape=(n, m, t))
    return CsiTensor(geometry, track, meta.get("seed"), array=data)
