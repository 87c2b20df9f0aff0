import math

import numpy as np
import pytest

from aoalb.aoa_features import music_estimate
from aoalb.channel_sim import (
    MAGIC,
    ArrayGeometry,
    TrackSpec,
    default_campaign,
    generate_track,
    read_csi,
    sidecar_path,
    steering_vector,
    write_csi,
)
from aoalb.errors import AzimuthOutOfRange, CorruptInput, InvalidSpec, IoError
from aoalb.linalg import hermitian_eig, sample_covariance

GEOM = ArrayGeometry()


def row_block(csi, row, sub, t0, t1):
    cols = csi.geometry.cols
    return csi.block(t0, t1)[row * cols:(row + 1) * cols, sub, :]


class TestSteering:
    def test_broadside_is_ones(self):
        np.testing.assert_array_equal(steering_vector(GEOM, 0.0), np.ones(16))

    def test_mirror_is_conjugate(self):
        a = steering_vector(GEOM, 23.5)
        b = steering_vector(GEOM, -23.5)
        np.testing.assert_allclose(b, a.conj(), atol=1e-15)

    def test_closed_form_30_degrees(self):
        a = steering_vector(GEOM, 30.0)
        assert abs(a[1] - (-1j)) <= 1e-15
        np.testing.assert_allclose(np.abs(a), 1.0, atol=1e-15)

    def test_out_of_range(self):
        with pytest.raises(AzimuthOutOfRange):
            steering_vector(GEOM, 90.5)


class TestSpecValidation:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"region": "indoor"},
            {"base_azimuth": 90.0},
            {"base_azimuth": 85.0, "azimuth_drift": 6.0},
            {"region": "LoS", "rician_k_db": 5.0},
            {"region": "NLoS", "rician_k_db": 3.0},
            {"region": "NLoS", "rician_k_db": -5.0, "multipath_count": 0},
            {"snapshots": 0},
        ],
    )
    def test_rejects(self, kwargs):
        with pytest.raises(InvalidSpec):
            TrackSpec("t", **kwargs)

    def test_geometry_limits(self):
        with pytest.raises(InvalidSpec):
            ArrayGeometry(rows=5)
        with pytest.raises(InvalidSpec):
            ArrayGeometry(horizontal_spacing=0.0)


class TestGenerateTrack:
    def test_pure_los_is_rank_one(self):
        spec = TrackSpec("p", snapshots=2000, base_azimuth=-20.0, rician_k_db=math.inf, snr_db=math.inf)
        csi = generate_track(GEOM, spec, seed=3)
        target = steering_vector(GEOM, -20.0) / 4.0
        for row, sub in [(0, 0), (2, 17), (3, 49)]:
            values, vectors = hermitian_eig(sample_covariance(row_block(csi, row, sub, 0, 2000)))
            assert values[1] <= 1e-12 * values[0]
            assert abs(abs(np.vdot(target, vectors[:, 0])) - 1.0) <= 1e-8

    def test_noise_only_concentrates(self):
        spec = TrackSpec("n", snapshots=5000, snr_db=-math.inf)
        csi = generate_track(GEOM, spec, seed=11)
        for row in range(4):
            values, _ = hermitian_eig(sample_covariance(row_block(csi, row, 0, 0, 5000)))
            assert values.max() <= 1.2 and values.min() >= 1 / 1.2

    def test_default_los_music_recovers_azimuth(self):
        for csi in default_campaign(42)[:5]:
            est = music_estimate(row_block(csi, 0, 0, 0, 2000)).azimuth
            planted = csi._generator.dominant_azimuth(np.arange(2000)).mean()
            assert abs(est - planted) <= 0.5, csi.track.track_id

    def test_deterministic(self):
        spec = TrackSpec("d", snapshots=1500)
        a = generate_track(GEOM, spec, seed=5).data
        b = generate_track(GEOM, spec, seed=5).data
        c = generate_track(GEOM, spec, seed=6).data
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_block_matches_full_tensor(self):
        csi = generate_track(GEOM, TrackSpec("b", snapshots=2500), seed=1)
        full = csi.data
        np.testing.assert_array_equal(csi.block(900, 2100), full[:, :, 900:2100])

    def test_finite_and_shaped(self):
        csi = generate_track(GEOM, TrackSpec("s", region="NLoS", snapshots=1200, rician_k_db=-5.0), seed=2)
        assert csi.data.shape == (64, 50, 1200)
        assert np.all(np.isfinite(csi.data))

    @pytest.mark.parametrize("k_db,region", [(15.0, "LoS"), (10.0, "LoS"), (-5.0, "NLoS"), (0.0, "NLoS")])
    @pytest.mark.parametrize("seed", [0, 7, 42])
    def test_energy_ratio(self, k_db, region, seed):
        spec = TrackSpec("e", region=region, snapshots=3000, base_azimuth=12.0, rician_k_db=k_db)
        gen = generate_track(GEOM, spec, seed)._generator
        dominant, diffuse = gen.path_fields(0, 3000)
        ratio = np.mean(np.abs(dominant) ** 2) / np.mean(np.abs(diffuse) ** 2)
        assert ratio == pytest.approx(10 ** (k_db / 10), rel=0.05)

    def test_subcarrier_phase_slope(self):
        spec = TrackSpec("f", snapshots=10, rician_k_db=math.inf, multipath_count=0, snr_db=math.inf)
        csi = generate_track(GEOM, spec, seed=4)
        tau = csi._generator.delays[0]
        h = csi.data
        step = h[:, 1:, :] / h[:, :-1, :]
        expected = np.exp(-2j * np.pi * (GEOM.bandwidth_hz / GEOM.subcarriers) * tau)
        np.testing.assert_allclose(step, expected, atol=1e-12)


class TestCampaign:
    def test_regions_and_counts(self):
        tracks = default_campaign(1, snapshots=3000)
        assert [t.track.region for t in tracks] == ["LoS"] * 5 + ["NLoS"] * 5
        assert all(t.snapshots == 3000 for t in tracks)
        assert {t.track.track_id for t in tracks[:5]} == {"6", "9", "10", "11", "12"}
        assert {t.track.track_id for t in tracks[5:]} == {"1", "2", "3", "13", "20"}

    def test_azimuth_separation(self):
        tracks = default_campaign(1, snapshots=3000)
        for group in (tracks[:5], tracks[5:]):
            az = sorted(t.track.base_azimuth for t in group)
            assert min(np.diff(az)) >= 8.0

    def test_k_factors(self):
        tracks = default_campaign(1, snapshots=3000)
        assert all(t.track.rician_k_db == 15.0 for t in tracks[:5])
        assert all(t.track.rician_k_db == -5.0 and t.track.multipath_count == 6 for t in tracks[5:])

    def test_bit_identical_and_independent_noise(self):
        a = default_campaign(9, snapshots=1000)
        b = default_campaign(9, snapshots=1000)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.data, y.data)
        assert a[0].seed != a[1].seed


class TestFileFormat:
    def test_round_trip(self, tmp_path):
        csi = generate_track(GEOM, TrackSpec("r", snapshots=1300, snr_db=-math.inf), seed=8)
        path = tmp_path / "track.csi"
        write_csi(path, csi)
        back = read_csi(path)
        np.testing.assert_array_equal(back.data, csi.data)
        assert back.track == csi.track and back.geometry == csi.geometry and back.seed == 8

    def test_layout(self, tmp_path):
        geom = ArrayGeometry(rows=1, cols=2, subcarriers=1)
        csi = generate_track(geom, TrackSpec("l", snapshots=3), seed=0)
        path = tmp_path / "tiny.csi"
        write_csi(path, csi)
        raw = path.read_bytes()
        assert raw[:16] == MAGIC
        assert np.frombuffer(raw[16:28], dtype="<u4").tolist() == [2, 1, 3]
        values = np.frombuffer(raw[28:], dtype="<f8")
        flat = csi.data.reshape(-1)
        np.testing.assert_array_equal(values[0::2], flat.real)
        np.testing.assert_array_equal(values[1::2], flat.imag)

    def test_bad_magic(self, tmp_path):
        csi = generate_track(GEOM, TrackSpec("m", snapshots=10), seed=0)
        path = tmp_path / "bad.csi"
        write_csi(path, csi)
        raw = bytearray(path.read_bytes())
        raw[0:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(CorruptInput):
            read_csi(path)

    def test_truncated(self, tmp_path):
        csi = generate_track(GEOM, TrackSpec("t", snapshots=10), seed=0)
        path = tmp_path / "short.csi"
        write_csi(path, csi)
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(CorruptInput):
            read_csi(path)

    def test_missing_sidecar(self, tmp_path):
        csi = generate_track(GEOM, TrackSpec("s", snapshots=10), seed=0)
        path = tmp_path / "nosidecar.csi"
        write_csi(path, csi)
        sidecar_path(path).unlink()
        with pytest.raises(IoError):
            read_csi(path)
