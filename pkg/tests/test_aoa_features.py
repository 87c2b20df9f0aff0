import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aoalb.aoa_features import (
    WindowPlan,
    benchmark_estimators,
    esprit_estimate,
    extract_dataset,
    extract_features,
    music_estimate,
)
from aoalb.channel_sim import ArrayGeometry, CsiTensor, TrackSpec, generate_track, steering_matrix
from aoalb.dataset import Dataset
from aoalb.errors import DegenerateCovariance, InvalidSpec, TooManySources, TooShort

ANGLES = [-60.0, -35.0, 0.0, 30.0, 75.0]


def noiseless(azimuths, w=2000, seed=0):
    rng = np.random.default_rng(seed)
    a = steering_matrix(16, 0.5, np.asarray(azimuths, dtype=float))
    s = rng.standard_normal((a.shape[1], w)) + 1j * rng.standard_normal((a.shape[1], w))
    return a @ s


def noisy(azimuth, w=2000, snr_db=5.0, seed=0):
    rng = np.random.default_rng(seed)
    x = noiseless([azimuth], w, seed)
    sigma = np.sqrt(10 ** (-snr_db / 10) * 2 / 2)
    return x + sigma * (rng.standard_normal(x.shape) + 1j * rng.standard_normal(x.shape))


def dense_scan_oracle(x, step=0.001):
    """Brute-force MUSIC null search on a fine grid, using numpy's eigh."""
    r = x @ x.conj().T / x.shape[1]
    _, vecs = np.linalg.eigh(r)
    en = vecs[:, :-1]
    grid = np.arange(-90.0, 90.0 + step / 2, step)
    a = steering_matrix(16, 0.5, grid)
    null = np.sum(np.abs(en.conj().T @ a) ** 2, axis=0)
    return grid[np.argmin(null)]


class TestMusic:
    @pytest.mark.parametrize("theta", ANGLES)
    def test_noiseless_sources(self, theta):
        est = music_estimate(noiseless([theta]))
        assert abs(est.azimuth - theta) <= 0.01

    def test_broadside_exact(self):
        assert abs(music_estimate(noiseless([0.0])).azimuth) <= 1e-6

    @pytest.mark.parametrize("theta", [30.0, 17.43, -52.068])
    def test_matches_dense_scan(self, theta):
        x = noisy(theta, snr_db=0.0, seed=3)
        assert abs(music_estimate(x).azimuth - dense_scan_oracle(x)) <= 0.01

    def test_spectrum_positive(self):
        res = music_estimate(noisy(10.0))
        assert np.all(res.spectrum > 0) and res.spectrum.shape == res.grid.shape == (1801,)

    def test_scaling_keeps_argmax(self):
        x = noisy(-12.3, seed=4)
        a = music_estimate(x)
        b = music_estimate(x * 37.5)
        assert np.argmax(a.spectrum) == np.argmax(b.spectrum)

    def test_two_sources(self):
        res = music_estimate(noiseless([-20.0, 40.0]), num_sources=2)
        np.testing.assert_allclose(res.azimuths, [-20.0, 40.0], atol=0.01)

    def test_too_many_sources(self):
        with pytest.raises(TooManySources):
            music_estimate(noiseless([0.0]), num_sources=16)

    def test_degenerate(self):
        with pytest.raises(DegenerateCovariance):
            music_estimate(np.zeros((16, 100), dtype=complex))


class TestEsprit:
    @pytest.mark.parametrize("theta", ANGLES)
    def test_noiseless_exact(self, theta):
        assert abs(esprit_estimate(noiseless([theta])).azimuth - theta) <= 1e-6

    def test_broadside(self):
        assert abs(esprit_estimate(noiseless([0.0])).azimuth) <= 1e-9

    def test_two_sources(self):
        res = esprit_estimate(noiseless([-20.0, 40.0]), num_sources=2)
        np.testing.assert_allclose(res.azimuths, [-20.0, 40.0], atol=1e-6)

    def test_too_many_sources(self):
        with pytest.raises(TooManySources):
            esprit_estimate(noiseless([0.0]), num_sources=16)

    def test_agrees_with_music_in_noise(self):
        x = noisy(22.0, snr_db=0.0, seed=9)
        assert abs(esprit_estimate(x).azimuth - music_estimate(x).azimuth) <= 0.5


class TestMirror:
    @settings(max_examples=25, deadline=None)
    @given(theta=st.floats(-80.0, 80.0))
    def test_conjugate_negates(self, theta):
        x = noiseless([theta], w=200)
        assert abs(esprit_estimate(x.conj()).azimuth + esprit_estimate(x).azimuth) <= 1e-6
        assert abs(music_estimate(x.conj()).azimuth + music_estimate(x).azimuth) <= 1e-6


class TestWindowPlan:
    @pytest.mark.parametrize("t,w,count", [(2000, 2000, 1), (3000, 2000, 2), (24000, 2000, 23),
                                           (24000, 1000, 47), (120000, 2000, 119), (1999, 2000, 0)])
    def test_counts(self, t, w, count):
        assert WindowPlan(w, 0.5).windows_per_track(t) == count

    def test_offsets(self):
        assert WindowPlan(2000, 0.5).offsets(3000) == [0, 1000]

    def test_invalid(self):
        with pytest.raises(InvalidSpec):
            WindowPlan(2000, 0.0)
        with pytest.raises(InvalidSpec):
            WindowPlan(32)


def small_track(t, seed=0, **kw):
    geom = ArrayGeometry(subcarriers=3)
    return generate_track(geom, TrackSpec("7", snapshots=t, base_azimuth=14.0, **kw), seed)


class TestExtraction:
    def test_single_window(self):
        samples = extract_features(small_track(2000), WindowPlan(2000))
        assert len(samples) == 1 and samples[0].features.shape == (12,)

    def test_two_windows(self):
        samples = extract_features(small_track(3000), WindowPlan(2000))
        assert [s.window_index for s in samples] == [0, 1]

    def test_feature_order_matches_direct_estimates(self):
        csi = small_track(3000, seed=2)
        plan = WindowPlan(2000)
        ds = extract_dataset(csi, plan, ("MUSIC", "ESPRIT"))
        block = csi.block(1000, 3000)
        for row in range(4):
            for sub in range(3):
                x = block[row * 16:(row + 1) * 16, sub, :]
                i = row * 3 + sub
                assert abs(ds["MUSIC"].features[1, i] - music_estimate(x).azimuth) <= 1e-6
                assert abs(ds["ESPRIT"].features[1, i] - esprit_estimate(x).azimuth) <= 1e-6

    def test_uneven_shift_matches_direct(self):
        csi = small_track(700, seed=1)
        ds = extract_dataset(csi, WindowPlan(300, 0.7), ("ESPRIT",))["ESPRIT"]
        assert len(ds) == 2
        x = csi.block(210, 510)[16:32, 2, :]
        assert abs(ds.features[1, 5] - esprit_estimate(x).azimuth) <= 1e-6

    def test_labels(self):
        ds = extract_dataset(small_track(2000), WindowPlan(2000), ("ESPRIT",))["ESPRIT"]
        assert ds.region[0] == "LoS" and ds.track_id[0] == "7" and ds.estimator[0] == "ESPRIT"
        assert np.all(np.abs(ds.features) <= 90.0)

    def test_degenerate_window_flagged(self):
        geom = ArrayGeometry(subcarriers=2)
        track = TrackSpec("z", snapshots=3000)
        data = np.ones((64, 2, 3000), dtype=complex)
        data[:, 1, :2000] = 0.0
        csi = CsiTensor(geom, track, array=data)
        stats = {}
        ds = extract_dataset(csi, WindowPlan(2000), ("MUSIC", "ESPRIT"), stats=stats)
        for name in ("MUSIC", "ESPRIT"):
            assert ds[name].valid.tolist() == [False, True]
            assert np.all(ds[name].features[0, 1::2] == 0.0)
            assert stats[name].invalid == 4 and stats[name].windows == 2

    def test_too_short(self):
        with pytest.raises(TooShort):
            extract_dataset(small_track(1500), WindowPlan(2000))

    def test_unknown_estimator(self):
        with pytest.raises(InvalidSpec):
            extract_dataset(small_track(2000), WindowPlan(2000), ("CAPON",))


class TestCsv:
    def test_round_trip(self, tmp_path):
        ds = extract_dataset(small_track(3000), WindowPlan(2000))["MUSIC"]
        path = tmp_path / "f.csv"
        ds.to_csv(path)
        text = path.read_bytes()
        assert b"\r\n" not in text
        header = text.split(b"\n")[0].decode()
        assert header == ",".join([f"f{i:03d}" for i in range(12)] + ["region", "track_id", "window_index", "estimator", "valid"])
        back = Dataset.from_csv(path)
        np.testing.assert_allclose(back.features, ds.features, atol=5e-7)
        assert back.track_id.tolist() == ds.track_id.tolist()
        assert back.valid.tolist() == ds.valid.tolist()

    def test_six_decimals(self, tmp_path):
        ds = Dataset(np.array([[1.23456789, -0.5]]), ["LoS"], ["6"], [0], ["MUSIC"], [True])
        path = tmp_path / "d.csv"
        ds.to_csv(path)
        assert path.read_text().splitlines()[1] == "1.234568,-0.500000,LoS,6,0,MUSIC,1"


class TestBenchmark:
    def test_zero_windows(self):
        report = benchmark_estimators(small_track(100), WindowPlan(2000))
        assert report["estimates"] == 0 and report["windows"] == 0
        assert report["MUSIC"]["total_seconds"] == 0.0 and report["ESPRIT"]["total_seconds"] == 0.0
        assert report["MUSIC"]["mean_ms"] == 0.0 and report["ESPRIT"]["mean_ms"] == 0.0
        assert report["ratio"] is None

    def test_music_slower(self):
        report = benchmark_estimators(small_track(3000), WindowPlan(1000), pairs=((0, 0), (1, 2)))
        assert report["estimates"] == 10
        assert report["ratio"] > 1
