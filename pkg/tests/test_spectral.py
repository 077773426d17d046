import numpy as np
import pytest

from ivaccel.spectral import (
    Spectrogram,
    StftConfig,
    TimeSignal,
    analyze,
    interior_slice,
    make_window,
    read_wav,
    synthesize,
    write_wav,
)


def _dft_oracle(frame):
    """Direct one-sided DFT sum, independent of the FFT code path."""
    n = len(frame)
    bins = n // 2 + 1
    idx = np.arange(n)
    out = np.empty(bins, dtype=complex)
    for k in range(bins):
        out[k] = np.sum(frame * np.exp(-2j * np.pi * k * idx / n))
    return out


class TestWindows:
    def test_hamming_cola_constant(self):
        # periodic 0.54/0.46 Hamming sums to 1.08 at 50% overlap
        win = make_window("hamming", 2048)
        overlap_sum = win[:1024] + win[1024:]
        assert np.allclose(overlap_sum, 1.08, atol=1e-12)

    def test_hann_cola_constant(self):
        win = make_window("hann", 256)
        assert np.allclose(win[:128] + win[128:], 1.0, atol=1e-12)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            make_window("kaiser", 64)


class TestAnalyze:
    def test_zero_signal(self):
        sig = TimeSignal(np.zeros((2, 5000)), 8000)
        spec = analyze(sig, StftConfig(512, 256))
        assert spec.data.shape == (2, 257, (5000 - 512) // 256 + 1)
        assert np.all(spec.data == 0)

    def test_impulse_rectangular(self):
        x = np.zeros((1, 512))
        x[0, 0] = 1.0
        spec = analyze(TimeSignal(x, 8000), StftConfig(512, 256, "rectangular"))
        assert np.allclose(np.abs(spec.data[0, :, 0]), 1.0, atol=1e-12)

    def test_matches_direct_dft(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 700))
        config = StftConfig(256, 128)
        spec = analyze(TimeSignal(x, 8000), config)
        win = make_window("hamming", 256)
        for t in (0, 1, 3):
            frame = win * x[0, t * 128 : t * 128 + 256]
            assert np.allclose(spec.data[0, :, t], _dft_oracle(frame), atol=1e-9)

    def test_sinusoid_bin_center_energy(self):
        # tone at exactly bin 4; Hamming leakage stays within +/-2 bins
        fs, win_len = 16000, 2048
        f0 = 4 * fs / win_len
        t = np.arange(win_len) / fs
        x = np.cos(2 * np.pi * f0 * t)
        spec = analyze(TimeSignal(x[np.newaxis], fs), StftConfig(win_len, 1024))
        frame = np.abs(spec.data[0, :, 0]) ** 2
        oracle = np.abs(_dft_oracle(make_window("hamming", win_len) * x)) ** 2
        assert np.allclose(frame, oracle, rtol=1e-8, atol=1e-6)
        assert np.argmax(frame) == 4
        assert frame[2:7].sum() >= 0.99 * frame.sum()

    def test_linearity(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 3000))
        y = rng.standard_normal((2, 3000))
        config = StftConfig(512, 256)
        lhs = analyze(TimeSignal(2.5 * x - 1.25 * y, 8000), config).data
        rhs = (
            2.5 * analyze(TimeSignal(x, 8000), config).data
            - 1.25 * analyze(TimeSignal(y, 8000), config).data
        )
        assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)

    def test_too_short(self):
        with pytest.raises(ValueError, match="signal too short"):
            analyze(TimeSignal(np.zeros((1, 100)), 8000), StftConfig(512, 256))


class TestSynthesize:
    @pytest.mark.parametrize("kind", ["hamming", "hann", "rectangular"])
    def test_roundtrip_white_noise(self, kind):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 20000))
        config = StftConfig(2048, 1024, kind)
        spec = analyze(TimeSignal(x, 16000), config)
        y = synthesize(spec).samples
        sl = interior_slice(config, spec.n_frames)
        err = np.linalg.norm(y[:, sl] - x[:, sl]) / np.linalg.norm(x[:, sl])
        assert err < 1e-3  # -60 dB; in practice this is near machine precision
        assert err < 1e-12

    def test_zero_spectrogram(self):
        config = StftConfig(512, 256)
        spec = Spectrogram(np.zeros((1, 257, 4), dtype=complex), config, 8000)
        assert np.all(synthesize(spec).samples == 0.0)

    def test_single_frame_ramp_formula(self):
        # spectrum of a bare ramp; synthesis applies the window once and
        # divides by its square, so the output is ramp * w / w**2
        win_len = 64
        config = StftConfig(win_len, 32)
        ramp = np.linspace(0.1, 1.0, win_len)
        data = np.fft.rfft(ramp)[np.newaxis, :, np.newaxis]
        out = synthesize(Spectrogram(data, config, 8000)).samples[0]
        win = make_window("hamming", win_len)
        assert np.allclose(out, ramp * win / (win * win), rtol=1e-10)

    def test_non_invertible_schedule(self):
        # hop == window with a Hann window zeroes the first sample of every
        # frame; interior samples then have zero window-sum
        config = StftConfig(64, 64, "hann")
        spec = Spectrogram(np.ones((1, 33, 4), dtype=complex), config, 8000)
        with pytest.raises(ValueError, match="window schedule not invertible"):
            synthesize(spec)


class TestWav:
    def test_float_roundtrip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 1000)).astype(np.float32).astype(np.float64)
        sig = TimeSignal(x, 16000)
        write_wav(tmp_path / "f.wav", sig)
        back = read_wav(tmp_path / "f.wav")
        assert back.sample_rate == 16000
        assert np.array_equal(back.samples, x)

    def test_pcm16_roundtrip_one_lsb(self, tmp_path):
        rng = np.random.default_rng(4)
        x = rng.uniform(-0.99, 0.99, size=(1, 500))
        write_wav(tmp_path / "p.wav", TimeSignal(x, 8000), encoding="pcm16")
        back = read_wav(tmp_path / "p.wav")
        assert np.max(np.abs(back.samples - x)) <= 2.0**-15

    def test_pcm16_full_scale_square_wave(self, tmp_path):
        square = np.tile([1.0, -1.0], 100)[np.newaxis]
        write_wav(tmp_path / "s.wav", TimeSignal(square, 8000), encoding="pcm16")
        back = read_wav(tmp_path / "s.wav").samples[0]
        full = 1.0 - 2.0**-15
        assert np.all(np.abs(np.abs(back) - full) <= 2.0**-15)

    @pytest.mark.parametrize("channels", [1, 3])
    def test_channel_count_roundtrip(self, tmp_path, channels):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((channels, 300)).astype(np.float32).astype(np.float64)
        write_wav(tmp_path / "c.wav", TimeSignal(x, 44100))
        back = read_wav(tmp_path / "c.wav")
        assert back.samples.shape == (channels, 300)
        assert np.array_equal(back.samples, x)

    def test_malformed_header(self, tmp_path):
        bad = tmp_path / "bad.wav"
        bad.write_bytes(b"this is not a wav file at all")
        with pytest.raises(ValueError, match="malformed WAV"):
            read_wav(bad)

    def test_unsupported_encoding(self, tmp_path):
        from scipy.io import wavfile

        wavfile.write(tmp_path / "u.wav", 8000, np.zeros(100, dtype=np.int32))
        with pytest.raises(ValueError, match="unsupported WAV encoding"):
            read_wav(tmp_path / "u.wav")


class TestTypes:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            StftConfig(511, 256)  # odd window
        with pytest.raises(ValueError):
            StftConfig(512, 0)
        with pytest.raises(ValueError):
            StftConfig(512, 513)

    def test_signal_validation(self):
        with pytest.raises(ValueError):
            TimeSignal(np.zeros((2, 2, 2)), 8000)
        with pytest.raises(ValueError):
            TimeSignal(np.zeros(10), 0)

    def test_spectrogram_bin_check(self):
        with pytest.raises(ValueError, match="bin count"):
            Spectrogram(np.zeros((1, 100, 2), dtype=complex), StftConfig(512, 256), 8000)
