import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from melcycle import audio
from melcycle.audio import (
    DataError,
    FeatureConfig,
    MelSpectrogram,
    Waveform,
    apply_denorm,
    apply_norm,
    compute_stats,
    frame_count,
    griffin_lim,
    load_wav,
    log_mel,
    mel_cepstrum,
    mel_filterbank,
    stft,
)

SR = 22050


def write_wav(path, samples, rate=SR, sampwidth=2):
    pcm = (np.clip(samples, -1, 1) * 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(sampwidth)
        fh.setframerate(rate)
        fh.writeframes(pcm.tobytes())


def tone(freq, seconds=1.0, rate=SR, amp=0.5):
    t = np.arange(int(seconds * rate)) / rate
    return amp * np.sin(2 * np.pi * freq * t)


class TestLoadWav:
    def test_one_second_16bit(self, tmp_path):
        p = tmp_path / "a.wav"
        write_wav(p, tone(440.0))
        w = load_wav(p)
        assert len(w.samples) == SR
        assert w.sample_rate == SR
        assert np.max(np.abs(w.samples)) <= 1.0

    def test_all_zero_payload(self, tmp_path):
        p = tmp_path / "z.wav"
        write_wav(p, np.zeros(4000))
        w = load_wav(p)
        np.testing.assert_array_equal(w.samples, 0.0)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_wav(tmp_path / "nope.wav")

    def test_empty_audio_rejected(self, tmp_path):
        p = tmp_path / "e.wav"
        write_wav(p, np.zeros(0))
        with pytest.raises(DataError):
            load_wav(p)

    def test_resample_44100_matches_sinc_reference(self, tmp_path):
        n_in = 44100
        x = tone(500.0, seconds=1.0, rate=44100)
        p = tmp_path / "hi.wav"
        write_wav(p, x, rate=44100)
        w = load_wav(p)
        # length formula of the polyphase resampler
        assert len(w.samples) == int(np.ceil(n_in / 2))
        # duration preserved within one hop
        assert abs(len(w.samples) / SR - n_in / 44100) <= 256 / SR
        # direct windowed-sinc decimation reference on the interior
        half = 64
        m = np.arange(-half, half + 1)
        h = 0.5 * np.sinc(0.5 * m) * np.hanning(2 * half + 1)
        idx = np.arange(2000, 6000)
        ref = np.array([np.dot(x[2 * n - half : 2 * n + half + 1], h) for n in idx])
        got = w.samples[idx]
        assert np.max(np.abs(got - ref)) < 2e-2


class TestStft:
    def test_all_zero(self):
        spec = stft(Waveform(np.zeros(5000)))
        assert spec.shape[0] == 513
        np.testing.assert_array_equal(np.abs(spec), 0.0)

    def test_sinusoid_peaks_at_bin_center(self):
        k = 32
        freq = k * SR / 1024
        spec = np.abs(stft(Waveform(tone(freq))))
        interior = spec[:, 3:-3]
        assert np.all(np.argmax(interior, axis=0) == k)

    def test_frame_formula_vs_enumeration(self):
        n = 22528
        spec = stft(Waveform(np.zeros(n)))
        padded = n + 2 * 512
        enumerated = sum(1 for start in range(0, padded, 256) if start + 1024 <= padded)
        assert spec.shape[1] == enumerated == frame_count(n, 1024, 256)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(min_value=1, max_value=9000))
    def test_frame_formula_holds_for_any_length(self, n):
        spec = stft(Waveform(np.zeros(n)))
        assert spec.shape[1] == frame_count(n, 1024, 256)

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            stft(np.zeros(0))


class TestFilterbank:
    def test_rows_nonnegative_with_positive_sums(self):
        fb = mel_filterbank()
        assert fb.shape == (80, 513)
        assert np.all(fb >= 0.0)
        assert np.all(fb.sum(axis=1) > 0.0)

    def test_peaks_are_one_ish(self):
        # triangles are sampled on the FFT grid, so peaks approach 1.0
        fb = mel_filterbank()
        assert np.max(fb) <= 1.0 + 1e-12
        assert np.max(fb) > 0.9


class TestLogMel:
    def test_all_zero_hits_floor(self):
        m = log_mel(Waveform(np.zeros(8000)))
        np.testing.assert_allclose(m.data, np.log(1e-5))

    def test_white_noise_shape_and_finiteness(self):
        rng = np.random.default_rng(0)
        m = log_mel(Waveform(rng.uniform(-0.9, 0.9, 22050)))
        assert m.data.shape[0] == 80
        assert np.all(np.isfinite(m.data))

    def test_sinusoid_peak_row_constant(self):
        m = log_mel(Waveform(tone(1000.0)))
        rows = np.argmax(m.data[:, 4:-4], axis=0)
        assert np.all(rows == rows[0])


class TestStats:
    def test_constant_corpus(self):
        m = MelSpectrogram(np.full((80, 10), 2.5))
        stats = compute_stats([m])
        np.testing.assert_allclose(stats.mean, 2.5)
        np.testing.assert_allclose(stats.std, audio.STD_FLOOR)

    def test_norm_denorm_identity(self):
        rng = np.random.default_rng(1)
        corpus = [MelSpectrogram(rng.standard_normal((80, 30)) * 3 - 5) for _ in range(3)]
        stats = compute_stats(corpus)
        m = corpus[1]
        back = apply_denorm(apply_norm(m, stats), stats)
        np.testing.assert_allclose(back.data, m.data, atol=1e-6)

    def test_two_utterances_match_scalar_reference(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((4, 3))
        b = rng.standard_normal((4, 5))
        stats = compute_stats(
            [MelSpectrogram(a, mel_bins=4), MelSpectrogram(b, mel_bins=4)]
        )
        for q in range(4):
            vals = list(a[q]) + list(b[q])
            mean = sum(vals) / len(vals)
            var = sum((v - mean) ** 2 for v in vals) / len(vals)
            assert abs(stats.mean[q] - mean) < 1e-12
            assert abs(stats.std[q] - np.sqrt(var)) < 1e-12

    def test_empty_corpus_rejected(self):
        with pytest.raises(DataError):
            compute_stats([])

    def test_dimension_mismatch_rejected(self):
        stats = compute_stats([MelSpectrogram(np.zeros((4, 3)), mel_bins=4)])
        with pytest.raises(DataError):
            apply_norm(MelSpectrogram(np.zeros((80, 3))), stats)

    def test_stats_file_roundtrip(self, tmp_path):
        rng = np.random.default_rng(3)
        stats = compute_stats([MelSpectrogram(rng.standard_normal((80, 7)))])
        p = tmp_path / "stats.txt"
        audio.save_stats(stats, p, echo='{"src": "test"}')
        back = audio.load_stats(p)
        np.testing.assert_array_equal(back.mean, stats.mean)
        np.testing.assert_array_equal(back.std, stats.std)


class TestMelCepstrum:
    def test_constant_column(self):
        c = 1.7
        mc = mel_cepstrum(MelSpectrogram(np.full((80, 4), c)), order=35)
        np.testing.assert_allclose(mc.coeffs[0], c * np.sqrt(80), atol=1e-9)
        np.testing.assert_allclose(mc.coeffs[1:], 0.0, atol=1e-9)

    def test_identical_inputs_identical_outputs(self):
        rng = np.random.default_rng(4)
        data = rng.standard_normal((80, 6))
        a = mel_cepstrum(MelSpectrogram(data.copy()))
        b = mel_cepstrum(MelSpectrogram(data.copy()))
        np.testing.assert_array_equal(a.coeffs, b.coeffs)

    def test_matches_naive_dct_loop(self):
        rng = np.random.default_rng(5)
        q = 80
        data = rng.standard_normal((q, 3))
        mc = mel_cepstrum(MelSpectrogram(data))
        for d in range(35):
            alpha = np.sqrt(1.0 / q) if d == 0 else np.sqrt(2.0 / q)
            for t in range(3):
                ref = alpha * sum(
                    data[qq, t] * np.cos(np.pi * (2 * qq + 1) * d / (2 * q))
                    for qq in range(q)
                )
                assert abs(mc.coeffs[d, t] - ref) < 1e-9

    def test_linearity(self):
        rng = np.random.default_rng(6)
        m1 = rng.standard_normal((80, 5))
        m2 = rng.standard_normal((80, 5))
        a, b = 0.3, -1.7
        lhs = mel_cepstrum(MelSpectrogram(a * m1 + b * m2)).coeffs
        rhs = (
            a * mel_cepstrum(MelSpectrogram(m1)).coeffs
            + b * mel_cepstrum(MelSpectrogram(m2)).coeffs
        )
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)

    def test_order_above_bins_rejected(self):
        with pytest.raises(DataError):
            mel_cepstrum(MelSpectrogram(np.zeros((20, 3)), mel_bins=20), order=35)


class TestGriffinLim:
    def test_zero_iters_runs_deterministically(self):
        m = log_mel(Waveform(tone(500.0, seconds=0.4)))
        a = griffin_lim(m, iters=0)
        b = griffin_lim(m, iters=0)
        np.testing.assert_array_equal(a.samples, b.samples)

    def test_pure_tone_peak_frequency(self):
        freq = 1000.0
        m = log_mel(Waveform(tone(freq, seconds=0.7)))
        rec = griffin_lim(m, iters=32)
        spec = np.abs(stft(rec))
        peak_bin = np.argmax(spec[:, 4:-4].mean(axis=1))
        expected = round(freq * 1024 / SR)
        assert abs(peak_bin - expected) <= 1

    def test_more_iters_do_not_increase_error(self):
        m = log_mel(Waveform(tone(700.0, seconds=0.5, amp=0.4)))

        def err(iters):
            rec = griffin_lim(m, iters=iters)
            back = log_mel(Waveform(rec.samples[: (m.frames - 1) * 256]))
            t = min(back.frames, m.frames)
            return float(np.linalg.norm(back.data[:, :t] - m.data[:, :t]))

        assert err(32) <= err(1) + 1e-9
