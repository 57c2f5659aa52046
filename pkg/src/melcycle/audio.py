"""Waveform <-> log mel-spectrogram feature pipeline.

Everything here is plain numpy (no gradients): WAV loading, STFT with
centered frames, an HTK-scale mel filterbank with peak-normalized triangles,
per-bin corpus statistics, DCT-II mel-cepstra, and a Griffin-Lim inverter
for audible smoke tests only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft
import scipy.io.wavfile
import scipy.signal
from numpy.lib.stride_tricks import as_strided


class DataError(ValueError):
    """Unusable input data (bad file, bad shapes, empty corpus...)."""


TARGET_SAMPLE_RATE = 22050
LOG_FLOOR = 1e-5
STD_FLOOR = 1e-8


@dataclass
class FeatureConfig:
    sample_rate: int = TARGET_SAMPLE_RATE
    window: int = 1024
    hop: int = 256
    mel_bins: int = 80
    log_floor: float = LOG_FLOOR


@dataclass
class Waveform:
    samples: np.ndarray  # float64 in [-1, 1]
    sample_rate: int = TARGET_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DataError("Waveform expects a 1-D sample array")
        if self.sample_rate <= 0:
            raise DataError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("waveform contains non-finite samples")


@dataclass
class MelSpectrogram:
    data: np.ndarray  # (mel_bins, frames), log magnitude
    mel_bins: int = 80
    hop: int = 256
    window: int = 1024
    sample_rate: int = TARGET_SAMPLE_RATE

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] != self.mel_bins:
            raise DataError(
                f"mel data shape {self.data.shape} does not match mel_bins={self.mel_bins}"
            )
        if self.data.shape[1] < 1:
            raise DataError("mel-spectrogram needs at least one frame")
        if not np.all(np.isfinite(self.data)):
            raise DataError("mel-spectrogram contains non-finite values")

    @property
    def frames(self) -> int:
        return self.data.shape[1]


@dataclass
class FeatureStats:
    mean: np.ndarray  # (mel_bins,)
    std: np.ndarray  # (mel_bins,), floored at STD_FLOOR

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise DataError("stats mean/std must be matching 1-D vectors")
        if np.any(self.std < STD_FLOOR):
            raise DataError(f"std entries must be >= {STD_FLOOR}")


@dataclass
class MelCepstrum:
    coeffs: np.ndarray  # (order, frames); row 0 is the energy coefficient

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.coeffs.ndim != 2:
            raise DataError("cepstrum must be 2-D (order, frames)")
        if not np.all(np.isfinite(self.coeffs)):
            raise DataError("cepstrum contains non-finite values")

    @property
    def order(self) -> int:
        return self.coeffs.shape[0]

    @property
    def frames(self) -> int:
        return self.coeffs.shape[1]


def load_wav(path) -> Waveform:
    """Read a PCM/float WAV, downmix to mono, scale to [-1, 1], resample to 22050 Hz."""
    try:
        rate, raw = scipy.io.wavfile.read(path)
    except FileNotFoundError:
        raise
    except Exception as exc:  # noqa: BLE001 - scipy raises various types
        raise DataError(f"unreadable WAV file {path}: {exc}") from exc
    if raw.size == 0:
        raise DataError(f"empty audio in {path}")
    x = raw.astype(np.float64)
    if x.ndim == 2:
        x = x.mean(axis=1)
    elif x.ndim != 1:
        raise DataError(f"unsupported channel layout in {path}")
    if raw.dtype == np.int16:
        x /= 32768.0
    elif raw.dtype == np.int32:
        x /= 2147483648.0
    elif raw.dtype == np.uint8:
        x = (x - 128.0) / 128.0
    elif raw.dtype in (np.float32, np.float64):
        pass
    else:
        raise DataError(f"unsupported WAV encoding {raw.dtype} in {path}")
    x = np.clip(x, -1.0, 1.0)
    if rate != TARGET_SAMPLE_RATE:
        x = resample(x, rate, TARGET_SAMPLE_RATE)
        x = np.clip(x, -1.0, 1.0)
    return Waveform(x, TARGET_SAMPLE_RATE)


def resample(x: np.ndarray, rate_in: int, rate_out: int) -> np.ndarray:
    """Polyphase resampling; output length is ceil(len * rate_out / rate_in)."""
    g = np.gcd(int(rate_in), int(rate_out))
    return scipy.signal.resample_poly(x, rate_out // g, rate_in // g)


def _reflect_pad(x: np.ndarray, pad: int) -> np.ndarray:
    """Reflection padding that keeps working when pad exceeds len(x) - 1."""
    while pad > 0:
        step = min(pad, len(x) - 1)
        if step == 0:  # single sample: nothing to reflect against
            x = np.concatenate([x[:1], x, x[:1]])
            pad -= 1
            continue
        x = np.pad(x, (step, step), mode="reflect")
        pad -= step
    return x


def frame_count(n_samples: int, window: int, hop: int) -> int:
    """Closed-form frame count for centered framing with window/2 padding."""
    return 1 + (n_samples + 2 * (window // 2) - window) // hop


def stft(w: Waveform, window: int = 1024, hop: int = 256) -> np.ndarray:
    """Complex STFT (window//2 + 1, T) with periodic Hann and centered frames."""
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if len(x) < 1:
        raise DataError("cannot compute STFT of an empty waveform")
    pad = window // 2
    xp = _reflect_pad(x, pad)
    t = (len(xp) - window) // hop + 1
    s = xp.strides[0]
    frames = as_strided(xp, (t, window), (s * hop, s))
    win = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(window) / window)
    return np.fft.rfft(frames * win, axis=1).T


def istft(spec: np.ndarray, window: int = 1024, hop: int = 256, length: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of stft(); trims the centering pad."""
    n_bins, t = spec.shape
    if n_bins != window // 2 + 1:
        raise DataError(f"expected {window // 2 + 1} bins, got {n_bins}")
    win = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(window) / window)
    frames = np.fft.irfft(spec.T, n=window, axis=1)
    total = window + (t - 1) * hop
    acc = np.zeros(total)
    norm = np.zeros(total)
    for i in range(t):
        acc[i * hop : i * hop + window] += frames[i] * win
        norm[i * hop : i * hop + window] += win * win
    out = acc / np.maximum(norm, 1e-12)
    pad = window // 2
    out = out[pad : total - pad]
    if length is not None:
        out = out[:length]
    return out


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_bin_of_hz(f, mel_bins: int = 80, sample_rate: int = TARGET_SAMPLE_RATE):
    """Fractional filterbank row whose peak sits at frequency f."""
    delta = hz_to_mel(sample_rate / 2.0) / (mel_bins + 1)
    return hz_to_mel(f) / delta - 1.0


def mel_filterbank(mel_bins: int = 80, window: int = 1024, sample_rate: int = TARGET_SAMPLE_RATE) -> np.ndarray:
    """(mel_bins, window//2+1) triangular filters, HTK scale, peak 1.0."""
    n_bins = window // 2 + 1
    fft_freqs = np.arange(n_bins) * sample_rate / window
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), mel_bins + 2))
    fb = np.zeros((mel_bins, n_bins))
    for i in range(mel_bins):
        lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
        rising = (fft_freqs - lo) / (mid - lo)
        falling = (hi - fft_freqs) / (hi - mid)
        fb[i] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def log_mel(w: Waveform, cfg: FeatureConfig | None = None) -> MelSpectrogram:
    """80-bin log mel-spectrogram: log(max(fb @ |STFT|, floor))."""
    cfg = cfg or FeatureConfig()
    if isinstance(w, Waveform) and w.sample_rate != cfg.sample_rate:
        raise DataError(f"waveform rate {w.sample_rate} != config rate {cfg.sample_rate}")
    mag = np.abs(stft(w, cfg.window, cfg.hop))
    fb = mel_filterbank(cfg.mel_bins, cfg.window, cfg.sample_rate)
    data = np.log(np.maximum(fb @ mag, cfg.log_floor))
    return MelSpectrogram(data, cfg.mel_bins, cfg.hop, cfg.window, cfg.sample_rate)


def compute_stats(corpus: list[MelSpectrogram]) -> FeatureStats:
    """Per-mel-bin mean/std over all frames of all utterances (population std)."""
    if not corpus:
        raise DataError("cannot compute stats over an empty corpus")
    q = corpus[0].data.shape[0]
    for m in corpus:
        if m.data.shape[0] != q:
            raise DataError("corpus mixes mel_bins sizes")
    allframes = np.concatenate([m.data for m in corpus], axis=1)
    mean = allframes.mean(axis=1)
    std = np.maximum(allframes.std(axis=1), STD_FLOOR)
    return FeatureStats(mean, std)


def apply_norm(m: MelSpectrogram, stats: FeatureStats) -> MelSpectrogram:
    if stats.mean.shape[0] != m.data.shape[0]:
        raise DataError("stats dimension does not match spectrogram")
    data = (m.data - stats.mean[:, None]) / stats.std[:, None]
    return MelSpectrogram(data, m.mel_bins, m.hop, m.window, m.sample_rate)


def apply_denorm(m: MelSpectrogram, stats: FeatureStats) -> MelSpectrogram:
    if stats.mean.shape[0] != m.data.shape[0]:
        raise DataError("stats dimension does not match spectrogram")
    data = m.data * stats.std[:, None] + stats.mean[:, None]
    return MelSpectrogram(data, m.mel_bins, m.hop, m.window, m.sample_rate)


def mel_cepstrum(m: MelSpectrogram, order: int = 35) -> MelCepstrum:
    """Per-frame orthonormal DCT-II of the log-mel column, truncated to `order`."""
    q = m.data.shape[0]
    if order > q:
        raise DataError(f"cepstrum order {order} exceeds mel bins {q}")
    coeffs = scipy.fft.dct(m.data, type=2, axis=0, norm="ortho")[:order]
    return MelCepstrum(coeffs)


def save_stats(stats: FeatureStats, path, echo: str | None = None) -> None:
    """Text format: mel_bins line, mean row, std row; '#' lines are comments."""
    lines = [str(stats.mean.shape[0])]
    lines.append(" ".join(repr(float(v)) for v in stats.mean))
    lines.append(" ".join(repr(float(v)) for v in stats.std))
    if echo:
        lines.append(f"# {echo}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_stats(path) -> FeatureStats:
    with open(path) as fh:
        rows = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    if len(rows) < 3:
        raise DataError(f"malformed stats file {path}")
    q = int(rows[0])
    mean = np.array([float(v) for v in rows[1].split()])
    std = np.array([float(v) for v in rows[2].split()])
    if mean.shape[0] != q or std.shape[0] != q:
        raise DataError(f"stats file {path} row lengths do not match mel_bins")
    return FeatureStats(mean, std)


def save_wav(w: Waveform, path) -> None:
    """Write 16-bit PCM mono."""
    pcm = (np.clip(w.samples, -1.0, 1.0) * 32767.0).astype("<i2")
    import wave

    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())


def _mel_pinv(mel_bins: int, window: int, sample_rate: int) -> np.ndarray:
    return np.linalg.pinv(mel_filterbank(mel_bins, window, sample_rate))


def griffin_lim(m: MelSpectrogram, iters: int = 32) -> Waveform:
    """Phase-recovery inversion for listening checks; never used in metrics.

    iters=0 is the deterministic zero-phase inversion.
    """
    mag = np.maximum(_mel_pinv(m.mel_bins, m.window, m.sample_rate) @ np.exp(m.data), 0.0)
    length = (m.data.shape[1] - 1) * m.hop
    x = istft(mag.astype(complex), m.window, m.hop, length=max(length, 1))
    for _ in range(iters):
        spec = stft(Waveform(x, m.sample_rate), m.window, m.hop)
        denom = np.maximum(np.abs(spec), 1e-12)
        x = istft(mag * spec / denom, m.window, m.hop, length=max(length, 1))
    peak = np.max(np.abs(x))
    if peak > 1.0:
        x = x / peak
    return Waveform(x, m.sample_rate)
