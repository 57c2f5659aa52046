"""Objective evaluation: DTW alignment of mel-cepstra, mel-cepstral
distortion (global structure, dB), and modulation-spectra distance
(local temporal structure, dB).

Alignment and both metrics ignore the 0th (energy) coefficient so loudness
offsets affect neither the path nor the scores. Everything here is pure
numpy and bit-for-bit reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .audio import DataError, MelCepstrum

MCD_CONST = 10.0 / np.log(10.0)  # dB scaling of the log-spectral distance
MSD_WINDOW = 32
MSD_HOP = 16
MSD_DB_FLOOR = -120.0


@dataclass
class AlignedPair:
    path: list  # [(i, j)] monotone, continuous, (0,0) .. (n-1, m-1)
    ref_len: int
    conv_len: int

    def __post_init__(self):
        if not self.path:
            raise DataError("empty alignment path")
        if self.path[0] != (0, 0) or self.path[-1] != (self.ref_len - 1, self.conv_len - 1):
            raise DataError("alignment path must span both sequences")


def _frame_costs(ref: MelCepstrum, conv: MelCepstrum) -> np.ndarray:
    """Euclidean distance over coefficients 1.. between all frame pairs."""
    a = ref.coeffs[1:].T  # (n, d-1)
    b = conv.coeffs[1:].T
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return np.sqrt(np.maximum(d2, 0.0))


def dtw_align(ref: MelCepstrum, conv: MelCepstrum) -> AlignedPair:
    """Globally cost-minimal monotone alignment via full dynamic programming.

    Tie-break during backtracking prefers the diagonal, then an i-step,
    then a j-step, making paths deterministic.
    """
    if ref.frames == 0 or conv.frames == 0:
        raise DataError("cannot align empty cepstra")
    cost = _frame_costs(ref, conv)
    n, m = cost.shape
    acc = np.full((n, m), np.inf)
    acc[0, 0] = cost[0, 0]
    for j in range(1, m):
        acc[0, j] = acc[0, j - 1] + cost[0, j]
    for i in range(1, n):
        acc[i, 0] = acc[i - 1, 0] + cost[i, 0]
        row = acc[i]
        prev = acc[i - 1]
        ci = cost[i]
        for j in range(1, m):
            row[j] = ci[j] + min(prev[j - 1], prev[j], row[j - 1])
    path = [(n - 1, m - 1)]
    i, j = n - 1, m - 1
    while (i, j) != (0, 0):
        if i == 0:
            j -= 1
        elif j == 0:
            i -= 1
        else:
            diag, up, left = acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1]
            best = min(diag, up, left)
            if diag == best:
                i, j = i - 1, j - 1
            elif up == best:
                i -= 1
            else:
                j -= 1
        path.append((i, j))
    path.reverse()
    return AlignedPair(path, n, m)


def path_cost(ref: MelCepstrum, conv: MelCepstrum, pair: AlignedPair) -> float:
    cost = _frame_costs(ref, conv)
    return float(sum(cost[i, j] for i, j in pair.path))


def mcd(ref: MelCepstrum, conv: MelCepstrum, pair: AlignedPair) -> float:
    """Mel-cepstral distortion in dB, averaged along the alignment path."""
    if ref.order != conv.order:
        raise DataError("cepstrum orders differ")
    total = 0.0
    for i, j in pair.path:
        diff = ref.coeffs[1:, i] - conv.coeffs[1:, j]
        total += MCD_CONST * np.sqrt(2.0 * float(np.dot(diff, diff)))
    return total / len(pair.path)


def _trajectory_db(traj: np.ndarray) -> np.ndarray:
    """Windowed DFT magnitudes of one coefficient trajectory, in dB.

    Returns (n_windows, bins) with a Hann window of length 32, hop 16,
    floored at -120 dB.
    """
    n = len(traj)
    win = np.hanning(MSD_WINDOW)
    n_windows = (n - MSD_WINDOW) // MSD_HOP + 1
    out = np.empty((n_windows, MSD_WINDOW // 2 + 1))
    for w in range(n_windows):
        seg = traj[w * MSD_HOP : w * MSD_HOP + MSD_WINDOW] * win
        mag = np.abs(np.fft.rfft(seg))
        out[w] = np.maximum(20.0 * np.log10(np.maximum(mag, 1e-300)), MSD_DB_FLOOR)
    return out


def msd(ref: MelCepstrum, conv: MelCepstrum, pair: AlignedPair) -> float:
    """Modulation-spectra distance in dB over the aligned trajectories.

    Per coefficient (0th excluded): RMS difference of windowed DFT log
    magnitudes over frequency bins, averaged over windows and coefficients.
    """
    if ref.order != conv.order:
        raise DataError("cepstrum orders differ")
    length = len(pair.path)
    if length < MSD_WINDOW:
        raise DataError(f"aligned length {length} is shorter than the {MSD_WINDOW}-frame window")
    idx_i = [i for i, _ in pair.path]
    idx_j = [j for _, j in pair.path]
    total = 0.0
    count = 0
    for d in range(1, ref.order):
        db_ref = _trajectory_db(ref.coeffs[d, idx_i])
        db_conv = _trajectory_db(conv.coeffs[d, idx_j])
        rms = np.sqrt(((db_ref - db_conv) ** 2).mean(axis=1))
        total += float(rms.sum())
        count += rms.shape[0]
    return total / count


@dataclass
class EvalReport:
    utterances: list = field(default_factory=list)  # (utterance id, mcd, msd)
    config_echo: str = ""

    @property
    def mean_mcd(self) -> float:
        return float(np.mean([m for _, m, _ in self.utterances]))

    @property
    def mean_msd(self) -> float:
        return float(np.mean([s for _, _, s in self.utterances]))

    def to_csv(self) -> str:
        lines = []
        if self.config_echo:
            lines.append(f"# {self.config_echo}")
        lines.append("utterance,mcd_db,msd_db")
        for name, m, s in self.utterances:
            lines.append(f"{name},{repr(float(m))},{repr(float(s))}")
        lines.append(f"mean,{repr(self.mean_mcd)},{repr(self.mean_msd)}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        lines = ["per-utterance MCD [dB] / MSD [dB]:"]
        for name, m, s in self.utterances:
            lines.append(f"  {name}: {m:.4f} / {s:.4f}")
        lines.append(f"corpus mean: {self.mean_mcd:.4f} / {self.mean_msd:.4f}")
        return "\n".join(lines) + "\n"


def evaluate_cepstra(pairs: list) -> EvalReport:
    """pairs: list of (utterance id, converted MelCepstrum, target MelCepstrum)."""
    if not pairs:
        raise DataError("no utterance pairs to evaluate")
    report = EvalReport()
    for name, conv_mc, ref_mc in pairs:
        aligned = dtw_align(ref_mc, conv_mc)
        report.utterances.append((name, mcd(ref_mc, conv_mc, aligned), msd(ref_mc, conv_mc, aligned)))
    return report
