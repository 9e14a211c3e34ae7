"""EVM, error rates, power spectrum and the ``run_summary`` file.

EVM references
    ``"nearest"`` (default) takes the closest ideal point ``exp(j k LSB)``;
    ``"transmitted"`` uses the true increments and needs ``tx_increments``.

EVM normalisation
    ``"average"`` (default) divides by the RMS reference magnitude,
    ``"peak"`` by the largest one. Both are 1 for a PSK grid, so they agree.
    ``"measured"`` first rescales the points to unit RMS magnitude, which makes
    the result independent of receiver gain.

Spectrum
    Averaged periodogram (:func:`scipy.signal.welch`): Hann window, ``nfft``
    samples per segment, exactly ``segments`` segments spread evenly over the
    waveform (overlap follows), no detrending, two-sided density. Levels are
    in dB relative to the strongest bin, taken as the carrier.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from .core import ConfigError, ModulationMode, get_mode
from .frontend import Waveform
from .modulator import DpskFrame, increment_to_label

SPECTRUM_WINDOW = "hann"


@dataclass(frozen=True)
class EvmReport:
    evm_rms_percent: float
    error_vectors: np.ndarray
    reference_points: np.ndarray
    reference: str = "nearest"
    normalization: str = "average"


def ideal_points(mode: ModulationMode | str) -> np.ndarray:
    """Unit-circle grid ``exp(j k LSB)`` for ``k = 1..M``."""
    mode = get_mode(mode)
    k = np.arange(1, mode.constellation_size + 1)
    return np.exp(1j * k * mode.lsb_radians)


def compute_evm(points, mode: ModulationMode | str, reference: str = "nearest",
                normalization: str = "average", tx_increments=None) -> EvmReport:
    """RMS EVM in percent of differential constellation points."""
    mode = get_mode(mode)
    p = np.asarray(points, dtype=complex).ravel()
    if len(p) == 0:
        raise ConfigError("compute_evm needs at least one point")
    if len(p) < 2:
        raise ConfigError("compute_evm needs at least 2 points")
    if normalization == "measured":
        p = p / math.sqrt(float(np.mean(np.abs(p) ** 2)))
    elif normalization not in ("average", "peak"):
        raise ConfigError(f"unknown EVM normalization {normalization!r}")
    if reference == "nearest":
        grid = ideal_points(mode)
        ref = grid[np.argmin(np.abs(p[:, None] - grid[None, :]), axis=1)]
    elif reference == "transmitted":
        if tx_increments is None or len(tx_increments) != len(p):
            raise ConfigError("transmitted-reference EVM needs one increment per point")
        ref = np.exp(1j * np.asarray(tx_increments) * mode.lsb_radians)
    else:
        raise ConfigError(f"unknown EVM reference {reference!r}")
    err = p - ref
    if normalization == "peak":
        scale = float(np.max(np.abs(ref)))
    else:
        scale = math.sqrt(float(np.mean(np.abs(ref) ** 2)))
    evm = 100.0 * math.sqrt(float(np.mean(np.abs(err) ** 2))) / scale
    return EvmReport(evm, err, ref, reference, normalization)


def error_rates(decided, tx: DpskFrame) -> dict[str, float]:
    """Symbol and bit error rates; bits via the Gray labels of the increments.

    ``decided`` is a :class:`~ringdpsk.receiver.DemodResult` or a list of
    increments.
    """
    dec = list(getattr(decided, "decided_increments", decided))
    txs = list(tx.symbols)
    if len(dec) != len(txs):
        raise ConfigError(f"length mismatch: {len(dec)} decisions vs {len(txs)} transmitted symbols")
    if not txs:
        raise ConfigError("no symbols to compare")
    mode = tx.mode
    sym = sum(d != t for d, t in zip(dec, txs))
    bits = sum(bin(increment_to_label(d, mode) ^ increment_to_label(t, mode)).count("1")
               for d, t in zip(dec, txs))
    return {"ser": sym / len(txs), "ber": bits / (len(txs) * mode.bits_per_symbol)}


@dataclass
class SpectrumReport:
    """Two-sided PSD around the carrier; ``freq_bins`` are offsets in Hz."""

    freq_bins: np.ndarray
    psd_db: np.ndarray
    carrier_bin: int
    psd: np.ndarray
    carrier_frequency: float = 0.0
    suppression: dict[float, float] = field(default_factory=dict)

    @property
    def resolution(self) -> float:
        return float(self.freq_bins[1] - self.freq_bins[0])

    def level_at(self, offset: float, halfwidth: float | None = None) -> float:
        """Strongest level (dBc) within ``offset +/- halfwidth`` of the carrier."""
        if halfwidth is None:
            halfwidth = self.resolution
        f0 = self.freq_bins[self.carrier_bin]
        sel = np.abs(self.freq_bins - f0 - offset) <= halfwidth
        if not np.any(sel):
            raise ConfigError(f"offset {offset:g} Hz is outside the analysed band")
        return float(self.psd_db[sel].max())

    def suppression_at(self, offset: float, halfwidth: float | None = None) -> float:
        """Level at ``offset`` in dBc, also stored in :attr:`suppression`."""
        level = self.level_at(offset, halfwidth)
        self.suppression[offset] = level
        return level

    @property
    def total_power(self) -> float:
        return float(np.sum(self.psd) * self.resolution)


def compute_spectrum(w: Waveform, nfft: int = 4096, segments: int = 8) -> SpectrumReport:
    n = len(w.samples)
    if nfft > n:
        raise ConfigError(f"nfft={nfft} is larger than the waveform ({n} samples)")
    if segments < 1:
        raise ConfigError("segments must be >= 1")
    step = (n - nfft) // (segments - 1) if segments > 1 else nfft
    noverlap = max(nfft - step, 0) if segments > 1 else 0
    if noverlap >= nfft:
        raise ConfigError(f"waveform too short for {segments} segments of {nfft} samples")
    f, p = signal.welch(w.samples, fs=w.sample_rate, window=SPECTRUM_WINDOW, nperseg=nfft,
                        noverlap=noverlap, detrend=False, return_onesided=False,
                        scaling="density")
    f, p = np.fft.fftshift(f), np.fft.fftshift(p)
    k = int(np.argmax(p))
    with np.errstate(divide="ignore"):
        db = 10 * np.log10(p / p[k])
    return SpectrumReport(f, db, k, p, w.carrier_frequency)


def format_summary(values: dict) -> str:
    """``key=value`` lines in insertion order; floats use ``repr`` for exactness."""
    lines = []
    for key, v in values.items():
        if isinstance(v, float):
            v = repr(v)
        lines.append(f"{key}={v}")
    return "\n".join(lines) + "\n"


def write_run_summary(path, values: dict) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(format_summary(values))


def read_run_summary(path) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                key, _, value = line.partition("=")
                out[key] = value
    return out


def write_evm_csv(path, report: EvmReport, points) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["symbol_index", "i", "q", "ref_i", "ref_q", "error_magnitude"])
        for i, (p, r, e) in enumerate(zip(np.asarray(points), report.reference_points, report.error_vectors)):
            out.writerow([i, repr(float(p.real)), repr(float(p.imag)), repr(float(r.real)),
                          repr(float(r.imag)), repr(float(abs(e)))])


def write_spectrum_csv(path, rep: SpectrumReport) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["offset_hz", "psd_dbc"])
        for f, d in zip(rep.freq_bins, rep.psd_db):
            out.writerow([repr(float(f)), repr(float(d))])
