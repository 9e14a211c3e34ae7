"""Waveform synthesis and channel impairments.

Signals are complex baseband sequences referenced to the nominal carrier.
A trajectory ``phi(t)`` becomes ``s[k] = exp(j phi(t_k))``; the matching
passband signal is ``Re(s e^{j w0 t})``. The buffer chain is a unity-gain
limiter, which leaves a unit-envelope signal untouched, so it does not appear
here.

Binary dump layout (little endian)::

    offset  type        field
    0       8 bytes     magic b"RDPSKIQ1"
    8       float64     sample_rate [Hz]
    16      float64     t0 [s]
    24      float64     carrier_frequency [Hz]
    32      uint64      n_samples
    40      float64[2n] interleaved I, Q
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .core import ConfigError, ImpairmentConfig
from .modulator import PhaseTrajectory

IQ_MAGIC = b"RDPSKIQ1"
_HEADER = struct.Struct("<8sdddQ")


@dataclass(frozen=True)
class Waveform:
    sample_rate: float
    samples: np.ndarray
    t0: float = 0.0
    carrier_frequency: float = 0.0

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def t(self) -> np.ndarray:
        return self.t0 + np.arange(len(self.samples)) / self.sample_rate

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def synthesize_waveform(traj: PhaseTrajectory, sample_rate: float, t0: float | None = None,
                        duration: float | None = None) -> Waveform:
    """Sample ``exp(j phi(t))`` on ``t0 + k / sample_rate``.

    By default the waveform starts at the first symbol boundary and spans the
    whole frame.
    """
    if not sample_rate > 0:
        raise ConfigError(f"sample_rate must be > 0, got {sample_rate}")
    bounds = traj.symbol_boundaries
    if t0 is None:
        t0 = float(bounds[0])
    if duration is None:
        duration = float(bounds[-1]) - t0
    n = int(round(duration * sample_rate))
    if n <= 0:
        raise ConfigError("requested waveform duration is empty")
    t_last = t0 + (n - 1) / sample_rate
    if t0 < traj.t[0] - 1e-15 or t_last > traj.t[-1] + 1e-15:
        raise ConfigError(f"trajectory covers [{traj.t[0]:g}, {traj.t[-1]:g}] s but the waveform "
                          f"needs [{t0:g}, {t_last:g}] s")
    t = t0 + np.arange(n) / sample_rate
    return Waveform(float(sample_rate), np.exp(1j * traj.at(t)), float(t0), traj.carrier_frequency)


def wiener_phase(n: int, dt: float, diffusion: float, rng: np.random.Generator) -> np.ndarray:
    """Random-walk phase with ``var(theta[k]) = diffusion * k * dt``, starting at 0."""
    steps = rng.normal(0.0, math.sqrt(diffusion * dt), n - 1) if n > 1 else np.empty(0)
    return np.concatenate(([0.0], np.cumsum(steps)))


def drift_phase(w: Waveform, imp: ImpairmentConfig) -> np.ndarray:
    """Phase of the carrier offset, relative to the waveform start."""
    tau = np.arange(len(w.samples)) / w.sample_rate
    df = imp.freq_drift_ppm * 1e-6 * w.carrier_frequency
    ramp = imp.freq_drift_rate_ppm_per_s * 1e-6 * w.carrier_frequency
    return 2 * math.pi * (df * tau + 0.5 * ramp * tau * tau)


def apply_impairments(w: Waveform, imp: ImpairmentConfig) -> Waveform:
    """Rotate by drift and Wiener phase noise, then add complex AWGN.

    The noise level is per complex sample: ``var = mean|s|^2 / 10^(snr/10)``.
    With every impairment off the input object is returned unchanged.
    """
    if imp.phase_noise_diffusion < 0:
        raise ConfigError("impairments.phase_noise_diffusion must be >= 0")
    rotate = imp.freq_drift_ppm != 0 or imp.freq_drift_rate_ppm_per_s != 0 or imp.phase_noise_diffusion > 0
    noisy = math.isfinite(imp.awgn_snr_db)
    if not rotate and not noisy:
        return w
    rng = np.random.default_rng(imp.seed)
    s = w.samples
    n = len(s)
    if rotate:
        theta = drift_phase(w, imp)
        if imp.phase_noise_diffusion > 0:
            theta = theta + wiener_phase(n, 1.0 / w.sample_rate, imp.phase_noise_diffusion, rng)
        s = s * np.exp(1j * theta)
    if noisy:
        var = float(np.mean(np.abs(s) ** 2)) / 10 ** (imp.awgn_snr_db / 10)
        noise = rng.standard_normal((n, 2)) @ np.array([1.0, 1j])
        s = s + math.sqrt(var / 2) * noise
    return replace(w, samples=s)


def to_passband(w: Waveform) -> np.ndarray:
    """Real carrier ``Re(s e^{j w0 t})``; needs at least 8 samples per carrier period."""
    if w.sample_rate < 8 * w.carrier_frequency:
        raise ConfigError(f"passband dump needs sample_rate >= 8 x carrier "
                          f"({8 * w.carrier_frequency:g} Hz), got {w.sample_rate:g}")
    # carrier phase taken modulo one period to keep the argument small
    k = np.arange(len(w.samples))
    frac = np.mod(w.carrier_frequency * (w.t0 + k / w.sample_rate), 1.0)
    return np.real(w.samples * np.exp(2j * math.pi * frac))


def write_waveform_csv(path, w: Waveform) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["t_seconds", "i", "q"])
        for t, s in zip(w.t, w.samples):
            out.writerow([repr(float(t)), repr(float(s.real)), repr(float(s.imag))])


def write_waveform_binary(path, w: Waveform) -> None:
    iq = np.empty(2 * len(w.samples), dtype="<f8")
    iq[0::2] = w.samples.real
    iq[1::2] = w.samples.imag
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(IQ_MAGIC, w.sample_rate, w.t0, w.carrier_frequency, len(w.samples)))
        fh.write(iq.tobytes())


def read_waveform_binary(path) -> Waveform:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        magic, fs, t0, fc, n = _HEADER.unpack(head)
        if magic != IQ_MAGIC:
            raise ConfigError(f"{path}: not an I/Q dump (bad magic {magic!r})")
        iq = np.frombuffer(fh.read(16 * n), dtype="<f8")
    if len(iq) != 2 * n:
        raise ConfigError(f"{path}: truncated I/Q dump")
    return Waveform(fs, iq[0::2] + 1j * iq[1::2], t0, fc)
