"""Reference DPSK receiver: carrier-offset estimation, differential detection, slicer.

Each symbol is measured on its settle window, the fraction
``[settle_start, settle_stop)`` of the symbol period after the trigger burst
where the phase is flat. The carrier offset is the pooled least-squares slope
of the unwrapped phase inside those windows, each window getting its own
intercept, so symbol-to-symbol phase steps never enter the fit. This gives a
pull-in range limited by the sample rate; the estimate is nevertheless
rejected beyond ``symbol_rate / 4``, the documented range of the estimator.

Slicer tie-break: a phase exactly midway between two grid points decides the
smaller increment in ``1..M`` (so 11.25 deg in 16DPSK decides 1, not 16).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .core import (
    ModelError,
    ModemTiming,
    ModulationMode,
    PhaseAngle,
    ReceiverConfig,
    get_mode,
)
from .frontend import Waveform
from .modulator import DpskFrame


class ReceiverError(ModelError):
    """The receiver cannot produce a trustworthy estimate."""


@dataclass(frozen=True)
class CdrEstimate:
    freq_offset: float
    phase_origin: PhaseAngle
    symbol_epoch: float


@dataclass
class DemodResult:
    soft_diff_phases: list[PhaseAngle]
    decided_increments: list[int]
    points: np.ndarray
    reference: DpskFrame | None = None
    symbol_phases: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __len__(self) -> int:
        return len(self.decided_increments)

    @property
    def symbol_errors(self) -> list[int] | None:
        """Indices where the decision differs from the reference frame."""
        if self.reference is None:
            return None
        return [i for i, (d, t) in enumerate(zip(self.decided_increments, self.reference.symbols))
                if d != t]


def decide(diff_phase: PhaseAngle | float, mode: ModulationMode | str) -> int:
    """Nearest increment ``k`` in ``1..M`` to ``diff_phase`` on the LSB grid.

    Floats are radians. Exact midpoints go to the smaller ``k``.
    """
    mode = get_mode(mode)
    if not isinstance(diff_phase, PhaseAngle):
        diff_phase = PhaseAngle.from_radians(float(diff_phase))
    m = mode.constellation_size
    u = diff_phase.degrees / mode.lsb_degrees  # exact, in [0, M)
    lo = math.floor(u)
    frac = u - lo
    if frac == Fraction(1, 2):
        return 1 if lo == 0 else lo
    k = lo + 1 if frac > Fraction(1, 2) else lo
    return k if 1 <= k < m else m


def n_symbols_in(w: Waveform, timing: ModemTiming, epoch: float) -> int:
    return int(math.floor((w.t0 + w.duration - epoch) * timing.symbol_rate + 1e-9))


def settle_slices(w: Waveform, timing: ModemTiming, rx: ReceiverConfig, epoch: float) -> list[slice]:
    """Sample index ranges of every settle window."""
    Ts = timing.symbol_period
    n = n_symbols_in(w, timing, epoch)
    out = []
    for i in range(n):
        a = math.ceil((epoch + (i + rx.settle_start) * Ts - w.t0) * w.sample_rate - 1e-9)
        b = math.ceil((epoch + (i + rx.settle_stop) * Ts - w.t0) * w.sample_rate - 1e-9)
        a, b = max(a, 0), min(b, len(w.samples))
        if b - a < 2:
            raise ReceiverError(f"settle window of symbol {i} holds {max(b - a, 0)} samples; "
                                "check sample_rate and receiver.settle_start/stop")
        out.append(slice(a, b))
    return out


def estimate_symbol_epoch(w: Waveform, timing: ModemTiming) -> float:
    """Symbol start from the phase slew of the trigger bursts.

    Every symbol fires its first trigger at its start and later slots fire
    less often, so the per-sample phase activity folded modulo the symbol
    period steps up at the symbol start. The largest circular rise marks it.
    """
    d = np.abs(np.angle(w.samples[1:] * np.conj(w.samples[:-1])))
    d = d - np.median(d)
    sps = w.sample_rate / timing.symbol_rate
    nbins = max(int(round(sps)), 1)
    pos = np.mod(np.arange(len(d)) / sps, 1.0)
    bins = np.minimum((pos * nbins).astype(int), nbins - 1)
    activity = np.bincount(bins, weights=d, minlength=nbins)
    b = int(np.argmax(activity - np.roll(activity, 1)))
    return w.t0 + b / nbins * timing.symbol_period


def estimate_carrier(w: Waveform, timing: ModemTiming, rx: ReceiverConfig | None = None,
                     epoch: float | None = None, estimate_epoch: bool = False) -> CdrEstimate:
    """Carrier offset (Hz) and phase origin from the settle windows.

    The symbol epoch comes from ``epoch`` (default: the waveform start) unless
    ``estimate_epoch`` asks for :func:`estimate_symbol_epoch`.
    """
    rx = rx or ReceiverConfig()
    if estimate_epoch:
        epoch = estimate_symbol_epoch(w, timing)
    elif epoch is None:
        epoch = w.t0
    slices = settle_slices(w, timing, rx, epoch)
    if len(slices) < 8:
        raise ReceiverError(f"carrier estimation needs >= 8 symbols, got {len(slices)}")
    num = den = 0.0
    for sl in slices:
        ph = np.unwrap(np.angle(w.samples[sl]))
        if np.any(np.abs(np.diff(ph)) > 0.9 * math.pi):
            raise ReceiverError("phase unwrap failed inside a settle window; SNR too low "
                                "or offset out of range")
        tau = np.arange(len(ph), dtype=float)
        tau -= tau.mean()
        num += float(np.dot(tau, ph - ph.mean()))
        den += float(np.dot(tau, tau))
    f = num / den * w.sample_rate / (2 * math.pi)
    if abs(f) >= timing.symbol_rate / 4:
        raise ReceiverError(f"carrier offset {f:g} Hz is beyond the pull-in range "
                            f"+/-{timing.symbol_rate / 4:g} Hz")
    z0 = _derotate(w, f, slices[0]).mean()
    return CdrEstimate(f, PhaseAngle.from_radians(float(np.angle(z0))), float(epoch))


def _derotate(w: Waveform, f: float, sl: slice) -> np.ndarray:
    k = np.arange(sl.start, sl.stop)
    return w.samples[sl] * np.exp(-2j * math.pi * f * k / w.sample_rate)


def demodulate_dpsk(w: Waveform, mode: ModulationMode | str, cdr: CdrEstimate, timing: ModemTiming,
                    rx: ReceiverConfig | None = None, reference: DpskFrame | None = None) -> DemodResult:
    """Differential detection on settle-window circular means.

    ``points`` are the differential constellation points
    ``z[i+1] conj(z[i]) / |z[i]|``, unit magnitude for a clean signal.
    """
    mode = get_mode(mode)
    rx = rx or ReceiverConfig()
    slices = settle_slices(w, timing, rx, cdr.symbol_epoch)
    if len(slices) < 2:
        raise ReceiverError("need a reference symbol and at least one data symbol")
    z = np.array([_derotate(w, cdr.freq_offset, sl).mean() for sl in slices])
    mag = np.abs(z)
    if np.any(mag == 0):
        raise ReceiverError("settle window averages to zero")
    points = z[1:] * np.conj(z[:-1]) / mag[:-1]
    soft = [PhaseAngle.from_radians(float(a)) for a in np.angle(points)]
    decided = [decide(p, mode) for p in soft]
    if reference is not None and len(reference.symbols) != len(decided):
        raise ReceiverError(f"reference frame has {len(reference.symbols)} symbols, "
                            f"demodulated {len(decided)}")
    return DemodResult(soft, decided, points, reference, np.angle(z))


def write_demod_csv(path, result: DemodResult) -> None:
    tx = result.reference.symbols if result.reference is not None else [None] * len(result)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["symbol_index", "soft_phase_deg", "decided_increment", "tx_increment", "error_flag"])
        for i, (p, d, t) in enumerate(zip(result.soft_diff_phases, result.decided_increments, tx)):
            flag = "" if t is None else int(d != t)
            out.writerow([i, f"{float(p.degrees):.6f}", d, "" if t is None else t, flag])
