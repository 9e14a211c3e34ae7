"""Multi-trigger DPSK encoder, BBP scheduler and transmitted phase trajectory.

Bits are Gray-mapped to a phase increment of ``1..M`` effective LSBs
(``M`` the constellation size). The all-zeros group maps to a full turn
(``M`` LSBs, e.g. 16 BBPs in 16DPSK) so that every symbol emits at least one
BBP. Label ``g`` maps to the increment ``i`` with ``gray(i) == g``::

    16DPSK  bits 0000 -> 16, 0001 -> 1, 0011 -> 2, 0010 -> 3, ... 1000 -> 15
    8DPSK   bits 000 -> 8, 001 -> 1, 011 -> 2, 010 -> 3, 110 -> 4, 111 -> 5, 101 -> 6, 100 -> 7
    QDPSK   bits 00 -> 4, 01 -> 1, 11 -> 2, 10 -> 3
    DBPSK   bit 0 -> 2, bit 1 -> 1

A frame starts with a reference symbol made of a single BBP. BBPs of a
symbol occupy consecutive ``bbp_rate`` slots from the start of the symbol
period; the rest of the period lets the phase settle.

Phase convention: ``phi`` is the accumulated delay of the output edges
expressed in carrier radians, so each trigger *adds* one LSB. Downstream the
complex baseband is ``exp(+j phi)``; counting the lag as positive phase
mirrors the spectrum about the carrier and changes nothing else.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .control import BbpPulseTrain, ControlUnit, MissedPulseWarning, run_closed_loop
from .core import (
    ConfigError,
    ControlConfig,
    ModelError,
    ModemTiming,
    ModulationMode,
    OscConfig,
    SimConfig,
    get_mode,
    validate_config,
)
from .oscillator import (
    IsfProfile,
    RingSimulator,
    calibrate_isf,
    free_running_period,
    phase_shift_per_trigger,
)


def gray(i: int) -> int:
    return i ^ (i >> 1)


def gray_inverse(g: int) -> int:
    i = 0
    while g:
        i ^= g
        g >>= 1
    return i


def label_to_increment(label: int, mode: ModulationMode) -> int:
    return gray_inverse(label) or mode.constellation_size


def increment_to_label(increment: int, mode: ModulationMode) -> int:
    return gray(increment % mode.constellation_size)


@dataclass(frozen=True)
class DpskFrame:
    mode: ModulationMode
    payload_bits: tuple[int, ...]
    symbols: tuple[int, ...]
    includes_reference: bool = True

    @property
    def bbp_counts(self) -> list[int]:
        """BBPs per transmitted element, reference first."""
        counts = [c * self.mode.bbps_per_lsb for c in self.symbols]
        return ([1] if self.includes_reference else []) + counts

    @property
    def n_transmitted(self) -> int:
        return len(self.symbols) + int(self.includes_reference)


def encode_dpsk(bits, mode: ModulationMode | str, includes_reference: bool = True) -> DpskFrame:
    mode = get_mode(mode)
    bits = tuple(int(b) for b in bits)
    if any(b not in (0, 1) for b in bits):
        raise ConfigError("bits must be 0 or 1")
    k = mode.bits_per_symbol
    if len(bits) % k:
        raise ConfigError(f"{len(bits)} bits is not a multiple of {k} bits/symbol for {mode.name}")
    symbols = []
    for i in range(0, len(bits), k):
        label = 0
        for b in bits[i:i + k]:
            label = (label << 1) | b
        symbols.append(label_to_increment(label, mode))
    return DpskFrame(mode, bits, tuple(symbols), includes_reference)


def frame_from_increments(increments, mode: ModulationMode | str, includes_reference: bool = True) -> DpskFrame:
    """Build a frame directly from phase increments (``1..M``)."""
    mode = get_mode(mode)
    bits = []
    for inc in increments:
        if not 1 <= inc <= mode.constellation_size:
            raise ConfigError(f"increment {inc} outside 1..{mode.constellation_size}")
        label = increment_to_label(inc, mode)
        bits.extend((label >> s) & 1 for s in reversed(range(mode.bits_per_symbol)))
    return DpskFrame(mode, tuple(bits), tuple(int(i) for i in increments), includes_reference)


def random_frame(n_symbols: int, mode: ModulationMode | str, rng: np.random.Generator) -> DpskFrame:
    mode = get_mode(mode)
    bits = rng.integers(0, 2, n_symbols * mode.bits_per_symbol)
    return encode_dpsk(bits.tolist(), mode)


@dataclass(frozen=True)
class BbpSchedule:
    pulses: BbpPulseTrain
    symbol_boundaries: tuple[float, ...]


def schedule_bbps(frame: DpskFrame, timing: ModemTiming, osc_period: float,
                  t_start: float = 0.0) -> BbpSchedule:
    """Front-pack each symbol's BBPs on consecutive ``bbp_rate`` slots."""
    slots = timing.slots_per_symbol
    slot = 1.0 / timing.bbp_rate
    width = timing.bbp_high_periods * osc_period
    if width >= slot:
        raise ConfigError("BBP high time does not fit in one BBP slot")
    Ts = timing.symbol_period
    pulses = []
    for i, count in enumerate(frame.bbp_counts):
        if count > slots:
            raise ConfigError(f"symbol {i} needs {count} BBPs but only {slots} slots fit in a symbol")
        t0 = t_start + i * Ts
        pulses.extend((t0 + k * slot, t0 + k * slot + width) for k in range(count))
    bounds = tuple(t_start + i * Ts for i in range(frame.n_transmitted + 1))
    return BbpSchedule(BbpPulseTrain(tuple(pulses)), bounds)


@dataclass
class PhaseTrajectory:
    """Output phase ``phi(t)`` (radians, unwrapped), linear between points."""

    t: np.ndarray
    phi: np.ndarray
    symbol_boundaries: np.ndarray
    carrier_frequency: float
    mode: ModulationMode
    windows: list = field(default_factory=list)
    model: str = "phase_domain"
    #: rising crossings of the modulated node (circuit model only)
    node_edges: np.ndarray | None = None

    def at(self, t) -> np.ndarray:
        return np.interp(t, self.t, self.phi)

    @property
    def symbol_end_phases(self) -> np.ndarray:
        """Settled phase at the end of each transmitted symbol, relative to the start.

        Sampled two carrier periods before the boundary: the next symbol's
        first trigger fires right at the boundary.
        """
        return self.at(self.symbol_boundaries[1:] - 2.0 / self.carrier_frequency) - self.phi[0]


@lru_cache(maxsize=32)
def _isf_for(osc: OscConfig, control: ControlConfig) -> IsfProfile:
    return calibrate_isf(osc, control)


def _lead_time(osc: OscConfig) -> float:
    # let the ring settle onto its orbit before the first symbol
    return 8 * free_running_period(osc)


def modulate(frame: DpskFrame, cfg: SimConfig, model: str = "phase_domain") -> PhaseTrajectory:
    """Run encode -> BBP schedule -> control unit -> oscillator; return ``phi(t)``.

    ``model="circuit"`` co-simulates the PWL ring with the control unit;
    ``model="phase_domain"`` accumulates the ISF-model shift of each trigger
    at the window instants.
    """
    validate_config(cfg)
    osc = cfg.osc
    T0 = free_running_period(osc)
    t_start = _lead_time(osc)
    sched = schedule_bbps(frame, cfg.modem, T0, t_start)
    t_end = sched.symbol_boundaries[-1]
    if model == "circuit":
        return _modulate_circuit(frame, cfg, sched, t_end)
    if model in ("phase_domain", "phase"):
        return _modulate_phase(frame, cfg, sched, t_end)
    raise ConfigError(f"unknown model {model!r}; expected 'circuit' or 'phase_domain'")


def _modulate_circuit(frame, cfg, sched, t_end) -> PhaseTrajectory:
    osc = cfg.osc
    T0 = free_running_period(osc)
    with warnings.catch_warnings():
        warnings.simplefilter("error", MissedPulseWarning)
        try:
            sim, windows = run_closed_loop(osc, cfg.control, sched.pulses, t_end + 2 * T0,
                                           log_nodes=(osc.out_node, osc.modulated_node))
        except MissedPulseWarning as exc:
            raise ModelError(str(exc)) from None
    edges = np.asarray(sim.rising[osc.out_node])
    t_start = sched.symbol_boundaries[0]
    before = edges[edges < t_start - 0.5 * T0]
    if len(before) < 2:
        raise ModelError("not enough lead-in edges to reference the phase")  # pragma: no cover
    e0 = before[-1]
    edges = edges[edges >= e0]
    k = np.arange(len(edges))
    phi = 2 * math.pi * ((edges - e0) - k * T0) / T0
    gaps = np.diff(edges) / T0
    if len(gaps) and (gaps.min() <= 0.5 or gaps.max() >= 2.0):
        raise ModelError("output edges lost lock with the nominal period")
    # collapse runs of constant phase; interpolation between kept points is unchanged
    keep = np.ones(len(phi), dtype=bool)
    if len(phi) > 2:
        same = np.abs(np.diff(phi)) < 1e-7
        keep[1:-1] = ~(same[:-1] & same[1:])
    t, phi = edges[keep], phi[keep]
    if t[-1] < t_end:
        t = np.append(t, t_end)
        phi = np.append(phi, phi[-1])
    # e0 precedes t_start, so the trajectory covers the whole frame
    return PhaseTrajectory(t, phi, np.asarray(sched.symbol_boundaries), 1.0 / T0, frame.mode,
                           windows, "circuit", np.asarray(sim.rising[osc.modulated_node]))


def phase_domain_windows(osc: OscConfig, ctl: ControlConfig, pulses: BbpPulseTrain, step: float):
    """Window instants of the phase-domain model.

    Clock edges of the free-running ring are shifted by the accumulated delay
    (``step`` radians per trigger) and fed to the same control-unit state
    machine as the circuit model.
    """
    T0 = free_running_period(osc)
    sim = RingSimulator(osc, skip=False)
    sim.run(4 * T0)
    clocks = (sim.rising if ctl.clock_edge == "rising" else sim.falling)[osc.clock_node]
    c0 = clocks[-1]
    cu = ControlUnit(ctl, pulses)
    delay = 0.0
    dt_step = step / (2 * math.pi) * T0
    for p in pulses.edges:
        # first delayed clock edge at or after the BBP rise
        j = math.ceil((p.t_rise - ctl.d1 - c0 - delay) / T0 - 1e-12)
        t_clock = c0 + delay + j * T0
        while True:
            w = cu.on_clock(t_clock)
            if w is not None or t_clock + ctl.d1 >= p.t_fall:
                break
            t_clock += T0
        if w is not None:
            delay += dt_step
    missed = cu.missed()
    if missed:
        raise ModelError(f"BBP pulses {missed} captured no clock edge")
    return cu.windows


def _modulate_phase(frame, cfg, sched, t_end) -> PhaseTrajectory:
    osc, ctl = cfg.osc, cfg.control
    T0 = free_running_period(osc)
    isf = _isf_for(osc, ctl)
    step = phase_shift_per_trigger(osc, isf, isf.peak_phase)
    windows = phase_domain_windows(osc, ctl, sched.pulses, step)
    t_start = sched.symbol_boundaries[0]
    ts = [t_start]
    ph = [0.0]
    acc = 0.0
    for w in windows:
        ts += [w.t_open, w.t_open + T0]
        ph += [acc, acc + step]
        acc += step
    ts.append(max(t_end, ts[-1]))
    ph.append(acc)
    return PhaseTrajectory(np.asarray(ts), np.asarray(ph), np.asarray(sched.symbol_boundaries),
                           1.0 / T0, frame.mode, windows, "phase_domain")


def write_frame_csv(path, frame: DpskFrame, traj: PhaseTrajectory) -> None:
    ends = np.degrees(traj.symbol_end_phases)
    incs = ([None] if frame.includes_reference else []) + list(frame.symbols)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["symbol_index", "increment_lsb", "bbp_count", "phase_deg_end"])
        for i, (inc, n, ph) in enumerate(zip(incs, frame.bbp_counts, ends)):
            w.writerow([i, "ref" if inc is None else inc, n, f"{ph:.6f}"])
