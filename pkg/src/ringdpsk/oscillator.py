"""Ring-oscillator models: event-driven PWL circuit model and phase-domain ISF model.

Circuit model
-------------
Each inverter is a constant-current source: the node it drives ramps at
``+/- i_ch / C`` toward the rail selected by the previous node's side of
``v_threshold``, and once it arrives it is tied to that rail (the saturated
device acts as a short). ``C`` is ``c_p`` normally and ``c_p + c_dis`` for the
modulated node while its trigger window is open.

Opening a window on a ramping node shares its charge with the (reset, empty)
discharge capacitor, ``V' = V * c_p / (c_p + c_dis)``. A node tied to a rail
keeps its voltage: the rail charges ``c_dis`` directly. All events are solved
exactly (linear segments), there is no time step.

With full swing the free-running period is ``n_stages * c_p * v_dd / i_ch``
for any threshold, since every stage delay pairs one rising and one falling
partial ramp that together span the rails.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Protocol

import numpy as np
from scipy.optimize import brentq

from .core import ConfigError, ModelError, OscConfig, validate_osc

INF = math.inf


class CalibrationError(ModelError):
    pass


def free_running_period(cfg: OscConfig) -> float:
    return cfg.n_stages * cfg.c_p * cfg.v_dd / cfg.i_ch


def stage_delays(cfg: OscConfig) -> tuple[float, float]:
    """``(t_up, t_down)``: rail-to-threshold times of a rising / falling ramp."""
    return cfg.c_p * cfg.v_th / cfg.i_ch, cfg.c_p * (cfg.v_dd - cfg.v_th) / cfg.i_ch


class EdgeListener(Protocol):
    def on_edge(self, sim: RingSimulator, node: int, t: float, rising: bool) -> None: ...

    def quiet_until(self, t: float) -> float: ...


class RingSimulator:
    """Event-exact PWL simulation of an N-stage ring with one switched ``c_dis``.

    Threshold crossings of every node are logged in ``rising[node]`` and
    ``falling[node]``. With ``skip=True`` the simulator detects the periodic
    steady state (identical state at two consecutive output rising edges) and
    jumps whole periods up to the next pending window or barrier, replicating
    the edge times analytically.
    """

    def __init__(self, cfg: OscConfig, record: bool = False, skip: bool = True,
                 listener: EdgeListener | None = None, log_nodes=None):
        self.cfg = validate_osc(cfg)
        n = cfg.n_stages
        self.n = n
        self.m = cfg.modulated_node
        self.out = cfg.out_node
        self.vth = cfg.v_th
        self.vdd = cfg.v_dd
        self.rate = cfg.i_ch / cfg.c_p
        self.rate_conn = cfg.i_ch / (cfg.c_p + cfg.c_dis)
        self.share = cfg.c_p / (cfg.c_p + cfg.c_dis)
        self.period = free_running_period(cfg)

        # Start on the all-rails state with node 0 leaving ground; the orbit is
        # reached after the first trip around the ring.
        self.v = [0.0 if j % 2 == 0 else cfg.v_dd for j in range(n)]
        self.tied = [j != 0 for j in range(n)]
        self.above = [j % 2 == 1 for j in range(n)]
        self.dir = [0] * n
        for j in range(n):
            self.dir[j] = -1 if self.above[(j - 1) % n] else 1
        self.t = 0.0
        self.connected = False
        self.cdis_charge = 0.0
        self.v_min = [min(x, self.vdd) for x in self.v]
        self.v_max = list(self.v)

        self.rising: list[list[float]] = [[] for _ in range(n)]
        self.falling: list[list[float]] = [[] for _ in range(n)]
        self.record = record
        self.trace_t: list[float] = [0.0] if record else []
        self.trace_v: list[list[float]] = [list(self.v)] if record else []

        self.skip = skip and not record
        # nodes whose full edge history is kept; others keep a short tail
        self.log_nodes = set(range(n)) if log_nodes is None else set(log_nodes)
        self.listener = listener
        self.barriers: list[float] = []
        self._windows: list[tuple[float, float]] = []
        self._win_idx = 0
        self._win_events = 0
        self._snap = None

    # ---- scheduling -------------------------------------------------
    def add_window(self, t_open: float, t_close: float) -> None:
        if t_open < self.t:
            raise ModelError(f"window at {t_open:g} s opens before current time {self.t:g} s")
        if t_close <= t_open:
            raise ModelError("window closes before it opens")
        pending = self._windows[self._win_idx:]
        if self.connected and t_open < self._windows[self._win_idx - 1][1]:
            raise ModelError("overlapping TP windows")
        for a, b in pending:
            if t_open < b and a < t_close:
                raise ModelError("overlapping TP windows")
        pending.append((t_open, t_close))
        pending.sort()
        self._windows[self._win_idx:] = pending

    def _next_window_event(self) -> tuple[float, bool]:
        if self.connected:
            return self._windows[self._win_idx - 1][1], False
        if self._win_idx < len(self._windows):
            return self._windows[self._win_idx][0], True
        return INF, True

    # ---- dynamics ---------------------------------------------------
    def _slope(self, j: int) -> float:
        if self.tied[j]:
            return 0.0
        r = self.rate_conn if (self.connected and j == self.m) else self.rate
        return r * self.dir[j]

    def _node_event(self, j: int) -> tuple[float, int]:
        """Time until node j's next event and its kind (1 crossing, 2 rail)."""
        if self.tied[j]:
            return INF, 0
        r = self.rate_conn if (self.connected and j == self.m) else self.rate
        v = self.v[j]
        if self.dir[j] > 0:
            if not self.above[j]:
                return max(self.vth - v, 0.0) / r, 1
            return max(self.vdd - v, 0.0) / r, 2
        if self.above[j]:
            return max(v - self.vth, 0.0) / r, 1
        return max(v, 0.0) / r, 2

    def _advance(self, t_new: float) -> None:
        dt = t_new - self.t
        if dt > 0:
            for j in range(self.n):
                if not self.tied[j]:
                    # rounding must not push a ramp past its rail
                    self.v[j] = min(max(self.v[j] + self._slope(j) * dt, 0.0), self.vdd)
        self.t = t_new

    def _crossing(self, j: int, rising: bool) -> None:
        self.above[j] = rising
        log = (self.rising if rising else self.falling)[j]
        log.append(self.t)
        if len(log) > 512 and j not in self.log_nodes:
            del log[:256]
            self._snap = None
        k = (j + 1) % self.n
        new_dir = -1 if rising else 1
        if self.dir[k] != new_dir:
            self.dir[k] = new_dir
            if self.tied[k]:
                self.tied[k] = False
        if self.listener is not None:
            self.listener.on_edge(self, j, self.t, rising)

    def _open(self) -> None:
        self.connected = True
        self._win_idx += 1
        self._win_events += 1
        j = self.m
        if self.tied[j]:
            self.cdis_charge = self.cfg.c_dis * self.v[j]
            return
        self.v[j] *= self.share
        self.cdis_charge = self.cfg.c_dis * self.v[j]
        if self.v[j] < self.v_min[j]:
            self.v_min[j] = self.v[j]
        if self.above[j] and self.v[j] < self.vth:
            self._crossing(j, False)

    def _close(self) -> None:
        self.connected = False
        self._win_events += 1
        self.cdis_charge = self.cfg.c_dis * self.v[self.m]

    def run(self, t_end: float) -> None:
        """Advance the simulation to ``t_end``."""
        n = self.n
        while True:
            t_node = INF
            who = -1
            kind = 0
            for j in range(n):
                dt, k = self._node_event(j)
                if dt < t_node:
                    t_node, who, kind = dt, j, k
            t_node += self.t
            t_win, is_open = self._next_window_event()
            t_next = min(t_node, t_win)
            if t_next > t_end:
                self._advance(t_end)
                self._log()
                return
            if t_win <= t_node:
                self._advance(t_win)
                self._open() if is_open else self._close()
            else:
                self._advance(t_node)
                if kind == 1:
                    self.v[who] = self.vth
                    rising = self.dir[who] > 0
                    self._crossing(who, rising)
                    if rising and who == self.out and self.skip:
                        self._try_skip(t_end)
                else:
                    rail = self.vdd if self.dir[who] > 0 else 0.0
                    self.v[who] = rail
                    self.tied[who] = True
                    if self.connected and who == self.m:
                        self.cdis_charge = self.cfg.c_dis * rail
            self._log()

    def _log(self) -> None:
        for j in range(self.n):
            v = self.v[j]
            if v < self.v_min[j]:
                self.v_min[j] = v
            if v > self.v_max[j]:
                self.v_max[j] = v
        if self.record:
            self.trace_t.append(self.t)
            self.trace_v.append(list(self.v))

    # ---- steady-state skipping --------------------------------------
    def _state(self):
        return (tuple(self.v), tuple(self.dir), tuple(self.tied), tuple(self.above),
                self.connected, self._win_events)

    def _try_skip(self, t_end: float) -> None:
        state = self._state()
        counts = [len(e) for e in self.rising], [len(e) for e in self.falling]
        prev = self._snap
        self._snap = (self.t, state, counts)
        if prev is None:
            return
        t_prev, s_prev, c_prev = prev
        if state[1:] != s_prev[1:] or state[4]:
            return
        tol = 1e-9 * self.vdd
        if any(abs(a - b) > tol for a, b in zip(state[0], s_prev[0])):
            return
        period = self.t - t_prev
        # a settled ring is on the free-running orbit; the analytic period keeps
        # long jumps free of edge-time rounding
        if abs(period - self.period) < 1e-6 * self.period:
            period = self.period
        barrier = t_end
        if self._win_idx < len(self._windows):
            barrier = min(barrier, self._windows[self._win_idx][0])
        for b in self.barriers:
            if b > self.t:
                barrier = min(barrier, b)
                break
        if self.listener is not None:
            barrier = min(barrier, self.listener.quiet_until(self.t))
        k = int((barrier - self.t) / period) - 1
        if k < 1:
            return
        shifts = np.arange(1, k + 1) * period
        for lists, c0, c1 in ((self.rising, c_prev[0], counts[0]), (self.falling, c_prev[1], counts[1])):
            for j in self.log_nodes:
                last = np.asarray(lists[j][c0[j]:c1[j]])
                if last.size:
                    lists[j].extend((last[None, :] + shifts[:, None]).ravel().tolist())
        self.t += k * period
        counts = [len(e) for e in self.rising], [len(e) for e in self.falling]
        self._snap = (self.t, state, counts)

    def set_barriers(self, times) -> None:
        self.barriers = sorted(times)


class RingTrace(NamedTuple):
    """Piecewise-linear node waveforms: breakpoints ``t`` and voltages ``v[k, node]``."""

    t: np.ndarray
    v: np.ndarray

    def sample(self, t_grid) -> np.ndarray:
        t_grid = np.asarray(t_grid, dtype=float)
        return np.stack([np.interp(t_grid, self.t, self.v[:, j]) for j in range(self.v.shape[1])], axis=1)


class RingRun(NamedTuple):
    waveforms: RingTrace | None
    rising_edges: np.ndarray
    sim: RingSimulator


def _check_schedule(cfg: OscConfig, windows) -> list[tuple[float, float]]:
    period = free_running_period(cfg)
    out = []
    last_close = -INF
    for w in windows:
        a, b = (w.t_open, w.t_close) if hasattr(w, "t_open") else w
        if b - a > period:
            raise ModelError(f"TP window of {b - a:g} s is longer than one oscillation period ({period:g} s)")
        if b <= a:
            raise ModelError("TP window closes before it opens")
        if a < last_close:
            raise ModelError("TP windows overlap or are not sorted")
        last_close = b
        out.append((a, b))
    return out


def simulate_ring(cfg: OscConfig, duration: float, tp_schedule=(), record: bool = True,
                  skip: bool = False) -> RingRun:
    """Simulate the ring for ``duration`` seconds with the given TP windows.

    Returns the node waveforms (when ``record``) and the rising threshold
    crossings of the output node.
    """
    windows = _check_schedule(cfg, tp_schedule)
    sim = RingSimulator(cfg, record=record, skip=skip)
    for a, b in windows:
        sim.add_window(a, b)
    sim.run(duration)
    trace = RingTrace(np.asarray(sim.trace_t), np.asarray(sim.trace_v)) if record else None
    return RingRun(trace, np.asarray(sim.rising[cfg.out_node]), sim)


def write_waveform_csv(path, trace: RingTrace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_seconds"] + [f"node_{j}" for j in range(trace.v.shape[1])])
        for t, row in zip(trace.t, trace.v):
            w.writerow([repr(float(t))] + [repr(float(x)) for x in row])


def write_edges_csv(path, edges) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_seconds"])
        for t in edges:
            w.writerow([repr(float(t))])


# ---------------------------------------------------------------------------
# Node-relative timing helpers


def node_voltage(cfg: OscConfig, theta) -> np.ndarray:
    """Unperturbed voltage of a node at phase ``theta`` after its rising ramp starts."""
    T = free_running_period(cfg)
    t = (np.asarray(theta, dtype=float) % (2 * math.pi)) / (2 * math.pi) * T
    tr = cfg.ramp_time
    t_up, t_down = stage_delays(cfg)
    n = cfg.n_stages
    high = (n + 1) // 2 * t_up + (n - 1) // 2 * t_down
    v = np.where(t < tr, t / tr, 1.0)
    v = np.where(t >= high, np.clip(1.0 - (t - high) / tr, 0.0, 1.0), v)
    return v * cfg.v_dd


def high_time(cfg: OscConfig) -> float:
    """Time from a node's rising-ramp start to its falling-ramp start."""
    t_up, t_down = stage_delays(cfg)
    n = cfg.n_stages
    return (n + 1) // 2 * t_up + (n - 1) // 2 * t_down


def reference_crossing(cfg: OscConfig, after: float) -> float:
    """First rising crossing of the modulated node after ``after`` in a free run."""
    T = free_running_period(cfg)
    sim = RingSimulator(replace(cfg, c_dis=cfg.c_dis), skip=False)
    sim.run(after + 2 * T)
    for t in sim.rising[cfg.modulated_node]:
        if t > after:
            return t
    raise ModelError("no rising crossing found")  # pragma: no cover


def edge_shift(cfg: OscConfig, windows, settle_periods: int = 3, n_avg: int = 4,
               free_edges=None) -> float:
    """Steady-state delay (s) of the output rising edges caused by ``windows``.

    Positive values are delays (phase lag). Edges are compared index by index
    against the free-running ring after the disturbance has propagated.
    """
    T = free_running_period(cfg)
    windows = _check_schedule(cfg, windows)
    t_last = windows[-1][1] if windows else 0.0
    t_end = t_last + (settle_periods + n_avg + 2) * T
    if free_edges is None:
        free = RingSimulator(cfg, skip=False)
        free.run(t_end)
        free_edges = np.asarray(free.rising[cfg.out_node])
    sim = RingSimulator(cfg, skip=False)
    for a, b in windows:
        sim.add_window(a, b)
    sim.run(t_end)
    pert = np.asarray(sim.rising[cfg.out_node])
    t0 = t_last + settle_periods * T
    pk = pert[pert > t0][:n_avg]
    # match each perturbed edge to the free edge of the same cycle count
    idx = np.searchsorted(pert, pk)
    if len(pk) < n_avg or idx[-1] >= len(free_edges):
        raise ModelError("simulation too short to measure the edge shift")
    return float(np.mean(pk - free_edges[idx]))


def shift_degrees(cfg: OscConfig, dt: float) -> float:
    return dt / free_running_period(cfg) * 360.0


def probe_window(cfg: OscConfig, theta: float, width: float, cycle: int = 2) -> tuple[float, float]:
    """Window of ``width`` centred at phase ``theta`` of the modulated node's ramp cycle."""
    T = free_running_period(cfg)
    t_up, _ = stage_delays(cfg)
    t_c = reference_crossing(cfg, cycle * T)
    start = t_c - t_up
    center = start + (theta % (2 * math.pi)) / (2 * math.pi) * T
    return center - width / 2, center + width / 2


def isf_sweep(cfg: OscConfig, n_points: int = 64, width: float | None = None):
    """Measure the circuit-model phase shift (degrees) of a narrow window swept over one cycle.

    Returns ``(theta, shift_deg, clamped)`` where ``clamped`` marks windows lying
    entirely inside a rail-clamped region of the unperturbed waveform.
    """
    T = free_running_period(cfg)
    tr = cfg.ramp_time
    if width is None:
        width = tr / 8
    theta = np.arange(n_points) * 2 * math.pi / n_points
    t_up, _ = stage_delays(cfg)
    t_c = reference_crossing(cfg, 2 * T)
    start = t_c - t_up
    free = RingSimulator(cfg, skip=False)
    free.run(start + T + 12 * T)
    free_edges = np.asarray(free.rising[cfg.out_node])
    shifts = np.empty(n_points)
    clamped = np.empty(n_points, dtype=bool)
    high = high_time(cfg)
    for i, th in enumerate(theta):
        c = start + th / (2 * math.pi) * T
        w = (c - width / 2, c + width / 2)
        shifts[i] = shift_degrees(cfg, edge_shift(cfg, [w], free_edges=free_edges))
        a = (w[0] - start) % T
        b = a + width
        in_high = a >= tr and b <= high
        in_low = a >= high + tr and b <= T
        clamped[i] = in_high or in_low
    return theta, shifts, clamped


# ---------------------------------------------------------------------------
# Phase-domain model


@dataclass(frozen=True)
class IsfProfile:
    """Piecewise-triangular ISF of a ring node.

    Phases are measured from the start of the node's rising ramp. The shape is
    zero on both rail-clamped regions, a positive triangle over the rising
    ramp peaking at ``peak_phase`` and a negative triangle over the falling
    ramp. Sensitivity is in radians per unit of ``q / (c_p * v_dd)``.
    """

    gamma_max: float
    peak_phase: float
    rise_width: float
    fall_start: float
    fall_peak: float

    @classmethod
    def for_oscillator(cls, cfg: OscConfig, gamma_max: float) -> IsfProfile:
        T = free_running_period(cfg)
        t_up, t_down = stage_delays(cfg)
        k = 2 * math.pi / T
        hi = high_time(cfg)
        return cls(gamma_max, k * t_up, k * cfg.ramp_time, k * hi, k * (hi + t_down))

    def scaled(self, factor: float) -> IsfProfile:
        return replace(self, gamma_max=self.gamma_max * factor)

    def gamma(self, theta) -> np.ndarray:
        th = np.asarray(theta, dtype=float) % (2 * math.pi)
        up = np.where(th <= self.peak_phase, th / self.peak_phase,
                      (self.rise_width - th) / (self.rise_width - self.peak_phase))
        up = np.where(th < self.rise_width, up, 0.0)
        fs, fp, fe = self.fall_start, self.fall_peak, self.fall_start + self.rise_width
        down = np.where(th <= fp, (th - fs) / (fp - fs), (fe - th) / (fe - fp))
        down = np.where((th >= fs) & (th < fe), down, 0.0)
        return self.gamma_max * (np.clip(up, 0, 1) - np.clip(down, 0, 1))


def analytic_gamma_max(cfg: OscConfig) -> float:
    """Peak ISF of the PWL ring: a charge ``q`` held off the node at its
    crossing delays the edge by ``q / i_ch``, i.e. ``2*pi / n_stages`` per ``q_max``."""
    return 2 * math.pi / cfg.n_stages


def phase_shift_per_trigger(cfg: OscConfig, isf: IsfProfile, trigger_phase: float) -> float:
    """Phase-domain shift (signed radians, positive = delay) of one trigger.

    ``delta_phi = gamma(trigger_phase) * q_eff / (c_p * v_dd)`` where ``q_eff``
    is the charge ``c_dis`` holds when it sits at the node voltage of the
    trigger instant.
    """
    q_eff = cfg.c_dis * float(node_voltage(cfg, trigger_phase))
    return float(isf.gamma(trigger_phase)) * q_eff / (cfg.c_p * cfg.v_dd)


# ---------------------------------------------------------------------------
# Calibration


def nominal_window(cfg: OscConfig, control, cycle: int = 2) -> tuple[float, float]:
    """The TP window the control unit produces for a BBP in the given cycle."""
    from .control import clock_edges_of

    T = free_running_period(cfg)
    sim = RingSimulator(cfg, skip=False)
    sim.run((cycle + 2) * T)
    clocks = [t for t in clock_edges_of(sim, cfg, control) if t >= cycle * T]
    t_open = clocks[0] + control.d1
    return t_open, t_open + control.d2


def circuit_trigger_shift(cfg: OscConfig, control=None) -> float:
    """Single nominally-timed trigger shift in the circuit model, degrees."""
    from .control import tune_delays

    if control is None:
        control = tune_delays(cfg)
    return shift_degrees(cfg, edge_shift(cfg, [nominal_window(cfg, control)]))


def calibrate_isf(cfg: OscConfig, control=None, probe_cdis: float | None = None) -> IsfProfile:
    """Fit ``gamma_max`` so the phase-domain model reproduces the circuit model
    for a nominal trigger with ``probe_cdis`` (default ``c_p / 100``, small-signal)."""
    if probe_cdis is None:
        probe_cdis = cfg.c_p / 100
    probe = replace(cfg, c_dis=probe_cdis)
    measured = math.radians(circuit_trigger_shift(probe, control))
    unit = IsfProfile.for_oscillator(cfg, 1.0)
    per_unit = phase_shift_per_trigger(probe, unit, unit.peak_phase)
    return unit.scaled(measured / per_unit)


def calibrate_cdis(cfg: OscConfig, target_lsb_deg: float = 22.5, model: str = "circuit",
                   control=None, isf: IsfProfile | None = None, xtol_deg: float = 1e-4) -> float:
    """Return the ``c_dis`` giving a ``target_lsb_deg`` shift per nominal trigger.

    Bracketed root finding on the monotone map ``c_dis -> shift`` over
    ``[c_p/1000, 10*c_p]``.
    """
    target = float(target_lsb_deg)
    if not 0 < target < 90:
        raise ConfigError(f"target LSB must lie in (0, 90) degrees, got {target}")
    if model not in ("circuit", "phase_domain"):
        raise ValueError(f"unknown model {model!r}")
    lo, hi = cfg.c_p / 1000, cfg.c_p * 10 * (1 - 1e-9)

    if model == "circuit":
        from .control import tune_delays

        if control is None:
            control = tune_delays(cfg)
        cache: dict[float, float] = {}

        def f(c):
            if c not in cache:
                cache[c] = circuit_trigger_shift(replace(cfg, c_dis=c), control)
            return cache[c] - target
    else:
        if isf is None:
            isf = calibrate_isf(cfg, control)

        def f(c):
            return math.degrees(phase_shift_per_trigger(replace(cfg, c_dis=c), isf, isf.peak_phase)) - target

    f_lo, f_hi = f(lo), f(hi)
    if f_lo > 0 or f_hi < 0:
        raise CalibrationError(
            f"no bracket for {target} deg within [{lo:g}, {hi:g}] F "
            f"(shifts {f_lo + target:.4g} .. {f_hi + target:.4g} deg)")
    # convert the degree tolerance to a capacitance tolerance through the local slope
    slope = (f_hi - f_lo) / (hi - lo)
    return brentq(f, lo, hi, xtol=max(xtol_deg / max(slope, 1e-300), 1e-30), rtol=1e-12)
