"""Behavioural model of the trigger-window control unit.

Two D flip-flops and two delay lines turn each baseband pulse (BBP) into one
trigger-pulse (TP) window over the modulated node's rising edge:

* while BBP is low both flip-flops are held in reset and TP is low;
* DFF1 is clocked by the stage before the modulated node through delay line
  D1. The first clock edge reaching DFF1 while BBP is high sets Q1 and opens
  TP (``TP = Q1 and not Q2``);
* Q1 travels through D2 and sets Q2, closing TP ``d2`` later;
* TP stays low until BBP returns to zero and rises again. A BBP that falls
  while TP is open resets Q1 and truncates the window.

The modulated node's rising edge follows the *falling* transition of the
previous stage by one stage delay, so with ``clock_edge="falling"`` (an
inverting D1 path) ``d1`` is a fraction of a stage delay. ``clock_edge="rising"``
clocks on the previous stage's rising edge, which forces ``d1`` beyond half a
period.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .core import ConfigError, ControlConfig, OscConfig
from .oscillator import RingSimulator, free_running_period, high_time


class MissedPulseWarning(UserWarning):
    """A BBP ended before any clock edge reached the first flip-flop."""


class BbpPulse(NamedTuple):
    t_rise: float
    t_fall: float


@dataclass(frozen=True)
class BbpPulseTrain:
    edges: tuple[BbpPulse, ...]

    def __post_init__(self):
        edges = tuple(BbpPulse(float(a), float(b)) for a, b in self.edges)
        for (a, b), nxt in zip(edges, edges[1:] + (None,)):
            if b <= a:
                raise ConfigError(f"BBP pulse ({a:g}, {b:g}) has non-positive width")
            if nxt is not None and nxt.t_rise < b:
                raise ConfigError("BBP pulses must be sorted and non-overlapping")
        object.__setattr__(self, "edges", edges)

    def __len__(self) -> int:
        return len(self.edges)

    def rises(self) -> list[float]:
        return [p.t_rise for p in self.edges]


class TpWindow(NamedTuple):
    t_open: float
    t_close: float
    source_bbp: int


class ControlUnit:
    """Event-driven state machine shared by the pure and co-simulated paths."""

    def __init__(self, cfg: ControlConfig, bbp: BbpPulseTrain, d1: float | None = None,
                 d2: float | None = None):
        self.cfg = cfg
        self.d1 = cfg.d1 if d1 is None else d1
        self.d2 = cfg.d2 if d2 is None else d2
        self.pulses = bbp.edges
        self.idx = 0
        self.windows: list[TpWindow] = []
        self.truncated: list[int] = []

    def on_clock(self, t_clock: float) -> TpWindow | None:
        t = t_clock + self.d1
        p = self.pulses
        while self.idx < len(p) and p[self.idx].t_fall <= t:
            self.idx += 1
        if self.idx >= len(p) or t < p[self.idx].t_rise:
            return None
        if self.windows and self.windows[-1].source_bbp == self.idx:
            return None
        close = t + self.d2
        if close > p[self.idx].t_fall:
            close = p[self.idx].t_fall
            self.truncated.append(self.idx)
        w = TpWindow(t, close, self.idx)
        self.windows.append(w)
        return w

    def missed(self) -> list[int]:
        got = {w.source_bbp for w in self.windows}
        return [i for i in range(len(self.pulses)) if i not in got]


def _warn_missed(missed: list[int]) -> None:
    if missed:
        warnings.warn(f"BBP pulses {missed} captured no clock edge; no TP window emitted",
                      MissedPulseWarning, stacklevel=3)


def generate_tp_windows(bbp: BbpPulseTrain, clock_edges, cfg: ControlConfig,
                        d1: float | None = None, d2: float | None = None) -> list[TpWindow]:
    """Replay the control unit against a list of DFF clock edges.

    ``clock_edges`` are the transitions of the stage before the modulated node
    that clock DFF1 (falling edges for the default inverting D1 path). One
    window is produced per BBP that sees a delayed clock edge; pulses that see
    none are reported with :class:`MissedPulseWarning`.
    """
    cu = ControlUnit(cfg, bbp, d1, d2)
    for t in sorted(clock_edges):
        cu.on_clock(t)
    _warn_missed(cu.missed())
    return cu.windows


def clock_edges_of(sim: RingSimulator, osc: OscConfig, cfg: ControlConfig) -> list[float]:
    lists = sim.rising if cfg.clock_edge == "rising" else sim.falling
    return lists[osc.clock_node]


class CoSimController:
    """Drives a :class:`RingSimulator` from a BBP train in closed loop."""

    def __init__(self, osc: OscConfig, cfg: ControlConfig, bbp: BbpPulseTrain,
                 d1: float | None = None, d2: float | None = None):
        self.unit = ControlUnit(cfg, bbp, d1, d2)
        self.clock_node = osc.clock_node
        self.clock_rising = cfg.clock_edge == "rising"

    def on_edge(self, sim: RingSimulator, node: int, t: float, rising: bool) -> None:
        if node == self.clock_node and rising == self.clock_rising:
            w = self.unit.on_clock(t)
            if w is not None:
                sim.add_window(w.t_open, w.t_close)

    def quiet_until(self, t: float) -> float:
        u = self.unit
        done = {w.source_bbp for w in u.windows}
        for i in range(u.idx, len(u.pulses)):
            p = u.pulses[i]
            if p.t_fall > t + u.d1 and i not in done:
                return p.t_rise - u.d1
        return math.inf


def run_closed_loop(osc: OscConfig, cfg: ControlConfig, bbp: BbpPulseTrain, t_end: float,
                    d1: float | None = None, d2: float | None = None, skip: bool = True,
                    log_nodes=None):
    """Simulate ring + control unit together; returns ``(sim, windows)``.

    ``log_nodes`` limits which nodes keep their full edge history.
    """
    ctl = CoSimController(osc, cfg, bbp, d1, d2)
    sim = RingSimulator(osc, skip=skip, listener=ctl, log_nodes=log_nodes)
    sim.set_barriers(bbp.rises())
    sim.run(t_end)
    _warn_missed(ctl.unit.missed())
    return sim, ctl.unit.windows


class AlignmentReport(NamedTuple):
    covered: int
    total: int
    margins: list[float]

    @property
    def ok(self) -> bool:
        return self.covered == self.total


def check_window_alignment(windows, target_edges) -> AlignmentReport:
    """For each window, is some target edge strictly inside ``(t_open, t_close)``?

    The margin is the distance from the covered edge to the nearer boundary,
    or minus the distance to the nearest edge when the window misses.
    """
    edges = np.asarray(sorted(target_edges), dtype=float)
    covered = 0
    margins = []
    for w in windows:
        a, b = w[0], w[1]
        i = int(np.searchsorted(edges, a, side="right"))
        if i < len(edges) and edges[i] < b:
            covered += 1
            margins.append(float(min(edges[i] - a, b - edges[i])))
        else:
            cand = [abs(edges[j] - x) for j in (i - 1, i) if 0 <= j < len(edges) for x in (a, b)]
            margins.append(-float(min(cand)) if cand else -math.inf)
    return AlignmentReport(covered, len(windows), margins)


def write_windows_csv(path, windows, report: AlignmentReport | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bbp_index", "t_open", "t_close", "margin_seconds"])
        for k, win in enumerate(windows):
            margin = report.margins[k] if report is not None else ""
            w.writerow([win.source_bbp, repr(win.t_open), repr(win.t_close),
                        repr(margin) if margin != "" else ""])


# ---------------------------------------------------------------------------
# Delay tuning


def edge_interval(osc: OscConfig, clock_edge: str = "falling") -> tuple[float, float]:
    """Offsets ``(lo, hi)`` from a DFF clock edge to the modulated node's rising
    crossing without and with the trigger's own delay (``c_dis * v_th / i_ch``)."""
    T = free_running_period(osc)
    sim = RingSimulator(osc, skip=False)
    sim.run(4 * T)
    clocks = (sim.rising if clock_edge == "rising" else sim.falling)[osc.clock_node]
    targets = np.asarray(sim.rising[osc.modulated_node])
    t_c = [t for t in clocks if t > T][0]
    lo = float(targets[targets > t_c][0] - t_c)
    return lo, lo + osc.c_dis * osc.v_th / osc.i_ch


def tune_delays(osc: OscConfig, safety_sigma: float = 3.5, pvt_sigma: float = 0.2,
                min_margin: float | None = None, clock_edge: str = "falling") -> ControlConfig:
    """Choose nominal ``d1``/``d2`` that keep the rising edge inside the window.

    The edge must be covered from its free-running position ``lo`` to its
    triggered position ``hi``. Over the box of delay multipliers
    ``[1 - a, 1 + a]`` with ``a = safety_sigma * pvt_sigma``, the worst-case
    margins are ``lo - d1 (1 + a)`` and ``(d1 + d2)(1 - a) - hi``. ``d1`` is
    set to equalise them (maximin) and ``d2`` is the narrowest width that
    leaves ``min_margin`` (default a tenth of the stage delay) on both sides.
    """
    T = free_running_period(osc)
    lo, hi = edge_interval(osc, clock_edge)
    if min_margin is None:
        min_margin = 0.1 * osc.c_p * osc.v_th / osc.i_ch
    a = safety_sigma * pvt_sigma
    if not 0 <= a < 1:
        raise ConfigError(f"safety_sigma * pvt_sigma must lie in [0, 1), got {a:g}")
    d2 = (2 * min_margin + (1 + a) * hi - (1 - a) * lo) / (1 - a * a)
    d1 = (lo + hi - d2 * (1 - a)) / 2
    if d2 >= T:
        raise ConfigError(f"infeasible delay tuning: required window width {d2:g} s >= period {T:g} s")
    if d1 <= 0:
        raise ConfigError("infeasible delay tuning: window would have to open before the clock edge")
    # the nominal window must not reach the node's falling crossing
    if d1 + d2 >= lo + high_time(osc):
        raise ConfigError("infeasible delay tuning: nominal window overlaps the falling edge")
    return ControlConfig(d1=d1, d2=d2, pvt_sigma=pvt_sigma, clock_edge=clock_edge)


def pvt_multipliers(rng: np.random.Generator, sigma: float, n: int) -> np.ndarray:
    """Independent Gaussian multipliers for ``(d1, d2)``; shape ``(n, 2)``.

    Clipped at 1% so a delay never becomes zero or negative.
    """
    return np.maximum(1.0 + sigma * rng.standard_normal((n, 2)), 0.01)


def monte_carlo_alignment(osc: OscConfig, cfg: ControlConfig, trials: int = 1000, seed: int = 0,
                          n_pulses: int = 3) -> list[AlignmentReport]:
    """Closed-loop Monte Carlo: perturb ``d1``/``d2`` per trial, simulate, check coverage.

    Coverage is checked against the modulated node's actual (triggered)
    rising crossings.
    """
    T = free_running_period(osc)
    slot = 12 * T
    bbp = BbpPulseTrain(tuple((4 * T + k * slot, 4 * T + k * slot + 2 * T) for k in range(n_pulses)))
    t_end = 4 * T + n_pulses * slot
    mult = pvt_multipliers(np.random.default_rng(seed), cfg.pvt_sigma, trials)
    reports = []
    for m1, m2 in mult:
        d1, d2 = cfg.d1 * m1, cfg.d2 * m2
        if d2 > T:
            # a window this long is a control-unit failure
            reports.append(AlignmentReport(0, n_pulses, [-math.inf] * n_pulses))
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", MissedPulseWarning)
            sim, windows = run_closed_loop(osc, cfg, bbp, t_end, d1, d2, skip=False)
        rep = check_window_alignment(windows, sim.rising[osc.modulated_node])
        if len(windows) < n_pulses:
            rep = AlignmentReport(rep.covered, n_pulses, rep.margins)
        reports.append(rep)
    return reports
