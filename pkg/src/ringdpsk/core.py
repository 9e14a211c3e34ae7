"""Shared domain types, unit conventions and configuration validation.

Units are SI throughout (seconds, hertz, farads, amperes, volts). Constellation
geometry is kept in exact rational degrees; conversion to radians happens only
where a float is actually needed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

#: Phase step produced by a single trigger on the hardware, in degrees.
HARDWARE_LSB_DEG = Fraction(45, 2)
#: Largest number of BBPs a symbol can need (a full turn at the hardware LSB).
MAX_TRIGGERS_PER_SYMBOL = 16


class ConfigError(ValueError):
    """A configuration value violates a documented invariant."""


class ModelError(RuntimeError):
    """A model could not be evaluated for otherwise valid input."""


def wrap_phase(x):
    """Wrap radians into [0, 2*pi). Works on floats and arrays."""
    return x % (2 * math.pi)


def wrap_diff(x):
    """Wrap radians into (-pi, pi]. Works on floats and arrays."""
    return math.pi - (math.pi - x) % (2 * math.pi)


@dataclass(frozen=True, order=True)
class PhaseAngle:
    """An angle held as exact degrees, canonical range [0, 360)."""

    degrees: Fraction

    def __post_init__(self):
        object.__setattr__(self, "degrees", Fraction(self.degrees) % 360)

    @classmethod
    def from_radians(cls, rad: float) -> PhaseAngle:
        return cls(Fraction(math.degrees(rad)))

    @property
    def radians(self) -> float:
        return float(self.degrees) * math.pi / 180.0

    def __add__(self, other: PhaseAngle) -> PhaseAngle:
        return PhaseAngle(self.degrees + other.degrees)

    def __sub__(self, other: PhaseAngle) -> PhaseAngle:
        return PhaseAngle(self.degrees - other.degrees)

    def __mul__(self, k: int) -> PhaseAngle:
        return PhaseAngle(self.degrees * k)

    __rmul__ = __mul__

    def diff(self, other: PhaseAngle) -> Fraction:
        """Signed difference ``self - other`` in degrees, in (-180, 180]."""
        d = (self.degrees - other.degrees) % 360
        return d - 360 if d > 180 else d


@dataclass(frozen=True)
class ModulationMode:
    name: str
    bits_per_symbol: int
    bbps_per_lsb: int

    @property
    def constellation_size(self) -> int:
        return 2 ** self.bits_per_symbol

    @property
    def lsb_degrees(self) -> Fraction:
        return HARDWARE_LSB_DEG * self.bbps_per_lsb

    @property
    def lsb_radians(self) -> float:
        return float(self.lsb_degrees) * math.pi / 180.0


MODES = {
    "16DPSK": ModulationMode("16DPSK", 4, 1),
    "8DPSK": ModulationMode("8DPSK", 3, 2),
    "QDPSK": ModulationMode("QDPSK", 2, 4),
    "DBPSK": ModulationMode("DBPSK", 1, 8),
}


def get_mode(name: str | ModulationMode) -> ModulationMode:
    if isinstance(name, ModulationMode):
        return name
    key = name.strip().upper()
    aliases = {"4DPSK": "QDPSK", "2DPSK": "DBPSK", "BDPSK": "DBPSK", "DQPSK": "QDPSK"}
    key = aliases.get(key, key)
    if key not in MODES:
        raise ConfigError(f"unknown modulation mode {name!r}; expected one of {sorted(MODES)}")
    return MODES[key]


def mode_params(mode: ModulationMode | str) -> tuple[PhaseAngle, int]:
    """Return ``(effective_lsb, constellation_size)`` for a mode."""
    mode = get_mode(mode)
    return PhaseAngle(mode.lsb_degrees), mode.constellation_size


@dataclass(frozen=True)
class OscConfig:
    """Electrical parameters of the PWL ring oscillator.

    ``v_threshold`` defaults to ``v_dd / 2``. ``modulated_node`` carries the
    discharge capacitor; the output buffer taps ``output_node`` (default: the
    stage after the modulated one).
    """

    n_stages: int = 7
    i_ch: float = 134.4e-6
    c_p: float = 10e-15
    v_dd: float = 0.8
    c_dis: float = 8.75e-15
    v_threshold: float | None = None
    modulated_node: int = 0
    output_node: int | None = None

    @property
    def v_th(self) -> float:
        return self.v_dd / 2 if self.v_threshold is None else self.v_threshold

    @property
    def out_node(self) -> int:
        if self.output_node is None:
            return (self.modulated_node + 1) % self.n_stages
        return self.output_node

    @property
    def clock_node(self) -> int:
        return (self.modulated_node - 1) % self.n_stages

    @property
    def ramp_time(self) -> float:
        """Rail-to-rail ramp duration of one node."""
        return self.c_p * self.v_dd / self.i_ch


@dataclass(frozen=True)
class ControlConfig:
    """Delay-line settings of the trigger-window control unit.

    ``clock_edge`` selects which transition of the stage before the modulated
    node clocks the first flip-flop (see :mod:`ringdpsk.control`).
    """

    d1: float = 1.575630252100839e-11
    d2: float = 1.801762371615314e-10
    pvt_sigma: float = 0.2
    clock_edge: str = "falling"


@dataclass(frozen=True)
class ModemTiming:
    symbol_rate: float = 2e6
    baseband_clock: float = 4e6
    bbp_rate: float = 160e6
    #: BBP high time in oscillator periods; 2 keeps one clock edge inside the
    #: pulse even after a full-LSB delay of the edges.
    bbp_high_periods: int = 2

    @property
    def symbol_period(self) -> float:
        return 1.0 / self.symbol_rate

    @property
    def slots_per_symbol(self) -> int:
        return int(round(self.bbp_rate / self.symbol_rate))

    @property
    def slots_per_baseband_period(self) -> int:
        return int(round(self.bbp_rate / self.baseband_clock))


@dataclass(frozen=True)
class ImpairmentConfig:
    """Impairments applied by the frontend.

    ``awgn_snr_db`` of ``inf`` disables additive noise. ``freq_drift_ppm`` is
    relative to the carrier; ``freq_drift_rate_ppm_per_s`` adds a linear ramp.
    """

    phase_noise_diffusion: float = 0.0
    freq_drift_ppm: float = 0.0
    freq_drift_rate_ppm_per_s: float = 0.0
    awgn_snr_db: float = math.inf
    seed: int = 0


@dataclass(frozen=True)
class ReceiverConfig:
    """Settle window as fractions of the symbol period."""

    settle_start: float = 0.55
    settle_stop: float = 0.95


@dataclass(frozen=True)
class SimConfig:
    osc: OscConfig = field(default_factory=OscConfig)
    control: ControlConfig = field(default_factory=ControlConfig)
    modem: ModemTiming = field(default_factory=ModemTiming)
    impairments: ImpairmentConfig = field(default_factory=ImpairmentConfig)
    receiver: ReceiverConfig = field(default_factory=ReceiverConfig)
    sample_rate: float = 64e6
    rng_seed: int = 0

    @property
    def carrier_frequency(self) -> float:
        return self.osc.i_ch / (self.osc.n_stages * self.osc.c_p * self.osc.v_dd)

    @property
    def samples_per_symbol(self) -> int:
        return int(round(self.sample_rate / self.modem.symbol_rate))


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def validate_osc(osc: OscConfig) -> OscConfig:
    _check(isinstance(osc.n_stages, int) and osc.n_stages >= 3 and osc.n_stages % 2 == 1,
           f"osc.n_stages must be an odd integer >= 3, got {osc.n_stages}")
    for name in ("i_ch", "c_p", "v_dd", "c_dis"):
        v = getattr(osc, name)
        _check(math.isfinite(v) and v > 0, f"osc.{name} must be > 0, got {v}")
    _check(osc.c_dis < 10 * osc.c_p, f"osc.c_dis must be < 10 * c_p, got {osc.c_dis}")
    _check(0 < osc.v_th < osc.v_dd, f"osc.v_threshold must lie in (0, v_dd), got {osc.v_th}")
    _check(0 <= osc.modulated_node < osc.n_stages, "osc.modulated_node out of range")
    _check(0 <= osc.out_node < osc.n_stages and osc.out_node != osc.modulated_node,
           "osc.output_node must be a valid stage other than the modulated node")
    return osc


def validate_timing(timing: ModemTiming) -> ModemTiming:
    for name in ("symbol_rate", "baseband_clock", "bbp_rate"):
        v = getattr(timing, name)
        _check(math.isfinite(v) and v > 0, f"modem.{name} must be > 0, got {v}")
    slots = timing.bbp_rate / timing.baseband_clock
    _check(slots >= MAX_TRIGGERS_PER_SYMBOL - 1e-9,
           f"modem.bbp_rate too low for {MAX_TRIGGERS_PER_SYMBOL} triggers/symbol: "
           f"only {slots:g} slots per baseband period")
    _check(timing.baseband_clock >= timing.symbol_rate * (1 - 1e-12),
           "modem.baseband_clock must be >= symbol_rate")
    ratio = timing.bbp_rate / timing.symbol_rate
    _check(abs(ratio - round(ratio)) < 1e-9 * ratio,
           "modem.bbp_rate must be an integer multiple of symbol_rate")
    _check(timing.bbp_high_periods >= 1, "modem.bbp_high_periods must be >= 1")
    return timing


def validate_config(cfg: SimConfig) -> SimConfig:
    """Check every invariant of ``cfg``; return it unchanged if valid.

    Raises :class:`ConfigError` naming the violated invariant.
    """
    validate_osc(cfg.osc)
    validate_timing(cfg.modem)
    c = cfg.control
    _check(c.d1 > 0 and c.d2 > 0, "control.d1 and control.d2 must be > 0")
    period = 1.0 / cfg.carrier_frequency
    _check(c.d2 < period, f"control.d2 ({c.d2:g} s) must be shorter than the oscillator period ({period:g} s)")
    _check(c.pvt_sigma >= 0, "control.pvt_sigma must be >= 0")
    _check(c.clock_edge in ("rising", "falling"), "control.clock_edge must be 'rising' or 'falling'")
    imp = cfg.impairments
    _check(imp.phase_noise_diffusion >= 0, "impairments.phase_noise_diffusion must be >= 0")
    _check(not math.isnan(imp.awgn_snr_db), "impairments.awgn_snr_db must be a number")
    r = cfg.receiver
    _check(0 <= r.settle_start < r.settle_stop <= 1, "receiver settle window must satisfy 0 <= start < stop <= 1")
    _check(cfg.sample_rate >= 8 * cfg.modem.symbol_rate,
           f"sample_rate must be >= 8 x symbol_rate, got {cfg.sample_rate:g}")
    # the BBP must fit inside its slot
    slot = 1.0 / cfg.modem.bbp_rate
    _check(cfg.modem.bbp_high_periods * period < slot,
           "modem.bbp_high_periods oscillator periods do not fit in one BBP slot")
    return cfg


def nominal_profile(**overrides) -> SimConfig:
    """2.4 GHz carrier, 2 MSps, 4 MHz baseband clock, 160 MHz BBP rate."""
    return replace(SimConfig(), **overrides)


def scaled_profile(factor: float = 1e-3, **overrides) -> SimConfig:
    """The nominal profile with every frequency scaled by ``factor``.

    The ring slows down through ``i_ch`` so all frequency ratios are kept.
    """
    base = SimConfig()
    osc = replace(base.osc, i_ch=base.osc.i_ch * factor)
    m = base.modem
    modem = replace(m, symbol_rate=m.symbol_rate * factor, baseband_clock=m.baseband_clock * factor,
                    bbp_rate=m.bbp_rate * factor)
    ctl = replace(base.control, d1=base.control.d1 / factor, d2=base.control.d2 / factor)
    return replace(base, osc=osc, modem=modem, control=ctl, sample_rate=base.sample_rate * factor,
                   **overrides)
