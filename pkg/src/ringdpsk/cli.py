"""Batch scenario runner: ``ringdpsk {simulate,calibrate,sweep,spectrum}``.

Exit codes: 0 success, 2 configuration error, 3 model/runtime error.

Artifacts written to ``--out`` (one file per requested output)::

    summary        run_summary           key=value lines
    constellation  constellation.csv     symbol_index,i,q,ref_i,ref_q,error_magnitude
    demod          demod.csv             symbol_index,soft_phase_deg,decided_increment,tx_increment,error_flag
    frame          frame.csv             symbol_index,increment_lsb,bbp_count,phase_deg_end
    windows        windows.csv           bbp_index,t_open,t_close,margin_seconds
    waveform       waveform.csv          t_seconds,i,q
    spectrum       spectrum.csv          offset_hz,psd_dbc
"""
from __future__ import annotations

import argparse
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import config as cfgtext
from .control import check_window_alignment, write_windows_csv
from .core import (
    ConfigError,
    ModelError,
    ModulationMode,
    PhaseAngle,
    SimConfig,
    get_mode,
    nominal_profile,
    scaled_profile,
    validate_config,
)
from .frontend import (
    Waveform,
    apply_impairments,
    synthesize_waveform,
    write_waveform_csv,
)
from .metrics import (
    SpectrumReport,
    compute_evm,
    compute_spectrum,
    error_rates,
    format_summary,
    write_evm_csv,
    write_spectrum_csv,
)
from .modulator import (
    DpskFrame,
    PhaseTrajectory,
    frame_from_increments,
    modulate,
    random_frame,
    write_frame_csv,
)
from .oscillator import (
    calibrate_cdis,
    calibrate_isf,
    circuit_trigger_shift,
    phase_shift_per_trigger,
)
from .receiver import (
    CdrEstimate,
    DemodResult,
    demodulate_dpsk,
    estimate_carrier,
    write_demod_csv,
)

OUTPUT_KEYS = ("summary", "constellation", "demod", "frame", "windows", "waveform", "spectrum")
MODELS = {"circuit": "circuit", "phase": "phase_domain", "phase_domain": "phase_domain"}
#: Wiener phase-noise diffusion (rad^2/s) that puts 16DPSK EVM near 4.9 % at
#: 2 MSps, found with ``ringdpsk sweep --axis impairments.phase_noise_diffusion
#: --target-evm 4.9``. EVM depends on ``diffusion / symbol_rate`` only.
EVM_CALIBRATED_DIFFUSION = 5.5e3


@dataclass(frozen=True)
class Scenario:
    sim: SimConfig
    mode: ModulationMode
    n_symbols: int = 1000
    outputs: frozenset = frozenset({"summary"})
    model: str = "phase_domain"
    #: ``random`` payload or ``idle`` (every symbol a full turn)
    pattern: str = "random"
    evm_reference: str = "nearest"
    evm_normalization: str = "average"
    nfft: int = 4096
    segments: int = 8
    estimate_epoch: bool = False

    def __post_init__(self):
        if self.n_symbols < 2:
            raise ConfigError(f"scenario.n_symbols must be >= 2 (reference + data), got {self.n_symbols}")
        unknown = set(self.outputs) - set(OUTPUT_KEYS)
        if unknown:
            raise ConfigError(f"scenario.outputs: unknown keys {sorted(unknown)}; choose from {list(OUTPUT_KEYS)}")
        if self.model not in ("circuit", "phase_domain"):
            raise ConfigError(f"scenario.model must be circuit or phase, got {self.model!r}")
        if self.pattern not in ("random", "idle"):
            raise ConfigError(f"scenario.pattern must be random or idle, got {self.pattern!r}")


@dataclass
class ChainResult:
    scenario: Scenario
    frame: DpskFrame
    trajectory: PhaseTrajectory
    waveform: Waveform
    cdr: CdrEstimate
    demod: DemodResult
    evm: object
    rates: dict
    spectrum: SpectrumReport | None = None
    notes: list = field(default_factory=list)


def scenario_from_text(values: dict[str, str], sim: SimConfig, **overrides) -> Scenario:
    """Build a :class:`Scenario` from ``scenario.*`` strings plus overrides."""
    kw: dict = {}
    if "mode" in values:
        kw["mode"] = get_mode(values["mode"])
    for key in ("n_symbols", "nfft", "segments"):
        if key in values:
            number = cfgtext.parse_number(values[key], f"scenario.{key}")
            if number.denominator != 1:
                raise ConfigError(f"scenario.{key}: expected an integer, got {values[key]!r}")
            kw[key] = int(number)
    if "outputs" in values:
        kw["outputs"] = frozenset(s.strip() for s in values["outputs"].split(",") if s.strip())
    if "model" in values:
        kw["model"] = _model_name(values["model"])
    for key in ("pattern", "evm_reference", "evm_normalization"):
        if key in values:
            kw[key] = values[key].strip()
    if "estimate_epoch" in values:
        kw["estimate_epoch"] = values["estimate_epoch"].strip().lower() in ("true", "yes", "1")
    known = {"mode", "n_symbols", "nfft", "segments", "outputs", "model", "pattern",
             "evm_reference", "evm_normalization", "estimate_epoch"}
    extra = set(values) - known
    if extra:
        raise ConfigError(f"unknown key scenario.{sorted(extra)[0]}")
    kw.update({k: v for k, v in overrides.items() if v is not None})
    kw.setdefault("mode", get_mode("16DPSK"))
    return Scenario(sim=sim, **kw)


def _model_name(name: str) -> str:
    key = name.strip().lower()
    if key not in MODELS:
        raise ConfigError(f"model must be 'circuit' or 'phase', got {name!r}")
    return MODELS[key]


def build_frame(scn: Scenario) -> DpskFrame:
    n_data = scn.n_symbols - 1
    if scn.pattern == "idle":
        return frame_from_increments([scn.mode.constellation_size] * n_data, scn.mode)
    return random_frame(n_data, scn.mode, np.random.default_rng(scn.sim.rng_seed))


def run_chain(scn: Scenario) -> ChainResult:
    """encode -> schedule -> control unit -> oscillator -> frontend -> receiver -> metrics."""
    sim = validate_config(scn.sim)
    frame = build_frame(scn)
    traj = modulate(frame, sim, scn.model)
    clean = synthesize_waveform(traj, sim.sample_rate)
    w = apply_impairments(clean, sim.impairments)
    notes = []
    if scn.n_symbols >= 8:
        cdr = estimate_carrier(w, sim.modem, sim.receiver, estimate_epoch=scn.estimate_epoch)
    else:
        # too short for the offset estimator; assume a locked carrier
        cdr = CdrEstimate(0.0, PhaseAngle(0), w.t0)
        notes.append("cdr=bypassed")
    demod = demodulate_dpsk(w, scn.mode, cdr, sim.modem, sim.receiver, reference=frame)
    evm = compute_evm(demod.points, scn.mode, scn.evm_reference, scn.evm_normalization,
                      tx_increments=frame.symbols)
    rates = error_rates(demod, frame)
    spectrum = None
    if "spectrum" in scn.outputs:
        nfft = scn.nfft
        # shrink to a power of two that fits the segments at 50 % overlap
        while nfft > 16 and nfft * (scn.segments + 1) // 2 > len(w.samples):
            nfft //= 2
        if nfft != scn.nfft:
            notes.append(f"spectrum_nfft={nfft}")
        spectrum = compute_spectrum(w, nfft, scn.segments)
        for k in (1, 2):
            for sign in (-1, 1):
                spectrum.suppression_at(sign * k * sim.modem.baseband_clock,
                                        sim.modem.baseband_clock / 4)
    return ChainResult(scn, frame, traj, w, cdr, demod, evm, rates, spectrum, notes)


def summary_values(res: ChainResult) -> dict:
    scn, sim = res.scenario, res.scenario.sim
    imp = sim.impairments
    out = {
        "mode": scn.mode.name,
        "model": scn.model,
        "pattern": scn.pattern,
        "n_symbols": scn.n_symbols,
        "seed": sim.rng_seed,
        "impairment_seed": imp.seed,
        "carrier_frequency_hz": sim.carrier_frequency,
        "symbol_rate": sim.modem.symbol_rate,
        "phase_noise_diffusion": imp.phase_noise_diffusion,
        "freq_drift_ppm": imp.freq_drift_ppm,
        "awgn_snr_db": imp.awgn_snr_db,
        "freq_offset_hz": res.cdr.freq_offset,
        "evm_rms_percent": res.evm.evm_rms_percent,
        "evm_reference": scn.evm_reference,
        "evm_normalization": scn.evm_normalization,
        "ser": res.rates["ser"],
        "ber": res.rates["ber"],
        "symbol_errors": len(res.demod.symbol_errors or []),
    }
    if res.spectrum is not None:
        for off, level in sorted(res.spectrum.suppression.items()):
            out[f"suppression_db@{off:+.0f}"] = level
    for note in res.notes:
        key, _, value = note.partition("=")
        out[key] = value
    return out


def write_artifacts(res: ChainResult, out_dir: str) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    written = []

    def path(name):
        p = os.path.join(out_dir, name)
        written.append(p)
        return p

    outs = res.scenario.outputs
    if "constellation" in outs:
        write_evm_csv(path("constellation.csv"), res.evm, res.demod.points)
    if "demod" in outs:
        write_demod_csv(path("demod.csv"), res.demod)
    if "frame" in outs:
        write_frame_csv(path("frame.csv"), res.frame, res.trajectory)
    if "windows" in outs:
        traj = res.trajectory
        report = None
        if traj.node_edges is not None:
            report = check_window_alignment(traj.windows, traj.node_edges)
        write_windows_csv(path("windows.csv"), traj.windows, report)
    if "waveform" in outs:
        write_waveform_csv(path("waveform.csv"), res.waveform)
    if "spectrum" in outs and res.spectrum is not None:
        write_spectrum_csv(path("spectrum.csv"), res.spectrum)
    if "summary" in outs:
        with open(path("run_summary"), "w", newline="\n") as fh:
            fh.write(format_summary(summary_values(res)))
    return written


# ---------------------------------------------------------------------------
# subcommands


def _base_sim(args) -> tuple[SimConfig, dict]:
    base = scaled_profile() if args.profile == "scaled" else nominal_profile()
    if args.config:
        try:
            with open(args.config) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc.strerror}") from None
        doc = cfgtext.parse_config(text, base)
        sim, scenario = doc.sim, doc.scenario
    else:
        sim, scenario = base, {}
    if args.seed is not None:
        sim = replace(sim, rng_seed=args.seed, impairments=replace(sim.impairments, seed=args.seed))
    return validate_config(sim), scenario


def _scenario(args, **extra) -> Scenario:
    sim, values = _base_sim(args)
    outputs = None
    if getattr(args, "outputs", None):
        outputs = frozenset(s.strip() for s in args.outputs.split(",") if s.strip())
    return scenario_from_text(
        values, sim,
        mode=get_mode(args.mode) if getattr(args, "mode", None) else None,
        n_symbols=getattr(args, "n_symbols", None),
        model=_model_name(args.model) if args.model else None,
        outputs=outputs,
        **extra)


def cmd_simulate(args) -> int:
    scn = _scenario(args)
    res = run_chain(scn)
    write_artifacts(res, args.out)
    print(format_summary(summary_values(res)), end="")
    return 0


def cmd_spectrum(args) -> int:
    scn = _scenario(args, pattern=args.pattern)
    scn = replace(scn, outputs=scn.outputs | {"spectrum"})
    res = run_chain(scn)
    write_artifacts(res, args.out)
    for off, level in sorted(res.spectrum.suppression.items()):
        print(f"suppression_db@{off:+.0f}={level!r}")
    return 0


def cmd_calibrate(args) -> int:
    sim, _ = _base_sim(args)
    osc, ctl = sim.osc, sim.control
    target = args.target_lsb
    c_circ = calibrate_cdis(osc, target, "circuit", ctl)
    isf = calibrate_isf(osc, ctl)
    c_phase = calibrate_cdis(osc, target, "phase_domain", ctl, isf=isf)
    r_circ = circuit_trigger_shift(replace(osc, c_dis=c_circ), ctl) - target
    r_phase = math.degrees(phase_shift_per_trigger(replace(osc, c_dis=c_phase), isf, isf.peak_phase)) - target
    chosen = c_circ if (args.model or "circuit") == "circuit" else c_phase
    lines = [
        f"c_dis_circuit={c_circ!r}",
        f"c_dis_phase_domain={c_phase!r}",
        f"residual_deg_circuit={r_circ!r}",
        f"residual_deg_phase_domain={r_phase!r}",
        f"relative_difference={abs(c_circ - c_phase) / c_circ!r}",
    ]
    print("\n".join(lines))
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "calibration.cfg"), "w", newline="\n") as fh:
        fh.write(f"# c_dis for a {target!r} deg trigger\nosc.c_dis = {chosen!r}\n")
    return 0


def _sweep_row(job):
    """One sweep row; top-level so process pools can pickle it."""
    scn, axis, value = job
    res = run_chain(scn)
    sup = res.spectrum.suppression if res.spectrum is not None else {}
    return {
        "value": value,
        "evm_rms_percent": res.evm.evm_rms_percent,
        "ser": res.rates["ser"],
        "ber": res.rates["ber"],
        "freq_offset_hz": res.cdr.freq_offset,
        "suppression_dbc": max(sup.values()) if sup else float("nan"),
    }


def row_seed(master: int, index: int) -> int:
    """Seed of sweep row ``index``, derived from the master seed."""
    return int(np.random.SeedSequence([master, index]).generate_state(1)[0])


def sweep_jobs(scn: Scenario, axis: str, values, common_seed: bool = False) -> list:
    jobs = []
    for i, value in enumerate(values):
        seed = scn.sim.rng_seed if common_seed else row_seed(scn.sim.rng_seed, i)
        sim = replace(scn.sim, rng_seed=seed, impairments=replace(scn.sim.impairments, seed=seed))
        if axis in ("mode", "scenario.mode"):
            row = replace(scn, sim=sim, mode=get_mode(value))
        elif axis in ("model", "scenario.model"):
            row = replace(scn, sim=sim, model=_model_name(value))
        elif axis.startswith("scenario."):
            key = axis.split(".", 1)[1]
            parsed = scenario_from_text({key: value}, sim, mode=scn.mode)
            row = replace(scn, sim=sim, **{key: getattr(parsed, key)})
        else:
            doc = cfgtext.parse_config(f"{axis} = {value}", sim)
            row = replace(scn, sim=validate_config(doc.sim))
        jobs.append((row, axis, value))
    return jobs


def run_sweep(scn: Scenario, axis: str, values, jobs: int = 1, common_seed: bool = False) -> list[dict]:
    """Rows in input order; each row has its own seed unless ``common_seed``."""
    work = sweep_jobs(scn, axis, values, common_seed)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_sweep_row, work))
    return [_sweep_row(j) for j in work]


def value_for_target(values, metric, target: float) -> float:
    """Log-log interpolation of the axis value where ``metric`` reaches ``target``."""
    x = np.log(np.asarray(values, dtype=float))
    y = np.log(np.asarray(metric, dtype=float))
    order = np.argsort(y)
    lt = math.log(target)
    if not y[order[0]] <= lt <= y[order[-1]]:
        raise ModelError(f"target {target} lies outside the swept range "
                         f"[{math.exp(y[order[0]]):.4g}, {math.exp(y[order[-1]]):.4g}]")
    return float(math.exp(np.interp(lt, y[order], x[order])))


def cmd_sweep(args) -> int:
    scn = _scenario(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values is empty")
    rows = run_sweep(scn, args.axis, values, args.jobs, args.common_seed)
    os.makedirs(args.out, exist_ok=True)
    cols = ["value", "evm_rms_percent", "ser", "ber", "freq_offset_hz", "suppression_dbc"]
    with open(os.path.join(args.out, "sweep.csv"), "w", newline="\n") as fh:
        fh.write(f"{args.axis}," + ",".join(cols[1:]) + "\n")
        for r in rows:
            fh.write(",".join([r["value"]] + [repr(float(r[c])) for c in cols[1:]]) + "\n")
    for r in rows:
        print(f"{args.axis}={r['value']} evm_rms_percent={r['evm_rms_percent']:.4f} ser={r['ser']!r}")
    if args.target_evm is not None:
        numeric = [float(cfgtext.parse_number(v, args.axis)) for v in values]
        found = value_for_target(numeric, [r["evm_rms_percent"] for r in rows], args.target_evm)
        print(f"{args.axis}_for_evm_{args.target_evm:g}={found!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="config file (section.key = value)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed")
    common.add_argument("--model", choices=["circuit", "phase"], default=argparse.SUPPRESS)
    common.add_argument("--profile", choices=["nominal", "scaled"], default=argparse.SUPPRESS,
                        help="base parameter set before the config file is applied")

    p = argparse.ArgumentParser(prog="ringdpsk", parents=[common],
                                description="Ring-oscillator multi-DPSK transmitter simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    def scenario_args(sp):
        sp.add_argument("--mode", help="16DPSK, 8DPSK, QDPSK or DBPSK")
        sp.add_argument("--n-symbols", type=int, dest="n_symbols",
                        help="transmitted symbols including the reference")
        sp.add_argument("--outputs", help=f"comma list from {','.join(OUTPUT_KEYS)}")

    sp = sub.add_parser("simulate", parents=[common], help="run the full chain once")
    scenario_args(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("calibrate", parents=[common], help="find c_dis for the target LSB")
    sp.add_argument("--target-lsb", type=float, default=22.5, dest="target_lsb", help="degrees")
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("sweep", parents=[common], help="metrics versus one parameter")
    scenario_args(sp)
    sp.add_argument("--axis", required=True, help="parameter path, e.g. impairments.freq_drift_ppm or mode")
    sp.add_argument("--values", required=True, help="comma-separated values")
    sp.add_argument("--jobs", type=int, default=1, help="worker processes")
    sp.add_argument("--common-seed", action="store_true", dest="common_seed",
                    help="use the master seed in every row instead of per-row seeds")
    sp.add_argument("--target-evm", type=float, dest="target_evm",
                    help="also report the axis value where EVM reaches this percentage")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("spectrum", parents=[common], help="PSD and sideband levels")
    scenario_args(sp)
    sp.add_argument("--pattern", choices=["idle", "random"], default="idle")
    sp.set_defaults(func=cmd_spectrum)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("config", None), ("out", "."), ("seed", None), ("model", None),
                          ("profile", "nominal")):
        if not hasattr(args, name):
            setattr(args, name, default)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ModelError, ValueError, ArithmeticError) as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
