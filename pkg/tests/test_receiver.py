import math
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ringdpsk.core import (
    MODES,
    ImpairmentConfig,
    PhaseAngle,
    ReceiverConfig,
    get_mode,
    nominal_profile,
)
from ringdpsk.frontend import apply_impairments, synthesize_waveform
from ringdpsk.modulator import modulate, random_frame
from ringdpsk.receiver import (
    ReceiverError,
    decide,
    demodulate_dpsk,
    estimate_carrier,
    estimate_symbol_epoch,
    write_demod_csv,
)

SIM = nominal_profile()
MODE = get_mode("16DPSK")


def _wave(n, mode=MODE, seed=0, **imp):
    frame = random_frame(n, mode, np.random.default_rng(seed))
    traj = modulate(frame, SIM)
    w = synthesize_waveform(traj, SIM.sample_rate)
    return frame, apply_impairments(w, ImpairmentConfig(**imp))


@pytest.fixture(scope="module")
def loop1000():
    return _wave(1000)


@pytest.mark.parametrize("deg, mode, k", [
    (Fraction(45, 2), "16DPSK", 1),
    (Fraction(45, 4), "16DPSK", 1),
    (359, "16DPSK", 16),
    (33, "16DPSK", 1),
    (91, "DBPSK", 1),
    (0, "QDPSK", 4),
    (Fraction(135, 2), "8DPSK", 1),
    (Fraction(675, 2), "8DPSK", 7),
])
def test_slicer_examples(deg, mode, k):
    assert decide(PhaseAngle(deg), mode) == k


@pytest.mark.parametrize("mode", list(MODES.values()), ids=list(MODES))
def test_slicer_idempotent(mode):
    for k in range(1, mode.constellation_size + 1):
        assert decide(PhaseAngle(mode.lsb_degrees * k), mode) == k


@given(st.sampled_from(list(MODES)), st.fractions(min_value=0, max_value=360))
def test_slicer_picks_nearest(name, deg):
    mode = get_mode(name)
    k = decide(PhaseAngle(deg), mode)
    dist = [abs(PhaseAngle(deg).diff(PhaseAngle(mode.lsb_degrees * j)))
            for j in range(1, mode.constellation_size + 1)]
    assert dist[k - 1] == min(dist)
    assert k == 1 + dist.index(min(dist)) or dist[k - 1] == min(dist)


def test_slicer_accepts_radians():
    assert decide(math.radians(44.0), "16DPSK") == 2


def test_zero_impairment_offset(loop1000):
    _, w = loop1000
    cdr = estimate_carrier(w, SIM.modem)
    assert abs(cdr.freq_offset) <= 1e-6 * SIM.modem.symbol_rate


def test_offset_240khz():
    _, w = _wave(40, freq_drift_ppm=100)
    cdr = estimate_carrier(w, SIM.modem)
    assert cdr.freq_offset == pytest.approx(240e3, rel=0.01)


def test_offset_beyond_pull_in_reported():
    _, w = _wave(40, freq_drift_ppm=250)  # 600 kHz > symbol_rate / 4
    with pytest.raises(ReceiverError, match="pull-in"):
        estimate_carrier(w, SIM.modem)


def test_too_few_symbols():
    _, w = _wave(5)
    with pytest.raises(ReceiverError, match=">= 8 symbols"):
        estimate_carrier(w, SIM.modem)


def test_empty_settle_window():
    _, w = _wave(20)
    with pytest.raises(ReceiverError, match="settle window"):
        estimate_carrier(w, SIM.modem, ReceiverConfig(settle_start=0.55, settle_stop=0.56))


def test_noiseless_loopback_1000(loop1000):
    frame, w = loop1000
    res = demodulate_dpsk(w, MODE, estimate_carrier(w, SIM.modem), SIM.modem, reference=frame)
    assert len(res) == len(res.soft_diff_phases) == 1000
    assert res.decided_increments == list(frame.symbols)
    assert res.symbol_errors == []


@settings(max_examples=12, deadline=None)
@given(st.floats(-200, 200), st.sampled_from(list(MODES)))
def test_drift_transparency(ppm, name):
    frame, w = _wave(24, get_mode(name), seed=3, freq_drift_ppm=ppm)
    res = demodulate_dpsk(w, name, estimate_carrier(w, SIM.modem), SIM.modem)
    assert res.decided_increments == list(frame.symbols)


@given(st.floats(-10, 10))
@settings(max_examples=10, deadline=None)
def test_rotation_invariance(theta):
    frame, w = _wave(16, seed=4)
    rot = replace(w, samples=w.samples * np.exp(1j * theta))
    a = demodulate_dpsk(w, MODE, estimate_carrier(w, SIM.modem), SIM.modem)
    b = demodulate_dpsk(rot, MODE, estimate_carrier(rot, SIM.modem), SIM.modem)
    assert a.decided_increments == b.decided_increments == list(frame.symbols)


def test_epoch_estimator():
    frame = random_frame(30, MODE, np.random.default_rng(2))
    traj = modulate(frame, SIM)
    Ts = SIM.modem.symbol_period
    w = synthesize_waveform(traj, SIM.sample_rate, t0=traj.symbol_boundaries[0] + 0.3 * Ts,
                            duration=20 * Ts)
    epoch = estimate_symbol_epoch(w, SIM.modem)
    offset = (epoch - traj.symbol_boundaries[0]) / Ts
    assert abs(offset - round(offset)) < 0.05


def test_demod_csv(tmp_path, loop1000):
    frame, w = loop1000
    res = demodulate_dpsk(w, MODE, estimate_carrier(w, SIM.modem), SIM.modem, reference=frame)
    p = tmp_path / "d.csv"
    write_demod_csv(p, res)
    lines = p.read_text().splitlines()
    assert lines[0] == "symbol_index,soft_phase_deg,decided_increment,tx_increment,error_flag"
    assert len(lines) == 1001
    first = lines[1].split(",")
    assert first[2] == first[3] == str(frame.symbols[0]) and first[4] == "0"
