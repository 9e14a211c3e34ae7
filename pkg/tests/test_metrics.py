import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ringdpsk.cli import Scenario, run_chain
from ringdpsk.core import MODES, ConfigError, ImpairmentConfig, get_mode, nominal_profile
from ringdpsk.frontend import Waveform
from ringdpsk.metrics import (
    compute_evm,
    compute_spectrum,
    error_rates,
    format_summary,
    ideal_points,
    read_run_summary,
    write_evm_csv,
    write_run_summary,
    write_spectrum_csv,
)
from ringdpsk.modulator import frame_from_increments

MODE = get_mode("16DPSK")


@pytest.mark.parametrize("mode", list(MODES.values()), ids=list(MODES))
def test_ideal_grid_gives_zero_evm(mode):
    rep = compute_evm(np.tile(ideal_points(mode), 3), mode)
    assert rep.evm_rms_percent == pytest.approx(0.0, abs=1e-12)


def test_rotation_by_a_tenth_radian():
    pts = ideal_points(MODE) * np.exp(0.1j)
    rep = compute_evm(pts, MODE)
    assert rep.evm_rms_percent == pytest.approx(100 * 2 * math.sin(0.05), rel=1e-12)
    assert rep.evm_rms_percent == pytest.approx(9.996, abs=1e-3)


@settings(max_examples=30)
@given(st.floats(0.01, 100))
def test_measured_normalization_is_scale_invariant(scale):
    rng = np.random.default_rng(0)
    pts = ideal_points(MODE)[rng.integers(0, 16, 200)] * np.exp(1j * rng.normal(0, 0.05, 200))
    a = compute_evm(pts, MODE, normalization="measured").evm_rms_percent
    b = compute_evm(scale * pts, MODE, normalization="measured").evm_rms_percent
    assert b == pytest.approx(a, rel=1e-9)


def test_average_and_peak_agree_for_psk():
    rng = np.random.default_rng(1)
    pts = ideal_points(MODE)[rng.integers(0, 16, 50)] + 0.05 * rng.normal(size=50)
    assert (compute_evm(pts, MODE, normalization="average").evm_rms_percent
            == pytest.approx(compute_evm(pts, MODE, normalization="peak").evm_rms_percent, rel=1e-12))


def test_transmitted_reference_sees_decision_errors():
    tx = [1, 2, 3]
    pts = np.exp(1j * np.array([1, 2, 5]) * MODE.lsb_radians)
    assert compute_evm(pts, MODE).evm_rms_percent == pytest.approx(0.0, abs=1e-12)
    rep = compute_evm(pts, MODE, reference="transmitted", tx_increments=tx)
    chord = 2 * math.sin(MODE.lsb_radians)
    assert rep.evm_rms_percent == pytest.approx(100 * chord / math.sqrt(3), rel=1e-12)


def test_evm_input_errors():
    with pytest.raises(ConfigError, match="at least one"):
        compute_evm([], MODE)
    with pytest.raises(ConfigError, match="at least 2"):
        compute_evm([1 + 0j], MODE)
    with pytest.raises(ConfigError, match="one increment per point"):
        compute_evm([1, 1j], MODE, reference="transmitted")
    with pytest.raises(ConfigError, match="normalization"):
        compute_evm([1, 1j], MODE, normalization="rms")


def test_error_rates_perfect_and_one_lsb():
    frame = frame_from_increments([5, 9, 16, 1, 3], MODE)
    assert error_rates(list(frame.symbols), frame) == {"ser": 0.0, "ber": 0.0}
    dec = list(frame.symbols)
    dec[1] = 10
    n = len(dec)
    assert error_rates(dec, frame) == {"ser": 1 / n, "ber": 1 / (4 * n)}


def test_error_rates_random_decisions():
    rng = np.random.default_rng(11)
    tx = rng.integers(1, 17, 20000)
    frame = frame_from_increments(tx.tolist(), MODE)
    dec = (tx - 1 + rng.integers(1, 16, len(tx))) % 16 + 1  # always wrong, uniform otherwise
    rates = error_rates(dec.tolist(), frame)
    assert rates["ser"] == 1.0
    assert rates["ber"] == pytest.approx(0.5 * 16 / 15, abs=0.01)


def test_error_rates_length_mismatch():
    with pytest.raises(ConfigError, match="length mismatch"):
        error_rates([1], frame_from_increments([1, 2], MODE))


def _tone(n=32768, fs=64e6, bins_off=0):
    f = bins_off * fs / 4096
    return Waveform(fs, np.exp(2j * math.pi * f * np.arange(n) / fs), 0.0, 2.4e9)


def test_unmodulated_tone_single_bin():
    rep = compute_spectrum(_tone(), 4096, 8)
    assert rep.freq_bins[rep.carrier_bin] == 0.0
    far = np.abs(np.arange(len(rep.psd_db)) - rep.carrier_bin) >= 2
    assert np.all(rep.psd_db[far] < -60)
    assert rep.resolution == pytest.approx(64e6 / 4096)


def test_parseval():
    # Hann weighting leaves the total exact for a constant-envelope signal
    rng = np.random.default_rng(3)
    s = np.exp(1j * np.cumsum(rng.normal(0, 0.2, 20000)))
    for w in (Waveform(64e6, 1.7 * s, 0.0), _tone(20000, bins_off=3.3)):
        rep = compute_spectrum(w, 4096, 8)
        assert rep.total_power == pytest.approx(np.mean(np.abs(w.samples) ** 2), rel=1e-3)


def test_nfft_larger_than_waveform():
    with pytest.raises(ConfigError, match="larger than the waveform"):
        compute_spectrum(_tone(1000), 4096)


def test_suppression_lookup():
    fs = 64e6
    t = np.arange(65536) / fs
    s = np.exp(1j * 0.1 * np.sin(2 * math.pi * 4e6 * t))
    rep = compute_spectrum(Waveform(fs, s, 0.0), 4096, 8)
    level = rep.suppression_at(4e6, 1e6)
    assert level == pytest.approx(20 * math.log10(0.05), abs=0.3)  # J1(0.1)/J0(0.1)
    assert rep.suppression == {4e6: level}
    with pytest.raises(ConfigError, match="outside"):
        rep.level_at(1e9)


def test_summary_format_round_trip(tmp_path):
    values = {"evm_rms_percent": 0.1 + 0.2, "ser": 0.0, "mode": "16DPSK", "n": 3}
    text = format_summary(values)
    assert text == "evm_rms_percent=0.30000000000000004\nser=0.0\nmode=16DPSK\nn=3\n"
    p = tmp_path / "run_summary"
    write_run_summary(p, values)
    assert p.read_bytes() == text.encode()
    assert read_run_summary(p)["evm_rms_percent"] == "0.30000000000000004"


def test_csv_schemas(tmp_path):
    pts = ideal_points("QDPSK")
    rep = compute_evm(pts, "QDPSK")
    write_evm_csv(tmp_path / "c.csv", rep, pts)
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "symbol_index,i,q,ref_i,ref_q,error_magnitude" and len(lines) == 5
    write_spectrum_csv(tmp_path / "s.csv", compute_spectrum(_tone(8192), 4096, 2))
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "offset_hz,psd_dbc" and len(lines) == 4097


def test_evm_monotone_over_seeded_grid():
    base = nominal_profile()
    grid = np.empty((4, 4))
    for i, d in enumerate([0.0, 1e3, 4e3, 1.6e4]):
        for j, snr in enumerate([40.0, 30.0, 25.0, 20.0]):
            sim = replace(base, impairments=ImpairmentConfig(phase_noise_diffusion=d, awgn_snr_db=snr, seed=5))
            grid[i, j] = run_chain(Scenario(sim, MODE, n_symbols=200)).evm.evm_rms_percent
    assert np.all(np.diff(grid, axis=0) >= 0)  # rising diffusion
    assert np.all(np.diff(grid, axis=1) >= 0)  # falling SNR
