import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from portmon import dsp

from oracles import STAGE_ANGLES_DEG, naive_filter_decimate


def kaiser_window_oracle(n, beta):
    """Kaiser window from the power series of I0, no library window code."""

    def i0(x):
        term, total, k = 1.0, 1.0, 1
        while term > 1e-17 * total:
            term *= (x / (2 * k)) ** 2
            total += term
            k += 1
        return total

    m = n - 1
    return np.array([i0(beta * math.sqrt(1 - (2 * i / m - 1) ** 2)) / i0(beta) for i in range(n)])


def dtft_db(h, f, fs):
    n = np.arange(len(h))
    return 20 * np.log10(abs(np.sum(h * np.exp(-2j * np.pi * f / fs * n))))


@pytest.fixture(scope="module")
def fir():
    return dsp.design_kaiser_fir(128, 110.0, 1000.0, 60.0)


# -- FIR design ------------------------------------------------------------------


def test_single_tap_is_unity():
    assert dsp.design_kaiser_fir(1, 110.0, 1000.0).coefficients.tolist() == [1.0]


def test_unity_dc_and_symmetry(fir):
    h = fir.coefficients
    assert abs(h.sum() - 1.0) < 1e-9
    assert np.array_equal(h, h[::-1])
    assert fir.num_taps == 128 and len(h) == 128


def test_beta_follows_kaiser_formula(fir):
    # A > 50 dB: beta = 0.1102 (A - 8.7)
    assert fir.kaiser_beta == pytest.approx(0.1102 * (60.0 - 8.7), abs=1e-12)


def test_matches_hand_built_windowed_sinc(fir):
    n = np.arange(128) - 63.5
    fc = 110.0 / 1000.0
    ideal = np.array([2 * fc if x == 0 else math.sin(2 * math.pi * fc * x) / (math.pi * x) for x in n])
    h = ideal * kaiser_window_oracle(128, fir.kaiser_beta)
    h /= h.sum()
    np.testing.assert_allclose(fir.coefficients, h, rtol=0, atol=1e-13)


@pytest.mark.parametrize("f_hz", [200.0, 250.0, 300.0, 400.0, 499.0])
def test_stopband_attenuation(fir, f_hz):
    assert dtft_db(fir.coefficients, f_hz, 1000.0) <= -60.0


def test_passband_is_flat(fir):
    for f in (0.0, 10.0, 50.0):
        assert abs(dtft_db(fir.coefficients, f, 1000.0)) < 0.01


def test_group_delay_from_impulse_peak(fir):
    x = np.zeros(400)
    x[0] = 1.0
    y = np.convolve(x, fir.coefficients)[:400]
    # even length: the two central taps tie, so the delay (N-1)/2 = 63.5 sits between them
    peak = np.flatnonzero(y == y.max())
    assert peak.tolist() == [63, 64]
    assert peak.mean() == (fir.num_taps - 1) / 2


@pytest.mark.parametrize("cutoff", [0.0, -5.0, 500.0, 600.0])
def test_invalid_cutoff(cutoff):
    with pytest.raises(ValueError):
        dsp.design_kaiser_fir(128, cutoff, 1000.0)


def test_zero_taps_rejected():
    with pytest.raises(ValueError):
        dsp.design_kaiser_fir(0, 110.0, 1000.0)


def test_coefficients_export_round_trip(fir):
    back = np.array([float(v) for v in fir.to_text().split()])
    assert np.array_equal(back, fir.coefficients)


# -- filter and decimate -------------------------------------------------------------


def test_matches_naive_oracle(fir):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((10_000, 3))
    t = np.arange(10_000) / 1000.0
    td, y = dsp.stream_filter_decimate(t, x, fir, 10)
    assert len(td) == 1000
    for ch in range(3):
        np.testing.assert_allclose(y[:, ch], naive_filter_decimate(x[:, ch], fir.coefficients, 10), rtol=0, atol=1e-12)
    np.testing.assert_array_equal(td, t[9::10])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 700), min_size=1, max_size=8), st.integers(1, 12))
def test_block_splitting_is_invisible(cuts, factor):
    """Streaming in arbitrary blocks gives the one-shot result."""
    fir = dsp.default_fir()
    rng = np.random.default_rng(len(cuts) * 31 + factor)
    x = rng.standard_normal((1500, 2))
    t = np.arange(1500) / 1000.0
    ref_t, ref = dsp.stream_filter_decimate(t, x, fir, factor)
    dec = dsp.FirDecimator(fir, factor, channels=2)
    edges = sorted({0, 1500, *(min(c * 2, 1500) for c in cuts)})
    parts = [dec.process(t[a:b], x[a:b]) for a, b in zip(edges[:-1], edges[1:])]
    got_t = np.concatenate([p[0] for p in parts])
    got = np.concatenate([p[1] for p in parts])
    np.testing.assert_array_equal(got_t, ref_t)
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)
    assert len(got) == 1500 // factor


def test_constant_input_after_warmup(fir):
    x = np.ones(1000)
    _, y = dsp.stream_filter_decimate(np.arange(1000) / 1000.0, x, fir, 10)
    assert len(y) == 100
    skip = -(-fir.num_taps // 10)  # outputs that still see the zero-primed delay line
    np.testing.assert_allclose(y[skip:, 0], 1.0, atol=1e-9)


def test_300hz_sine_is_rejected(fir):
    t = np.arange(5000) / 1000.0
    _, y = dsp.stream_filter_decimate(t, np.sin(2 * np.pi * 300 * t), fir, 10)
    assert np.max(np.abs(y[13:])) <= 1e-3


def test_factor_zero_rejected(fir):
    with pytest.raises(ValueError):
        dsp.FirDecimator(fir, 0)


# -- tilt ------------------------------------------------------------------------------


def test_tilt_examples():
    s = dsp.estimate_tilt(dsp.AccelFrame(0.0, 0.0, 0.0, 1.0))
    assert (s.pitch_deg, s.roll_deg) == (0.0, 0.0)
    s = dsp.estimate_tilt(dsp.AccelFrame(0.0, 0.5, 0.0, 0.8660254))
    assert s.pitch_deg == pytest.approx(30.0, abs=1e-5)
    assert s.roll_deg == 0.0


def test_zero_vector_rejected():
    with pytest.raises(ValueError):
        dsp.estimate_tilt(dsp.AccelFrame(0.0, 0.0, 0.0, 0.0))


def test_vertical_denominator_gives_90():
    p, r = dsp.tilt_angles(np.array([[1.0, 0.0, 0.0], [-2.0, 0.0, 0.0], [0.0, 3.0, 0.0]]))
    assert p.tolist()[:2] == [90.0, -90.0]
    assert r.tolist()[2] == 90.0


@pytest.mark.parametrize("angle", STAGE_ANGLES_DEG)
def test_stage_rotation_recovered(angle):
    # rotating gravity about y tilts pitch; about x tilts roll
    a = math.radians(angle)
    p, r = dsp.tilt_angles(np.array([math.sin(a), 0.0, math.cos(a)]))
    assert abs(p - angle) < 1e-9 and r == 0.0
    p, r = dsp.tilt_angles(np.array([0.0, math.sin(a), math.cos(a)]))
    assert abs(r - angle) < 1e-9 and p == 0.0


@settings(max_examples=300, deadline=None)
@given(st.floats(-90.0, 90.0))
def test_rotation_about_y_is_exact(alpha):
    a = math.radians(alpha)
    p, _ = dsp.tilt_angles(np.array([math.sin(a), 0.0, math.cos(a)]))
    assert abs(float(p) - alpha) < 1e-9


vec = st.tuples(*[st.floats(-4.0, 4.0, allow_nan=False)] * 3).filter(lambda v: max(map(abs, v)) > 1e-6)


@settings(max_examples=300, deadline=None)
@given(vec, st.floats(1e-3, 1e3))
def test_scale_invariance(v, k):
    p0, r0 = dsp.tilt_angles(np.array(v))
    p1, r1 = dsp.tilt_angles(np.array(v) * k)
    assert abs(p1 - p0) < 1e-9 and abs(r1 - r0) < 1e-9


@settings(max_examples=100, deadline=None)
@given(vec, st.integers(-20, 20))
def test_scale_invariance_exact_for_powers_of_two(v, e):
    p0, r0 = dsp.tilt_angles(np.array(v))
    p1, r1 = dsp.tilt_angles(np.array(v) * 2.0**e)
    assert p1 == p0 and r1 == r0


@settings(max_examples=200, deadline=None)
@given(st.floats(-40, 40), st.floats(-40, 40))
def test_gravity_vector_inverts_tilt(pitch, roll):
    p, r = dsp.tilt_angles(dsp.gravity_vector(pitch, roll))
    assert abs(p - pitch) < 1e-9 and abs(r - roll) < 1e-9


@settings(max_examples=100, deadline=None)
@given(vec)
def test_tilt_range(v):
    p, r = dsp.tilt_angles(np.array(v))
    assert -90.0 <= p <= 90.0 and -90.0 <= r <= 90.0


# -- tilt low-pass -------------------------------------------------------------------------


def steady_amplitude(f_hz, fc=1.0, fs=100.0, seconds=60.0):
    t = np.arange(int(seconds * fs)) / fs
    y = dsp.TiltLowPass(fc, fs).process(np.sin(2 * np.pi * f_hz * t))
    return np.max(np.abs(y[len(y) // 2 :]))


def test_dc_passes():
    y = dsp.TiltLowPass(1.0, 100.0).process(np.full(500, 5.0))
    np.testing.assert_allclose(y, 5.0, atol=1e-6)


def test_stopband_amplitude():
    # continuous first-order prototype: 1/sqrt(1 + 10^2) = 0.0995
    assert steady_amplitude(10.0) <= 0.16


def test_passband_amplitude():
    assert steady_amplitude(0.01, seconds=400.0) >= 0.99


def test_matches_recurrence_oracle():
    rng = np.random.default_rng(3)
    x = rng.standard_normal(300)
    alpha = 1 - math.exp(-2 * math.pi * 1.0 / 100.0)
    y, prev = [], x[0]
    for v in x:
        prev = prev + alpha * (v - prev)
        y.append(prev)
    np.testing.assert_allclose(dsp.TiltLowPass(1.0, 100.0).process(x), y, rtol=0, atol=1e-12)


def test_streaming_equals_one_shot():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((400, 2))
    whole = dsp.TiltLowPass().process(x)
    lpf = dsp.TiltLowPass()
    parts = np.concatenate([lpf.process(x[a:b]) for a, b in [(0, 1), (1, 150), (150, 151), (151, 400)]])
    np.testing.assert_allclose(parts, whole, rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(-10, 10), st.floats(-10, 10))
def test_lowpass_linearity(seed, a, b):
    """For a zero-state start, filtering is linear in the input."""
    rng = np.random.default_rng(seed)
    x1 = np.concatenate([[0.0], rng.standard_normal(200)])
    x2 = np.concatenate([[0.0], rng.standard_normal(200)])
    f = lambda x: dsp.TiltLowPass().process(x)
    np.testing.assert_allclose(f(a * x1 + b * x2), a * f(x1) + b * f(x2), rtol=0, atol=1e-9)


@pytest.mark.parametrize("fc", [0.0, -1.0, 50.0, 80.0])
def test_lowpass_rejects_bad_cutoff(fc):
    with pytest.raises(ValueError):
        dsp.TiltLowPass(fc, 100.0)


def test_lowpass_tilt_samples():
    samples = [dsp.TiltSample(i / 100, 2.0, -3.0) for i in range(50)]
    out = dsp.lowpass_tilt(samples)
    assert [s.t for s in out] == [s.t for s in samples]
    assert all(s.pitch_deg == pytest.approx(2.0) and s.roll_deg == pytest.approx(-3.0) for s in out)


# -- noise statistics ---------------------------------------------------------------------


def test_noise_rmse_examples():
    assert dsp.noise_rmse([1, 1, 1, 1]).rmse == 0.0
    assert dsp.noise_rmse([1, -1, 1, -1]).rmse == 1.0
    assert dsp.noise_rmse([1, -1, 1, -1]).count == 4
    with pytest.raises(ValueError):
        dsp.noise_rmse([1.0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=50), st.floats(-1e3, 1e3))
def test_noise_rmse_translation_invariant(x, c):
    a = dsp.noise_rmse(x).rmse
    b = dsp.noise_rmse(np.array(x) + c).rmse
    assert a >= 0
    assert b == pytest.approx(a, abs=1e-9)


# -- whole chain ------------------------------------------------------------------------------


def test_chain_rows_layout():
    t = np.arange(2000) / 1000.0
    acc = np.tile(dsp.gravity_vector(0.5, -0.25), (2000, 1))
    chain = dsp.AcquisitionChain()
    chain.prime(t[:130] - 0.13, acc[:130])
    rows = chain.process(t, acc)
    assert rows.shape == (200, 6)
    np.testing.assert_array_equal(rows[:, 0], t[9::10])
    np.testing.assert_allclose(rows[:, 1:4], np.tile(acc[0] * 1000.0, (200, 1)), rtol=0, atol=1e-9)
    np.testing.assert_allclose(rows[:, 4], -0.25, atol=1e-9)
    np.testing.assert_allclose(rows[:, 5], 0.5, atol=1e-9)
