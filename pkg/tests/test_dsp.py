import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from binloc import dsp
from binloc.dsp import (
    LOG_FLOOR,
    LengthMismatch,
    erb_space,
    extract_features,
    frame_log_power,
    gammatone_filterbank,
    gcc_phat,
    read_features,
    read_wav,
    write_features,
    write_wav,
)

FS = dsp.SAMPLE_RATE


def noise(seed, n=FS):
    return np.random.default_rng(seed).standard_normal(n)


def test_erb_space_monotone_and_range():
    cf = erb_space()
    assert cf.shape == (64,)
    assert np.all(np.diff(cf) > 0)
    assert cf[0] == pytest.approx(50.0) and cf[-1] < 8000.0


def test_impulse_response_peaks_at_centre():
    imp = np.zeros(FS)
    imp[0] = 1.0
    bands = gammatone_filterbank(imp)
    cf = erb_space()
    # independent oracle: direct DFT on a fine grid around each centre
    n = np.arange(FS)
    for b in range(0, 64, 7):
        f = np.linspace(0.7 * cf[b], 1.3 * cf[b], 601)
        mag = np.abs(np.exp(-2j * np.pi * np.outer(f, n[:4000]) / FS) @ bands[b, :4000])
        assert abs(f[np.argmax(mag)] - cf[b]) / cf[b] <= 0.03


def test_filterbank_zero_and_tone():
    assert not gammatone_filterbank(np.zeros(FS)).any()
    t = np.arange(FS) / FS
    bands = gammatone_filterbank(np.sin(2 * np.pi * 1000 * t))
    rms = np.sqrt(np.mean(bands[:, FS // 2 :] ** 2, axis=1))
    assert np.argmax(rms) == np.argmin(np.abs(erb_space() - 1000))


def test_frame_log_power_shape_and_floor():
    spec = frame_log_power(np.zeros((64, FS)))
    assert spec.shape == (39, 64)
    np.testing.assert_allclose(spec, np.log(LOG_FLOOR))


def test_frame_log_power_scaling():
    x = gammatone_filterbank(noise(1))
    a, b = frame_log_power(x), frame_log_power(2 * x)
    np.testing.assert_allclose(b - a, np.log(4), atol=1e-6)


def test_frame_log_power_oracle():
    x = noise(2, 2000)[None]
    spec = frame_log_power(x)
    frame = x[0, 400:1200] * np.hamming(800)
    assert spec[1, 0] == pytest.approx(np.log(np.mean(frame ** 2) + LOG_FLOOR))


def _delayed(x, d):
    y = np.zeros_like(x)
    if d >= 0:
        y[d:] = x[: len(x) - d]
    else:
        y[:d] = x[-d:]
    return y


def test_gcc_sign_convention_matches_direct_correlation():
    burst = noise(3)
    right = _delayed(burst, 8)
    cc = gcc_phat(burst, right)
    lags = np.arange(-16, 17)
    assert lags[np.argmax(cc)] == 8
    # direct time-domain normalized cross-correlation as oracle
    direct = [np.dot(burst[max(0, -k): FS - max(0, k)], right[max(0, k): FS - max(0, -k)]) for k in lags]
    assert lags[np.argmax(direct)] == 8


def test_gcc_identity_and_inversion():
    x = noise(4)
    cc = gcc_phat(x, x)
    assert np.argmax(cc) == 16 and cc[16] == pytest.approx(1.0, abs=1e-6)
    cc = gcc_phat(x, -x)
    assert np.argmax(np.abs(cc)) == 16 and cc[16] < 0
    with pytest.raises(LengthMismatch):
        gcc_phat(x, x[:-1])


@given(st.integers(-16, 16), st.integers(0, 2**31))
def test_gcc_recovers_delay(d, seed):
    x = noise(seed)
    assert np.argmax(gcc_phat(x, _delayed(x, d))) - 16 == d


def test_extract_features_shapes_and_symmetry():
    l, r = noise(5), 0.5 * noise(6)
    fs = extract_features(l, r)
    assert fs.shapes == ((39, 64), (39, 64), (33,))
    sw = extract_features(r, l)
    np.testing.assert_array_equal(sw.left, fs.right)
    np.testing.assert_array_equal(sw.right, fs.left)
    np.testing.assert_allclose(sw.cc, fs.cc[::-1], atol=1e-12)
    same = extract_features(l, l)
    assert np.argmax(same.cc) == 16


def test_feature_record_roundtrip(tmp_path):
    fs = extract_features(noise(7), noise(8))
    write_features(tmp_path / "a.feat", fs)
    back = read_features(tmp_path / "a.feat")
    np.testing.assert_allclose(back.left, fs.left, rtol=1e-6)
    np.testing.assert_allclose(back.cc, fs.cc, rtol=1e-5, atol=1e-7)
    (tmp_path / "b.feat").write_bytes(b"nope")
    with pytest.raises(ValueError):
        read_features(tmp_path / "b.feat")


def test_wav_roundtrip(tmp_path):
    x = np.stack([noise(9), noise(10)]) * 0.1
    write_wav(tmp_path / "x.wav", x)
    y, rate = read_wav(tmp_path / "x.wav")
    assert rate == FS and y.shape == (2, FS)
    np.testing.assert_allclose(y, x, atol=1e-7)
