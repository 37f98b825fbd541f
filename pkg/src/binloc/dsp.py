"""Binaural feature front end: log-gammatone spectrograms and GCC-PHAT.

Lag convention for :func:`gcc_phat`: coefficient ``k`` (lags -16..16)
measures ``sum_n left[n] * right[n + k]`` after phase whitening, so a
positive lag means the right channel is delayed, i.e. the left ear leads.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.io import wavfile

SAMPLE_RATE = 16000
CLIP_SAMPLES = 16000
N_BANDS = 64
F_LOW = 50.0
F_HIGH = 8000.0
FRAME_LEN = 800  # 50 ms
FRAME_HOP = 400
LOG_FLOOR = 1e-10
PHAT_FLOOR = 1e-12
MAX_LAG = 16  # +-1 ms at 16 kHz

# Glasberg & Moore ERB parameters
EAR_Q = 9.26449
MIN_BW = 24.7


class LengthMismatch(ValueError):
    pass


def erb_space(low: float = F_LOW, high: float = F_HIGH, n: int = N_BANDS) -> np.ndarray:
    """Centre frequencies equally spaced on the ERB-rate scale, ascending.

    Follows the Auditory Toolbox convention: the lowest centre equals
    ``low`` and the highest sits one ERB step below ``high``.
    """
    c = EAR_Q * MIN_BW
    k = np.arange(1, n + 1)
    cf = -c + np.exp(k * (np.log(low + c) - np.log(high + c)) / n) * (high + c)
    return cf[::-1].copy()


def erb_bandwidth(cf: np.ndarray) -> np.ndarray:
    return cf / EAR_Q + MIN_BW


def gammatone_sos(fs: int = SAMPLE_RATE, cf: np.ndarray | None = None) -> np.ndarray:
    """Second-order sections for a bank of 4th-order gammatone filters.

    Returns an array of shape ``(n_bands, 4, 6)``: four cascaded biquads per
    band, unity gain at each band's centre frequency.
    """
    if cf is None:
        cf = erb_space()
    cf = np.asarray(cf, dtype=float)
    T = 1.0 / fs
    B = 1.019 * 2 * np.pi * erb_bandwidth(cf)
    arg = 2 * cf * np.pi * T
    ebt = np.exp(B * T)
    s_plus, s_minus = np.sqrt(3 + 2 ** 1.5), np.sqrt(3 - 2 ** 1.5)

    a0 = T
    a11 = -(2 * T * np.cos(arg) / ebt + 2 * s_plus * T * np.sin(arg) / ebt) / 2
    a12 = -(2 * T * np.cos(arg) / ebt - 2 * s_plus * T * np.sin(arg) / ebt) / 2
    a13 = -(2 * T * np.cos(arg) / ebt + 2 * s_minus * T * np.sin(arg) / ebt) / 2
    a14 = -(2 * T * np.cos(arg) / ebt - 2 * s_minus * T * np.sin(arg) / ebt) / 2
    b1 = -2 * np.cos(arg) / ebt
    b2 = np.exp(-2 * B * T)

    # exact magnitude of the cascade at cf, used to normalise to unity gain
    z = np.exp(1j * arg)
    den = 1 + b1 / z + b2 / z ** 2
    gain = np.ones_like(cf)
    for a1 in (a11, a12, a13, a14):
        gain = gain * np.abs((a0 + a1 / z) / den)

    sos = np.zeros((cf.size, 4, 6))
    for s, a1 in enumerate((a11, a12, a13, a14)):
        sos[:, s, 0] = a0
        sos[:, s, 1] = a1
        sos[:, s, 3] = 1.0
        sos[:, s, 4] = b1
        sos[:, s, 5] = b2
    sos[:, 0, :3] /= gain[:, None]
    return sos


_DEFAULT_SOS = None


def _default_sos():
    global _DEFAULT_SOS
    if _DEFAULT_SOS is None:
        _DEFAULT_SOS = gammatone_sos()
    return _DEFAULT_SOS


def gammatone_filterbank(wave: np.ndarray, sos: np.ndarray | None = None) -> np.ndarray:
    """Filter a mono waveform into ``(n_bands, len(wave))`` band signals."""
    wave = np.asarray(wave, dtype=float)
    if sos is None:
        sos = _default_sos()
    return np.stack([signal.sosfilt(band, wave) for band in sos])


def frame_log_power(band_signals: np.ndarray, frame_len: int = FRAME_LEN, hop: int = FRAME_HOP) -> np.ndarray:
    """Hamming-windowed frame power per band, natural log, shape ``(T, bands)``."""
    band_signals = np.atleast_2d(band_signals)
    n = band_signals.shape[1]
    n_frames = (n - frame_len) // hop + 1
    win = np.hamming(frame_len)
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = band_signals[:, idx] * win  # (bands, T, frame_len)
    power = np.mean(frames ** 2, axis=-1)
    return np.log(power + LOG_FLOOR).T


def log_gammatone_spectrogram(wave: np.ndarray) -> np.ndarray:
    return frame_log_power(gammatone_filterbank(wave))


def gcc_phat(left: np.ndarray, right: np.ndarray, max_lag: int = MAX_LAG) -> np.ndarray:
    """PHAT-weighted cross-correlation at integer lags ``-max_lag..max_lag``."""
    left = np.asarray(left, dtype=float)
    right = np.asarray(right, dtype=float)
    if left.shape != right.shape:
        raise LengthMismatch(f"channel lengths differ: {left.shape} vs {right.shape}")
    n = 2 * left.shape[-1]
    cross = np.fft.rfft(right, n) * np.conj(np.fft.rfft(left, n))
    cross /= np.maximum(np.abs(cross), PHAT_FLOOR)
    cc = np.fft.irfft(cross, n)
    return np.concatenate((cc[-max_lag:], cc[: max_lag + 1]))


@dataclass
class FeatureSet:
    left: np.ndarray  # (T, bands)
    right: np.ndarray
    cc: np.ndarray  # (2*MAX_LAG + 1,)

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise ValueError(f"left/right spectrogram shapes differ: {self.left.shape} vs {self.right.shape}")

    @property
    def shapes(self):
        return self.left.shape, self.right.shape, self.cc.shape


def extract_features(left: np.ndarray, right: np.ndarray) -> FeatureSet:
    left = np.asarray(left, dtype=float)
    right = np.asarray(right, dtype=float)
    if left.shape != right.shape:
        raise LengthMismatch(f"channel lengths differ: {left.shape} vs {right.shape}")
    return FeatureSet(log_gammatone_spectrogram(left), log_gammatone_spectrogram(right), gcc_phat(left, right))


# -- feature record on disk ---------------------------------------------------
#
#   magic   4 bytes  b"BLFS"
#   version uint32   1
#   count   uint32   number of arrays (3: left, right, cc)
#   per array: ndim uint32, then ndim x uint32 dims
#   payload: float32 little-endian, row-major, arrays in header order

FEATURE_MAGIC = b"BLFS"
FEATURE_VERSION = 1


def write_features(path, fs: FeatureSet):
    arrays = [fs.left, fs.right, fs.cc]
    header = [FEATURE_MAGIC, struct.pack("<II", FEATURE_VERSION, len(arrays))]
    for a in arrays:
        header.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)
    Path(path).write_bytes(b"".join(header) + payload)


def read_features(path) -> FeatureSet:
    buf = Path(path).read_bytes()
    if buf[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature record")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FEATURE_VERSION:
        raise ValueError(f"{path}: unsupported feature record version {version}")
    off = 12
    shapes = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        shapes.append(struct.unpack_from(f"<{ndim}I", buf, off))
        off += 4 * ndim
    arrays = []
    for shape in shapes:
        size = int(np.prod(shape))
        arrays.append(np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32))
        off += 4 * size
    if off != len(buf):
        raise ValueError(f"{path}: trailing or missing payload bytes")
    return FeatureSet(*arrays)


# -- wav io -------------------------------------------------------------------

def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a WAV file as float64 ``(channels, samples)`` in [-1, 1]."""
    rate, data = wavfile.read(path)
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        data = (data.astype(np.float64) - 128.0) / 128.0
    else:
        data = data.astype(np.float64)
    data = data.T if data.ndim == 2 else data[None, :]
    return data, rate


def write_wav(path, channels: np.ndarray, rate: int = SAMPLE_RATE):
    """Write ``(channels, samples)`` as 32-bit float PCM."""
    channels = np.atleast_2d(np.asarray(channels, dtype=np.float32))
    wavfile.write(path, rate, channels.T if channels.shape[0] > 1 else channels[0])
