"""Labelled binaural scene synthesis.

Pipeline per scene: each source signal is rendered through the HRIR pair of
its direction, convolved with the room impulse response of its position
(image method, uniform wall reflection derived from Sabine's formula), the
sources are summed and diffuse babble is added at the requested SNR.
"""
from __future__ import annotations

import functools
import math
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import signal

from .dsp import CLIP_SAMPLES, SAMPLE_RATE, read_wav, write_wav
from .geometry import Doa, SectorGrid, TargetGrid, azimuth_separation, encode_targets, synthesis_doa_grid

SPEED_OF_SOUND = 343.0
HEAD_RADIUS = 0.07  # half the 0.14 m inter-microphone distance
SOURCE_DISTANCE = 1.0
WALL_MARGIN = 0.5
MIN_SEPARATION_DEG = 45.0


class AbsorptionInfeasible(UserWarning):
    pass


class PositionOutOfRoom(ValueError):
    pass


class SeparationViolation(ValueError):
    pass


class MissingHrir(KeyError):
    pass


class SilentNoise(ValueError):
    pass


@dataclass(frozen=True)
class Room:
    dims: tuple[float, float, float]
    t60: float
    speed_of_sound: float = SPEED_OF_SOUND

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(float(d) for d in self.dims))
        if len(self.dims) != 3 or min(self.dims) <= 0:
            raise ValueError(f"room dims must be three positive lengths, got {self.dims}")
        if self.t60 < 0:
            raise ValueError("t60 must be non-negative")

    @property
    def volume(self) -> float:
        lx, ly, lz = self.dims
        return lx * ly * lz

    @property
    def surface(self) -> float:
        lx, ly, lz = self.dims
        return 2 * (lx * ly + lx * lz + ly * lz)

    def to_dict(self):
        return {"dims": list(self.dims), "t60": self.t60}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["dims"]), float(d["t60"]))


# Seen/unseen pairs of room configurations (dims in m, T60 in s)
SEEN_ROOMS = {
    "small-a": Room((5, 5, 3), 0.3),
    "medium-a": Room((10, 8, 4), 0.5),
    "large-a": Room((15, 10, 5), 0.7),
}
UNSEEN_ROOMS = {
    "small-b": Room((6, 6, 4), 0.4),
    "medium-b": Room((12, 10, 5), 0.6),
    "large-b": Room((13, 9, 5), 0.8),
}
ROOMS = {**SEEN_ROOMS, **UNSEEN_ROOMS}


def sabine_reflection_coeff(room: Room) -> float:
    """Uniform wall reflection coefficient reproducing ``room.t60`` (Sabine)."""
    if room.t60 == 0:
        return 0.0
    alpha = 0.161 * room.volume / (room.t60 * room.surface)
    if alpha > 1.0:
        warnings.warn(
            f"T60={room.t60}s needs absorption {alpha:.3f} > 1 in a {room.dims} room; using anechoic walls",
            AbsorptionInfeasible,
            stacklevel=2,
        )
        return 0.0
    return min(math.sqrt(1.0 - alpha), 0.999)


def _axis_images(src: float, length: int | float, n_max: int):
    n = np.arange(-n_max, n_max + 1)
    pos = np.concatenate((src + 2 * n * length, -src + 2 * n * length))
    count = np.concatenate((2 * np.abs(n), np.abs(n - 1) + np.abs(n)))
    return pos, count


def image_method_rir(
    room: Room,
    src_pos,
    mic_pos,
    max_order: int = 20,
    fs: int = SAMPLE_RATE,
    beta: float | None = None,
    highpass: bool = True,
) -> np.ndarray:
    """Image-source room impulse response with integer-sample delays.

    Every image with at most ``max_order`` wall reflections contributes
    ``beta**reflections / (4 pi d)`` at sample ``round(d fs / c)``. The
    response is truncated at ``1.2 * T60`` (never before the direct path).

    Same-signed taps binned to integer delays pile up a low-frequency
    pedestal that stretches the decay; with ``highpass`` the reverberant
    response goes through the Allen & Berkley 100 Hz high-pass, which
    leaves samples up to and including the direct path unchanged.
    """
    src = np.asarray(src_pos, dtype=float)
    mic = np.asarray(mic_pos, dtype=float)
    dims = np.asarray(room.dims)
    for p, name in ((src, "source"), (mic, "microphone")):
        if p.shape != (3,) or np.any(p <= 0) or np.any(p >= dims):
            raise PositionOutOfRoom(f"{name} position {p.tolist()} not strictly inside room {room.dims}")
    if max_order < 0:
        raise ValueError("max_order must be >= 0")
    if beta is None:
        beta = sabine_reflection_coeff(room)
    c = room.speed_of_sound

    d_direct = float(np.linalg.norm(src - mic))
    direct_delay = int(round(d_direct * fs / c))
    length = max(int(math.ceil(1.2 * room.t60 * fs)), direct_delay + 1)
    if beta == 0.0:
        max_order = 0
    # images further than this arrive after truncation
    d_max = length * c / fs

    n_max = max_order // 2 + 1
    axes = [_axis_images(src[k], dims[k], n_max) for k in range(3)]
    rir = np.zeros(length)
    (px, cx), (py, cy), (pz, cz) = axes
    dx2 = (px - mic[0]) ** 2
    dy2 = (py - mic[1]) ** 2
    dz2 = (pz - mic[2]) ** 2
    # loop over x images to bound memory; y/z broadcast
    for i in range(px.size):
        order = cx[i] + cy[:, None] + cz[None, :]
        d = np.sqrt(dx2[i] + dy2[:, None] + dz2[None, :])
        keep = (order <= max_order) & (d < d_max)
        if not keep.any():
            continue
        d = d[keep]
        delay = np.rint(d * fs / c).astype(int)
        ok = delay < length
        amp = beta ** order[keep][ok] / (4 * np.pi * d[ok])
        rir += np.bincount(delay[ok], weights=amp, minlength=length)
    if highpass and max_order > 0:
        rir = allen_berkley_highpass(rir, fs)
    return rir


def allen_berkley_highpass(x: np.ndarray, fs: int = SAMPLE_RATE, cutoff: float = 100.0) -> np.ndarray:
    w = 2 * np.pi * cutoff / fs
    r1 = math.exp(-w)
    b1, b2 = 2 * r1 * math.cos(w), -r1 * r1
    return signal.lfilter([1.0, -(1.0 + r1), r1], [1.0, -b1, -b2], x)


def schroeder_t60(rir: np.ndarray, fs: int = SAMPLE_RATE, lo_db: float = -5.0, hi_db: float = -25.0) -> float:
    """Reverberation time from a line fit to the Schroeder decay curve (T20)."""
    energy = np.cumsum(rir[::-1] ** 2)[::-1]
    edc = 10 * np.log10(energy / energy[0] + 1e-300)
    sel = np.nonzero((edc <= lo_db) & (edc >= hi_db))[0]
    if sel.size < 2:
        raise ValueError("decay curve does not span the fit range")
    t = sel / fs
    slope, _ = np.polyfit(t, edc[sel], 1)
    return -60.0 / slope


# -- HRIRs ----------------------------------------------------------------------

HRIR_LEN = 64


def _frac_delay(delay: float, n: int = HRIR_LEN, half: int = 16) -> np.ndarray:
    """Windowed-sinc fractional delay filter."""
    t = np.arange(n) - delay
    h = np.sinc(t) * np.where(np.abs(t) <= half, 0.5 * (1 + np.cos(np.pi * t / half)), 0.0)
    return h


# pinna events of the structural HRIR model: reflection coefficient, delay
# amplitude and offset (samples at 44.1 kHz), polar-angle scale
PINNA_RHO = (0.5, -1.0, 0.5, -0.25, 0.25)
PINNA_A = (1.0, 5.0, 5.0, 5.0, 5.0)
PINNA_B = (2.0, 4.0, 7.0, 11.0, 13.0)
PINNA_D = (1.0, 0.5, 0.5, 0.5, 0.5)
PINNA_RATE = 16000.0  # time base of PINNA_A / PINNA_B; the 44.1 kHz table stretched so notches fall below 8 kHz


def interaural_polar(doa: Doa) -> tuple[float, float]:
    """(lateral, polar) angles in degrees; lateral > 0 towards the left ear,
    polar 0 front, 90 above, 180 behind, in [-90, 270)."""
    x, y, z = doa.unit_vector()
    lateral = math.degrees(math.asin(max(-1.0, min(1.0, y))))
    polar = math.degrees(math.atan2(z, x))
    if polar < -90.0:
        polar += 360.0
    return lateral, polar


def _head_shadow(theta_ear: float, fs: int) -> tuple[np.ndarray, np.ndarray]:
    """One-pole/one-zero spherical-head shadow; ``theta_ear`` is 90 at the ear, -90 opposite."""
    alpha = 1.05 + 0.95 * math.cos(math.radians((90.0 - theta_ear) * 180.0 / 150.0))
    w0 = SPEED_OF_SOUND / HEAD_RADIUS
    return signal.bilinear([alpha / (2 * w0), 1.0], [1.0 / (2 * w0), 1.0], fs)


HRIR_MODELS = ("structural", "spherical")


def synthetic_hrir(doa: Doa, n: int = HRIR_LEN, fs: int = SAMPLE_RATE, model: str = "structural") -> tuple[np.ndarray, np.ndarray]:
    """Synthetic HRIR pair.

    ``spherical``: Woodworth interaural delay and a broadband level
    difference only, so it carries the lateral angle and nothing else.

    ``structural`` (default): each ear gets the same delay, a spherical-head
    shadow filter (frequency-dependent level difference) and pinna echoes
    whose delays follow the ear-relative lateral angle and the polar angle,
    which puts elevation and front/back dependent notches in both ear
    spectra. Rear directions are additionally low-passed by the pinna flap.
    """
    if model not in HRIR_MODELS:
        raise ValueError(f"unknown HRIR model {model!r}; expected one of {HRIR_MODELS}")
    lateral, polar = interaural_polar(doa)
    lat = math.radians(lateral)
    itd = HEAD_RADIUS / SPEED_OF_SOUND * (lat + math.sin(lat)) * fs  # samples, left leads if > 0
    base = 12.0
    if model == "spherical":
        ild_db = 8.0 * math.sin(lat)
        return (
            _frac_delay(base - itd / 2, n) * 10 ** (ild_db / 40),
            _frac_delay(base + itd / 2, n) * 10 ** (-ild_db / 40),
        )
    rear = max(0.0, -doa.unit_vector()[0])
    scale = fs / PINNA_RATE

    def ear(delay, theta_ear):
        h = _frac_delay(delay, n)
        for rho, a, b, d in zip(PINNA_RHO, PINNA_A, PINNA_B, PINNA_D):
            tau = (a * math.cos(math.radians(theta_ear) / 2) * math.sin(math.radians(d * (90.0 - polar))) + b) * scale
            h = h + rho * _frac_delay(delay + tau, n)
        h = signal.lfilter(*_head_shadow(theta_ear, fs), h)
        if rear > 0:
            h = signal.lfilter([1.0 - 0.6 * rear], [1.0, -0.6 * rear], h)
        return h

    return ear(base - itd / 2, lateral), ear(base + itd / 2, -lateral)


class HrirStore:
    """Read-only map from (azimuth, elevation) on a 5 degree grid to HRIR pairs."""

    def __init__(self, table: dict, fs: int = SAMPLE_RATE, step: float = 5.0):
        self.table = {}
        for key, (l, r) in table.items():
            l, r = np.asarray(l, dtype=float), np.asarray(r, dtype=float)
            if l.shape != r.shape:
                raise ValueError(f"HRIR pair at {key} has unequal lengths")
            self.table[self._key(*key)] = (l, r)
        self.fs = fs
        self.step = step

    @staticmethod
    def _key(az, el):
        return (round(float(az) % 360.0, 6), round(float(el), 6))

    def __contains__(self, doa: Doa):
        return self._key(doa.azimuth_deg, doa.elevation_deg) in self.table

    def __len__(self):
        return len(self.table)

    def get(self, doa: Doa) -> tuple[np.ndarray, np.ndarray]:
        try:
            return self.table[self._key(doa.azimuth_deg, doa.elevation_deg)]
        except KeyError:
            raise MissingHrir(f"no HRIR for azimuth {doa.azimuth_deg}, elevation {doa.elevation_deg}") from None

    @classmethod
    def synthetic(cls, step: float = 5.0, el_lo: float = -65.0, el_hi: float = 75.0, model: str = "structural") -> "HrirStore":
        doas = synthesis_doa_grid(step, el_lo, el_hi)
        if not any(d.elevation_deg == 0.0 for d in doas):
            doas += [Doa(a, 0.0) for a in np.arange(0, 360, step)]
        return cls({(d.azimuth_deg, d.elevation_deg): synthetic_hrir(d, model=model) for d in doas}, step=step)

    def save(self, directory):
        """Write mono WAVs plus ``hrirs.txt`` (``azimuth elevation left right`` per line)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        lines = ["# azimuth_deg elevation_deg left_wav right_wav"]
        for (az, el), (l, r) in sorted(self.table.items()):
            stem = f"az{az:06.1f}_el{el:+05.1f}"
            write_wav(directory / f"{stem}_L.wav", l, self.fs)
            write_wav(directory / f"{stem}_R.wav", r, self.fs)
            lines.append(f"{az:g} {el:g} {stem}_L.wav {stem}_R.wav")
        (directory / "hrirs.txt").write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, manifest) -> "HrirStore":
        manifest = Path(manifest)
        table = {}
        fs = SAMPLE_RATE
        for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ValueError(f"{manifest}:{lineno}: expected 4 fields, got {len(parts)}")
            az, el = float(parts[0]), float(parts[1])
            l, fs_l = read_wav(manifest.parent / parts[2])
            r, fs_r = read_wav(manifest.parent / parts[3])
            if fs_l != SAMPLE_RATE or fs_r != SAMPLE_RATE:
                raise ValueError(f"{manifest}:{lineno}: HRIRs must be sampled at {SAMPLE_RATE} Hz")
            table[(az, el)] = (l[0], r[0])
        return cls(table, fs=fs)


# -- rendering -------------------------------------------------------------------

def _fit_length(x: np.ndarray, n: int = CLIP_SAMPLES) -> np.ndarray:
    if x.shape[-1] >= n:
        return x[..., :n]
    pad = [(0, 0)] * (x.ndim - 1) + [(0, n - x.shape[-1])]
    return np.pad(x, pad)


def render_binaural(sig: np.ndarray, hrir_pair, n: int = CLIP_SAMPLES) -> np.ndarray:
    """Convolve a mono signal with an HRIR pair -> ``(2, n)``."""
    sig = np.asarray(sig, dtype=float)
    l, r = hrir_pair
    return np.stack([_fit_length(np.convolve(sig, l), n), _fit_length(np.convolve(sig, r), n)])


def apply_room(channels: np.ndarray, rir: np.ndarray) -> np.ndarray:
    """Convolve both ear channels with the same RIR, keeping the input length."""
    channels = np.atleast_2d(channels)
    n = channels.shape[-1]
    out = signal.oaconvolve(channels, np.asarray(rir, dtype=float)[None, :], axes=-1)
    return out[:, :n]


def signal_power(channels: np.ndarray) -> float:
    """Mean over channels of each channel's average power."""
    channels = np.atleast_2d(channels)
    return float(np.mean(np.mean(channels ** 2, axis=-1)))


def mix_at_snr(speech: np.ndarray, noise: np.ndarray, snr_db: float) -> tuple[np.ndarray, float]:
    """Add ``g * noise`` so that the speech-to-noise power ratio is ``snr_db``.

    Returns ``(mixture, g)``. ``snr_db = inf`` adds nothing.
    """
    speech = np.atleast_2d(speech)
    noise = np.atleast_2d(noise)
    if speech.shape != noise.shape:
        raise ValueError(f"speech {speech.shape} and noise {noise.shape} differ in shape")
    if math.isinf(snr_db) and snr_db > 0:
        return speech.copy(), 0.0
    p_noise = signal_power(noise)
    if p_noise == 0:
        raise SilentNoise("noise has zero power")
    g = math.sqrt(signal_power(speech) / (p_noise * 10 ** (snr_db / 10)))
    return speech + g * noise, g


# -- signal providers ----------------------------------------------------------------

def stable_seed(*parts) -> int:
    return zlib.crc32("/".join(str(p) for p in parts).encode())


def synthetic_speech(signal_id: str, n: int = CLIP_SAMPLES, fs: int = SAMPLE_RATE) -> np.ndarray:
    """Speech-like test signal, a deterministic function of ``signal_id``.

    Voiced segments are harmonic complexes with a wandering f0 and formant
    shaping, gated by a syllable-rate envelope; unvoiced segments are
    high-passed noise bursts.
    """
    rng = np.random.default_rng(stable_seed("speech", signal_id))
    t = np.arange(n) / fs
    f0 = rng.uniform(90, 240) * (1 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t + rng.uniform(0, 6.3)))
    phase = 2 * np.pi * np.cumsum(f0) / fs
    formants = rng.uniform([300, 900, 2000], [900, 2200, 3500])
    k = np.arange(1, 40)[:, None]
    # f0 moves slowly, so the formant weights are evaluated on a 10 ms grid
    coarse = np.arange(0, n, fs // 100)
    fk = k * f0[coarse][None, :]
    amp = np.exp(-0.5 * ((fk[None] - formants[:, None, None]) / 150.0) ** 2).sum(axis=0) + 0.05 / k
    amp *= fk < fs / 2
    amp = np.stack([np.interp(np.arange(n), coarse, a) for a in amp])
    voiced = np.sum(amp * np.sin(k * phase[None, :]), axis=0)
    unvoiced = signal.lfilter([1, -0.95], [1], rng.standard_normal(n))

    # syllable gating: alternating voiced / unvoiced / silent segments
    env_v = np.zeros(n)
    env_u = np.zeros(n)
    pos = int(rng.integers(0, 1600))
    while pos < n:
        seg = int(rng.uniform(0.08, 0.25) * fs)
        kind = rng.choice(3, p=[0.65, 0.2, 0.15])
        win = np.hanning(seg)[: max(0, min(seg, n - pos))]
        if kind == 0:
            env_v[pos : pos + win.size] += win
        elif kind == 1:
            env_u[pos : pos + win.size] += win
        pos += seg
    x = voiced / (np.std(voiced) + 1e-12) * env_v + 0.4 * unvoiced / (np.std(unvoiced) + 1e-12) * env_u
    x += 1e-3 * rng.standard_normal(n)
    return x / (np.max(np.abs(x)) + 1e-12) * 0.5


BABBLE_POOL = 128


@functools.lru_cache(maxsize=BABBLE_POOL)
def _babble_talker(k: int, n: int) -> np.ndarray:
    out = synthetic_speech(f"babble-{k}", n)
    out.setflags(write=False)
    return out


def diffuse_babble(hrirs: HrirStore, rng: np.random.Generator, n_dirs: int = 36, n: int = CLIP_SAMPLES) -> np.ndarray:
    """Diffuse babble: independent talkers rendered from ``n_dirs`` azimuths and summed."""
    out = np.zeros((2, n))
    for az in np.arange(n_dirs) * (360.0 / n_dirs):
        sig = np.roll(_babble_talker(int(rng.integers(BABBLE_POOL)), n), int(rng.integers(n)))
        doa = Doa(round(az / hrirs.step) * hrirs.step, 0.0)
        out += render_binaural(sig, hrirs.get(doa), n)
    return out


# -- scene synthesis -------------------------------------------------------------------

@dataclass
class SceneSpec:
    sources: list  # [(signal_id, Doa)]
    snr_db: float = math.inf
    room: Room | None = None
    seed: int = 0
    min_separation_deg: float = MIN_SEPARATION_DEG

    def validate(self):
        if not 1 <= len(self.sources) <= 3:
            raise ValueError(f"scenes hold 1-3 sources, got {len(self.sources)}")
        doas = [d for _, d in self.sources]
        for a in range(len(doas)):
            for b in range(a + 1, len(doas)):
                sep = azimuth_separation(doas[a].azimuth_deg, doas[b].azimuth_deg)
                if sep < self.min_separation_deg:
                    raise SeparationViolation(
                        f"sources at azimuth {doas[a].azimuth_deg} and {doas[b].azimuth_deg} are {sep} deg apart"
                        f" (minimum {self.min_separation_deg})"
                    )

    def to_dict(self) -> dict:
        return {
            "sources": [{"signal": s, "azimuth": d.azimuth_deg, "elevation": d.elevation_deg} for s, d in self.sources],
            "snr_db": None if math.isinf(self.snr_db) else self.snr_db,
            "room": None if self.room is None else self.room.to_dict(),
            "seed": self.seed,
            "min_separation_deg": self.min_separation_deg,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            sources=[(s["signal"], Doa(s["azimuth"], s["elevation"])) for s in d["sources"]],
            snr_db=math.inf if d.get("snr_db") is None else float(d["snr_db"]),
            room=None if d.get("room") is None else Room.from_dict(d["room"]),
            seed=int(d.get("seed", 0)),
            min_separation_deg=float(d.get("min_separation_deg", MIN_SEPARATION_DEG)),
        )


@dataclass
class BinauralClip:
    left: np.ndarray
    right: np.ndarray
    truth: list
    provenance: SceneSpec
    placement: dict = field(default_factory=dict)

    @property
    def stereo(self) -> np.ndarray:
        return np.stack([self.left, self.right])


def place_in_room(room: Room, doas: Sequence[Doa], rng: np.random.Generator):
    """Random head position with every source 1 m away and >= 0.5 m from walls."""
    dims = np.asarray(room.dims)
    reach = WALL_MARGIN + SOURCE_DISTANCE
    lo = np.minimum(reach, dims / 2)
    hi = np.maximum(dims - reach, dims / 2)
    head = rng.uniform(lo, hi)
    sources = [head + SOURCE_DISTANCE * d.unit_vector() for d in doas]
    for p in sources:
        if np.any(p <= 0) or np.any(p >= dims):
            raise PositionOutOfRoom(f"room {room.dims} too small for a 1 m source radius")
    return head, sources


SignalProvider = Callable[[str], np.ndarray]
NoiseProvider = Callable[[HrirStore, np.random.Generator], np.ndarray]


def synthesize_scene(
    spec: SceneSpec,
    hrirs: HrirStore,
    grid: SectorGrid | None = None,
    signal_provider: SignalProvider = synthetic_speech,
    noise_provider: NoiseProvider = diffuse_babble,
    max_order: int = 20,
) -> tuple[BinauralClip, TargetGrid]:
    """Render one labelled scene; a pure function of ``spec`` and the stores."""
    grid = grid or SectorGrid()
    spec.validate()
    doas = [d for _, d in spec.sources]
    targets = encode_targets(grid, doas)
    rng = np.random.default_rng(spec.seed)

    placement = {}
    if spec.room is not None:
        head, positions = place_in_room(spec.room, doas, rng)
        placement = {"head": head.tolist(), "sources": [p.tolist() for p in positions]}
    mix = np.zeros((2, CLIP_SAMPLES))
    for k, (sig_id, doa) in enumerate(spec.sources):
        dry = render_binaural(_fit_length(np.asarray(signal_provider(sig_id), dtype=float)), hrirs.get(doa))
        if spec.room is not None:
            rir = image_method_rir(spec.room, positions[k], head, max_order=max_order)
            dry = apply_room(dry, rir / rir[rir != 0][0])
        mix += dry
    if not math.isinf(spec.snr_db):
        mix, _ = mix_at_snr(mix, noise_provider(hrirs, rng), spec.snr_db)
    clip = BinauralClip(mix[0], mix[1], doas, spec, placement)
    return clip, targets
