"""Binaural room impulse responses: synthesis and direct/reverberant split."""

from dataclasses import dataclass

import numpy as np

from gengap.audio import SAMPLE_RATE

MAX_ITD_S = 0.0007
MAX_ILD_DB = 10.0


@dataclass(frozen=True)
class Brir:
    left: np.ndarray
    right: np.ndarray
    sample_rate: int = SAMPLE_RATE
    room_label: str = ""
    azimuth: float = 0.0

    def __post_init__(self):
        if len(self.left) != len(self.right):
            raise ValueError("BRIR channels differ in length")
        if not (np.all(np.isfinite(self.left)) and np.all(np.isfinite(self.right))):
            raise ValueError("BRIR contains non-finite samples")

    @classmethod
    def from_array(cls, data, **kwargs):
        data = np.asarray(data, dtype=np.float64)
        return cls(left=data[0], right=data[1], **kwargs)

    @property
    def data(self):
        return np.stack([self.left, self.right])

    def __len__(self):
        return len(self.left)

    def _replace_data(self, data):
        return Brir(data[0], data[1], self.sample_rate, self.room_label, self.azimuth)


@dataclass(frozen=True)
class DirectReverbPair:
    direct: Brir
    reverberant: Brir


@dataclass(frozen=True)
class RoomProfile:
    rt60_s: float
    direct_delay_ms: float = 2.0
    drr_db: float = 3.0
    n_reflections: int = 6


def detect_direct_peak(brir):
    """Index of the largest per-sample energy summed over both ears.

    Ties go to the earliest index.
    """
    energy = brir.left**2 + brir.right**2
    if not np.any(energy > 0):
        raise ValueError("cannot locate direct sound in an all-zero BRIR")
    return int(np.argmax(energy))


def direct_window(n_samples, peak, boundary_ms=50.0, ramp_ms=1.0, sample_rate=SAMPLE_RATE):
    """Gain curve that keeps everything up to ``peak + boundary_ms``.

    The window is 1 up to ``ramp_ms`` before the boundary, falls along a
    half raised cosine across the ramp and is 0 from the boundary onwards.
    """
    end = peak + int(round(boundary_ms * sample_rate / 1000.0))
    ramp = int(round(ramp_ms * sample_rate / 1000.0))
    w = np.zeros(n_samples)
    if end > n_samples:
        w[:] = 1.0
        return w
    start = max(end - ramp, 0)
    w[:start] = 1.0
    j = np.arange(start, end) - (end - ramp)
    w[start:end] = 0.5 * (1.0 + np.cos(np.pi * (j + 1) / (ramp + 1)))
    return w


def split_direct_reverb(brir, boundary_ms=50.0, ramp_ms=1.0):
    """Split a BRIR into complementary direct-sound and reverberant parts.

    Both ears share one window anchored at the common direct peak, so the
    interaural cues of the direct sound are untouched.
    """
    peak = detect_direct_peak(brir)
    w = direct_window(len(brir), peak, boundary_ms, ramp_ms, brir.sample_rate)
    data = brir.data
    return DirectReverbPair(
        direct=brir._replace_data(data * w),
        reverberant=brir._replace_data(data * (1.0 - w)),
    )


def interaural_cues(azimuth, sample_rate=SAMPLE_RATE):
    """Integer interaural delay (samples, right-ear lead positive) and level difference (dB)."""
    s = np.sin(np.deg2rad(azimuth))
    itd = int(np.round(MAX_ITD_S * sample_rate * s))
    return itd, MAX_ILD_DB * s


def synth_brir(seed, profile, azimuth, sample_rate=SAMPLE_RATE, room_label=""):
    """Synthetic BRIR: lateralized direct path, sparse early reflections and a decaying noise tail.

    Positive azimuths are on the listener's right.  The tail amplitude decays
    by 60 dB after ``profile.rt60_s`` and its onset energy is set by
    ``profile.drr_db`` relative to the direct path.
    """
    if profile.rt60_s <= 0:
        raise ValueError("rt60_s must be positive")
    rng = np.random.default_rng([int(seed), int(round((azimuth + 360.0) * 1000))])
    n = int(np.ceil((1.5 * profile.rt60_s + profile.direct_delay_ms / 1000.0 + 0.06) * sample_rate))
    itd, ild = interaural_cues(azimuth, sample_rate)
    d0 = int(round(profile.direct_delay_ms * sample_rate / 1000.0))
    # lagging ear receives the direct path |itd| samples later
    delay_l = d0 + max(itd, 0)
    delay_r = d0 + max(-itd, 0)
    gain_l = 10 ** (-ild / 40.0)
    gain_r = 10 ** (ild / 40.0)
    data = np.zeros((2, n))
    data[0, delay_l] = gain_l
    data[1, delay_r] = gain_r

    direct_energy = gain_l**2 + gain_r**2
    for _ in range(profile.n_reflections):
        t = d0 + int(rng.uniform(0.003, 0.040) * sample_rate)
        amp = rng.uniform(0.2, 0.5) * rng.choice([-1.0, 1.0], size=2)
        data[:, t] += amp * np.array([gain_l, gain_r]) ** 0.5

    onset = d0 + int(0.005 * sample_rate)
    t = np.arange(n - onset) / sample_rate
    decay = np.exp(-3.0 * np.log(10.0) * t / profile.rt60_s)
    tail = rng.standard_normal((2, n - onset)) * decay
    tail_energy = np.sum(tail**2)
    target = direct_energy * 10 ** (-profile.drr_db / 10.0)
    data[:, onset:] += tail * np.sqrt(target / tail_energy)
    return Brir.from_array(data, sample_rate=sample_rate, room_label=room_label,
                           azimuth=float(azimuth))
