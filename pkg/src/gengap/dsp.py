"""STFT, mel filterbank, log-mel features, ideal ratio mask and mask application.

Spectrograms are ``(n_bins, n_frames)``; mel-domain arrays (features, masks)
are ``(n_bands, n_frames)``.
"""

from dataclasses import dataclass

import numpy as np
from scipy.signal import get_window

from gengap.audio import SAMPLE_RATE

LOG_EPS = 1e-10


@dataclass(frozen=True)
class StftConfig:
    frame_len: int = 512
    hop: int = 256
    window: str = "hann"
    sample_rate: int = SAMPLE_RATE

    @property
    def n_bins(self):
        return self.frame_len // 2 + 1

    def analysis_window(self):
        return get_window(self.window, self.frame_len, fftbins=True)


@dataclass(frozen=True)
class Spectrogram:
    coefs: np.ndarray
    n_samples: int
    config: StftConfig = StftConfig()

    @property
    def n_frames(self):
        return self.coefs.shape[1]

    def power(self):
        return self.coefs.real**2 + self.coefs.imag**2


def n_frames(n_samples, config=StftConfig()):
    return -(-n_samples // config.hop)


def stft(x, config=StftConfig()):
    """Windowed DFT of frames starting every ``hop`` samples; the tail is zero-padded."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("stft expects a mono signal")
    n = len(x)
    L = n_frames(n, config)
    if L == 0:
        return Spectrogram(np.zeros((config.n_bins, 0), complex), 0, config)
    padded = np.zeros((L - 1) * config.hop + config.frame_len)
    padded[:n] = x
    frames = np.lib.stride_tricks.sliding_window_view(padded, config.frame_len)[::config.hop]
    coefs = np.fft.rfft(frames * config.analysis_window(), axis=1).T
    return Spectrogram(coefs, n, config)


def istft(spec, config=StftConfig()):
    """Weighted overlap-add inverse of :func:`stft` (least-squares synthesis).

    The overlap normalizer is floored at its interior minimum, so the first
    half frame (covered by one rising window only) fades in instead of
    amplifying whatever a mask did there.  All later samples are exact.
    """
    if spec.config != config:
        raise ValueError(f"spectrogram was computed with {spec.config}, not {config}")
    L = spec.n_frames
    if L == 0:
        return np.zeros(spec.n_samples)
    w = config.analysis_window()
    frames = np.fft.irfft(spec.coefs.T, n=config.frame_len, axis=1) * w
    total = (L - 1) * config.hop + config.frame_len
    out = np.zeros(total)
    norm = np.zeros(total)
    for l in range(L):
        s = l * config.hop
        out[s:s + config.frame_len] += frames[l]
        norm[s:s + config.frame_len] += w**2
    floor = _interior_norm(config)
    out /= np.maximum(norm, floor)
    return out[:spec.n_samples]


def _interior_norm(config):
    w2 = config.analysis_window() ** 2
    per_hop = w2.reshape(-1, config.hop).sum(axis=0)
    return float(per_hop.min())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_filters=64, f_lo=50.0, f_hi=8000.0, n_bins=257, sample_rate=SAMPLE_RATE):
    """Triangular filters with unit peak, centres evenly spaced in mel between the band edges.

    Returns the ``(n_filters, n_bins)`` gain matrix.
    """
    nyquist = sample_rate / 2.0
    if not 0.0 <= f_lo < f_hi <= nyquist:
        raise ValueError(f"invalid band edges {f_lo}..{f_hi} Hz (Nyquist {nyquist} Hz)")
    edges = mel_to_hz(np.linspace(hz_to_mel(f_lo), hz_to_mel(f_hi), n_filters + 2))
    edges[0], edges[-1] = f_lo, f_hi  # undo round-off in the mel round trip
    f = np.linspace(0.0, nyquist, n_bins)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (f - lo) / (mid - lo)
    falling = (hi - f) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_energies(spec, fb):
    return fb @ spec.power()


def log_mel_features(spec, fb, eps=LOG_EPS):
    return np.log(mel_energies(spec, fb) + eps)


def stack_context(features, n_prev=5):
    """Concatenate each frame with its ``n_prev`` predecessors, oldest first.

    Frames before the start are zero vectors, so the result stays causal.
    """
    D, L = features.shape
    padded = np.concatenate([np.zeros((D, n_prev)), features], axis=1)
    return np.concatenate([padded[:, k:k + L] for k in range(n_prev + 1)], axis=0)


def compute_irm(speech_spec, background_spec, fb):
    """Mel-domain ideal ratio mask; bands with no energy at all get 0."""
    if speech_spec.coefs.shape != background_spec.coefs.shape:
        raise ValueError("speech and background spectrograms differ in shape")
    s = fb @ speech_spec.power()
    total = fb @ (speech_spec.power() + background_spec.power())
    irm = np.zeros_like(total)
    nz = total > 0
    irm[nz] = np.sqrt(s[nz] / total[nz])
    return np.minimum(irm, 1.0)


def mask_to_bins(fb):
    """``(n_bins, n_filters)`` map from mel gains to STFT bin gains.

    Each bin gets the filter-weighted mean of the mel gains; bins outside
    every filter copy the nearest covered bin.
    """
    coverage = fb.sum(axis=0)
    covered = np.flatnonzero(coverage > 0)
    W = np.zeros(fb.T.shape)
    W[covered] = fb.T[covered] / coverage[covered, None]
    for k in np.flatnonzero(coverage == 0):
        W[k] = W[covered[np.argmin(np.abs(covered - k))]]
    return W


def apply_mask(mel_mask, noisy_spec, fb):
    """Interpolate a mel mask onto the STFT bins and apply it as a real gain."""
    W = mask_to_bins(fb)
    coverage = fb.sum(axis=0)
    # bin gain = sum_m G[m, k] * mask[m] / sum_m G[m, k]; at most two filters overlap per bin
    gain = (fb.T @ mel_mask)
    covered = coverage > 0
    gain[covered] /= coverage[covered, None]
    gain[~covered] = (W[~covered] @ mel_mask)
    return Spectrogram(gain * noisy_spec.coefs, noisy_spec.n_samples, noisy_spec.config)


def mask_enhance(x, mel_mask, fb, config=StftConfig()):
    """Apply a mel mask to a mono signal and resynthesize it."""
    return istft(apply_mask(mel_mask, stft(x, config), fb), config)


def oracle_mask(speech, background, fb, config=StftConfig()):
    return compute_irm(stft(speech, config), stft(background, config), fb)
