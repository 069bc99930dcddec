"""WAV input/output at a fixed sample rate.

All audio handled by the toolkit is 16 kHz, 32-bit float.  Mono signals are
1-D arrays, stereo signals are ``(2, n_samples)`` arrays (channel first).
"""

from pathlib import Path

import numpy as np
from scipy.io import wavfile

SAMPLE_RATE = 16000


def write_wav(path, signal, sample_rate=SAMPLE_RATE):
    """Write a mono ``(n,)`` or stereo ``(2, n)`` signal as float32 WAV."""
    signal = np.asarray(signal, dtype=np.float32)
    if signal.ndim == 2:
        signal = signal.T
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), sample_rate, np.ascontiguousarray(signal))


def read_wav(path, sample_rate=SAMPLE_RATE):
    """Read a WAV file, returning float64 samples in the channel-first layout."""
    rate, data = wavfile.read(str(path))
    if rate != sample_rate:
        raise ValueError(f"{path}: sample rate {rate} Hz, expected {sample_rate} Hz")
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float64) / float(np.iinfo(data.dtype).max)
    data = data.astype(np.float64)
    if data.ndim == 2:
        data = data.T
    return data


def wav_duration(path):
    """Duration in seconds, read from the header only."""
    rate, data = wavfile.read(str(path), mmap=True)
    return data.shape[0] / rate
