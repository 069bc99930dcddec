import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gengap import dsp

FB = dsp.mel_filterbank()
CFG = dsp.StftConfig()


def brute_log_mel(x, fb, eps=1e-10, frame_len=512, hop=256):
    """Frame-by-frame feature computation with explicit loops over filters and bins."""
    n = (len(x) + hop - 1) // hop
    padded = np.zeros((n - 1) * hop + frame_len)
    padded[: len(x)] = x
    j = np.arange(frame_len)
    win = 0.5 - 0.5 * np.cos(2 * np.pi * j / frame_len)
    out = np.zeros((fb.shape[0], n))
    for l in range(n):
        frame = padded[l * hop: l * hop + frame_len] * win
        spec = np.fft.fft(frame)[: frame_len // 2 + 1]
        power = spec.real**2 + spec.imag**2
        for m in range(fb.shape[0]):
            acc = 0.0
            for k in range(fb.shape[1]):
                acc += fb[m, k] * power[k]
            out[m, l] = np.log(acc + eps)
    return out


def test_config_defaults():
    assert CFG.n_bins == 257 and CFG.hop * 2 == CFG.frame_len
    w = CFG.analysis_window()
    # periodic Hann satisfies constant overlap-add at 50 %
    np.testing.assert_allclose(w[:256] + w[256:], 1.0, atol=1e-12)


def test_stft_sine_peak():
    t = np.arange(16000) / 16000
    spec = dsp.stft(np.sin(2 * np.pi * 1000 * t))
    assert spec.coefs.shape == (257, 63)
    assert np.all(np.argmax(np.abs(spec.coefs[:, 1:-1]), axis=0) == 32)


def test_stft_zeros_and_empty():
    assert not np.any(dsp.stft(np.zeros(1000)).coefs)
    empty = dsp.stft(np.zeros(0))
    assert empty.coefs.shape == (257, 0)
    assert dsp.istft(empty).shape == (0,)


def test_stft_frame_count():
    for n in (1, 255, 256, 257, 1000):
        assert dsp.stft(np.ones(n)).n_frames == -(-n // 256)


@pytest.mark.parametrize("kind", ["white", "speechlike"])
def test_roundtrip(kind, rng):
    if kind == "white":
        x = rng.standard_normal(8000)
    else:
        t = np.arange(8000) / 16000
        x = np.sin(2 * np.pi * 150 * t) * (1 + np.sin(2 * np.pi * 3 * t)) + 0.1 * rng.standard_normal(8000)
    y = dsp.istft(dsp.stft(x))
    assert y.shape == x.shape
    err = np.linalg.norm(y[256:] - x[256:]) / np.linalg.norm(x[256:])
    assert err <= 1e-6
    assert not np.any(dsp.istft(dsp.stft(np.zeros(3000))))


def test_istft_config_mismatch():
    spec = dsp.stft(np.ones(1024))
    with pytest.raises(ValueError):
        dsp.istft(spec, dsp.StftConfig(frame_len=256, hop=128))


def test_mel_scale():
    assert dsp.hz_to_mel(0.0) == 0.0
    assert float(dsp.hz_to_mel(1000.0)) == pytest.approx(2595 * np.log10(1 + 1000 / 700), abs=1e-12)
    assert float(dsp.hz_to_mel(1000.0)) == pytest.approx(999.99, abs=0.01)
    f = np.array([50.0, 440.0, 8000.0])
    np.testing.assert_allclose(dsp.mel_to_hz(dsp.hz_to_mel(f)), f, rtol=1e-12)


def test_filterbank_structure():
    assert FB.shape == (64, 257)
    assert np.all(FB >= 0) and np.all(FB.max(axis=1) > 0)
    assert np.all(FB.max(axis=1) <= 1.0)
    f = np.linspace(0, 8000, 257)
    edges = dsp.mel_to_hz(np.linspace(dsp.hz_to_mel(50), dsp.hz_to_mel(8000), 66))
    for m, row in enumerate(FB):
        nz = np.flatnonzero(row)
        # one maximum, rising then falling, support within the triangle's edges
        peak = np.argmax(row)
        assert np.all(np.diff(row[nz[0]:peak + 1]) >= 0) and np.all(np.diff(row[peak:nz[-1] + 1]) <= 0)
        assert f[nz[0]] > edges[m] and f[nz[-1]] < edges[m + 2]
    centres = np.diff(dsp.hz_to_mel(edges[1:-1]))
    np.testing.assert_allclose(centres, centres[0], rtol=1e-9)


def test_filterbank_errors():
    with pytest.raises(ValueError):
        dsp.mel_filterbank(f_lo=500, f_hi=100)
    with pytest.raises(ValueError):
        dsp.mel_filterbank(f_hi=9000)


def test_log_mel_zero_and_scaling(rng):
    feats = dsp.log_mel_features(dsp.stft(np.zeros(2048)), FB)
    np.testing.assert_array_equal(feats, np.log(1e-10))
    x = rng.standard_normal(4096)
    f1 = dsp.log_mel_features(dsp.stft(x), FB)
    f2 = dsp.log_mel_features(dsp.stft(2 * x), FB)
    np.testing.assert_allclose(f2 - f1, np.log(4), atol=1e-9)


def test_log_mel_brute_force(rng):
    x = rng.standard_normal(1500)
    fast = dsp.log_mel_features(dsp.stft(x), FB)
    slow = brute_log_mel(x, FB)
    np.testing.assert_allclose(fast, slow, rtol=1e-9)


def test_log_mel_white_noise_bandwidth(rng):
    """For a long white-noise signal the band energy grows with the filter's area."""
    x = rng.standard_normal(16000 * 4)
    e = dsp.mel_energies(dsp.stft(x), FB).mean(axis=1)
    area = FB.sum(axis=1)
    ratio = e / area
    assert np.all(np.isfinite(np.log(e)))
    assert np.corrcoef(np.log(e), np.log(area))[0, 1] > 0.99
    assert ratio.max() / ratio.min() < 1.5


def test_stack_context():
    f = np.arange(64 * 8, dtype=float).reshape(64, 8)
    s = dsp.stack_context(f)
    assert s.shape == (384, 8)
    np.testing.assert_array_equal(s[:320, 0], 0.0)
    np.testing.assert_array_equal(s[320:, 0], f[:, 0])
    for l in range(8):
        for k in range(6):
            src = l - 5 + k
            block = s[64 * k: 64 * (k + 1), l]
            np.testing.assert_array_equal(block, f[:, src] if src >= 0 else 0.0)
    const = dsp.stack_context(np.ones((64, 10)))
    np.testing.assert_array_equal(const[:, 5:], 1.0)


def test_irm_examples(rng):
    s = dsp.stft(rng.standard_normal(4096))
    zero = dsp.stft(np.zeros(4096))
    irm = dsp.compute_irm(s, zero, FB)
    np.testing.assert_allclose(irm, 1.0, atol=1e-12)
    np.testing.assert_array_equal(dsp.compute_irm(zero, s, FB), 0.0)
    np.testing.assert_array_equal(dsp.compute_irm(zero, zero, FB), 0.0)
    with pytest.raises(ValueError):
        dsp.compute_irm(s, dsp.stft(np.zeros(100)), FB)


def test_irm_equal_energy(rng):
    s = dsp.stft(rng.standard_normal(4096))
    n = dsp.Spectrogram(s.coefs * np.exp(1j * rng.uniform(0, 2 * np.pi, s.coefs.shape)),
                        s.n_samples)
    irm = dsp.compute_irm(s, n, FB)
    assert np.max(np.abs(irm - 1 / np.sqrt(2))) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 1300, elements=st.floats(-1, 1)),
       arrays(np.float64, 1300, elements=st.floats(-1, 1)),
       st.floats(1.0, 10.0))
def test_irm_range_and_monotone(s, n, gain):
    S, N = dsp.stft(s), dsp.stft(n)
    a = dsp.compute_irm(S, N, FB)
    b = dsp.compute_irm(S, dsp.Spectrogram(N.coefs * gain, N.n_samples), FB)
    assert np.all((a >= 0) & (a <= 1)) and np.all((b >= 0) & (b <= 1))
    assert np.all(b <= a + 1e-12)


def test_apply_mask_identity_and_zero(rng):
    spec = dsp.stft(rng.standard_normal(4096))
    covered = FB.sum(axis=0) > 0
    ones = dsp.apply_mask(np.ones((64, spec.n_frames)), spec, FB)
    np.testing.assert_array_equal(ones.coefs[covered], spec.coefs[covered])
    zeros = dsp.apply_mask(np.zeros((64, spec.n_frames)), spec, FB)
    assert not np.any(zeros.coefs)


@given(st.floats(0.0, 1.0))
def test_apply_mask_constant(c):
    spec = dsp.stft(np.random.default_rng(0).standard_normal(2048))
    out = dsp.apply_mask(np.full((64, spec.n_frames), c), spec, FB)
    np.testing.assert_allclose(out.coefs, c * spec.coefs, rtol=1e-12, atol=1e-300)


def test_mask_to_bins_uncovered():
    W = dsp.mask_to_bins(FB)
    coverage = FB.sum(axis=0)
    assert coverage[0] == 0 and coverage[-1] == 0
    np.testing.assert_allclose(W.sum(axis=1), 1.0, atol=1e-12)
    first = np.flatnonzero(coverage > 0)[0]
    np.testing.assert_array_equal(W[0], W[first])


def test_oracle_mask_improves_snr(registry, train_condition):
    from gengap.metrics import snr_metric
    from gengap.model import mono
    from gengap.scene import draw_scene, render_scene
    gains = []
    for seed in range(5):
        mix = render_scene(draw_scene(train_condition, registry, seed), registry)
        x, s, b = mono(mix.mixture), mono(mix.speech_direct), mono(mix.background)
        y = dsp.mask_enhance(x, dsp.oracle_mask(s, b, FB), FB)
        gains.append(snr_metric(s, y) - snr_metric(s, x))
    assert min(gains) > 0
