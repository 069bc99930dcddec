import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gengap import metrics
from gengap.model import OracleIrmModel
from gengap.scene import Condition, Mixture, generate_dataset

FINITE = st.floats(-1, 1, allow_nan=False)


def test_snr_examples(rng):
    ref = rng.standard_normal(1000)
    noise = rng.standard_normal(1000)
    noise *= np.linalg.norm(ref) / np.linalg.norm(noise)
    assert metrics.snr_metric(ref, ref + noise) == pytest.approx(0.0, abs=1e-12)
    assert metrics.snr_metric(ref, 2 * ref) == pytest.approx(0.0, abs=1e-12)
    assert metrics.snr_metric(ref, ref) == np.inf
    with pytest.raises(ValueError):
        metrics.snr_metric(ref, ref[:-1])


@settings(max_examples=50)
@given(arrays(np.float64, 64, elements=FINITE), arrays(np.float64, 64, elements=FINITE),
       st.floats(1e-3, 1e3))
def test_snr_scale_invariant(r, s, k):
    if np.sum((s - r) ** 2) < 1e-12 or np.sum(r**2) < 1e-12:
        return
    assert metrics.snr_metric(k * r, k * s) == pytest.approx(metrics.snr_metric(r, s), abs=1e-9)


@settings(max_examples=50)
@given(arrays(np.float64, 32, elements=FINITE), arrays(np.float64, 32, elements=FINITE))
def test_delta_zero_when_unchanged(r, u):
    d = metrics.delta_metric(lambda a, b: float(np.dot(a, b)), r, u, u)
    assert d == 0.0
    if np.any(u != r) and np.any(r):
        assert metrics.delta_metric(metrics.snr_metric, r, u, u) == 0.0


def test_delta_perfect_capped(registry):
    ds = generate_dataset(Condition.from_indices([1], [1], [1]), 0.0005, 1, registry)
    mix = ds[0]
    perfect = 0.5 * (mix.speech_direct[0] + mix.speech_direct[1])
    before = metrics.snr_metric(perfect, 0.5 * (mix.mixture[0] + mix.mixture[1]))
    got = metrics.score_mixture({"delta_snr": metrics.snr_metric}, mix, perfect)
    assert got["delta_snr"] == pytest.approx(99.0 - before, abs=1e-9)
    assert metrics.capped(np.inf) == 99.0 and metrics.capped(-np.inf) == -99.0


def test_adapter_echo_stub(tmp_path):
    got = metrics.external_metric_adapter("echo score: 1.23", tmp_path / "r.wav", tmp_path / "s.wav")
    assert got == 1.23


def test_adapter_placeholders(tmp_path):
    script = tmp_path / "tool.py"
    script.write_text("import sys\nprint(len(sys.argv[1]) + len(sys.argv[2]))\n")
    got = metrics.external_metric_adapter(f"{sys.executable} {script} {{ref}} {{sig}}", "ab", "cde")
    assert got == 5.0


@pytest.mark.parametrize("command", ["/nonexistent/metric-tool {ref} {sig}", "false",
                                     "echo no number here"])
def test_adapter_unavailable(command, tmp_path):
    assert metrics.external_metric_adapter(command, "r", "s") is None


def test_adapter_timeout():
    assert metrics.external_metric_adapter("sleep 5", "r", "s", timeout=0.2) is None


def test_external_metric_writes_wavs(tmp_path):
    script = tmp_path / "tool.py"
    script.write_text(
        "import sys\nfrom gengap.audio import read_wav\n"
        "r, s = read_wav(sys.argv[1]), read_wav(sys.argv[2])\n"
        "print(float(abs(r - s).max()))\n")
    m = metrics.ExternalMetric(f"{sys.executable} {script} {{ref}} {{sig}}")
    x = np.linspace(-0.5, 0.5, 1600)
    assert m(x, x) == 0.0
    assert m(x, 0 * x) == pytest.approx(0.5, abs=1e-6)


def test_resolve_metrics():
    fns = metrics.resolve_metrics(["delta_snr", "delta_estoi"], {"delta_estoi": "estoi {ref} {sig}"})
    assert fns["delta_snr"] is metrics.snr_metric
    assert isinstance(fns["delta_estoi"], metrics.ExternalMetric)
    with pytest.raises(ValueError):
        metrics.resolve_metrics(["pesq"])


def test_evaluate_skips_unavailable(registry, tmp_path):
    ds = generate_dataset(Condition.from_indices([1], [1], [1]), 0.001, 1, registry)
    fns = metrics.resolve_metrics(["delta_snr", "broken"], {"broken": "/nonexistent {ref} {sig}"})
    scores = metrics.evaluate(OracleIrmModel(), ds, fns)
    assert {s.metric_id for s in scores} == {"delta_snr"}
    assert len(scores) == len(ds)
    assert all(s.value > 0 for s in scores)
    path = metrics.write_scores(scores, tmp_path / "scores.csv")
    assert path.read_text().splitlines()[0] == "mixture_id,metric,value"
    assert metrics.read_scores(path) == scores


def test_dataset_means():
    scores = [metrics.Score("a", v, str(i)) for i, v in enumerate([1.0, 2.0, 6.0])]
    assert metrics.dataset_means(scores) == {"a": 3.0}
    assert not scores[0].is_dataset_mean and metrics.Score("a", 1.0).is_dataset_mean


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=30), st.randoms())
def test_dataset_means_permutation_invariant(values, random):
    scores = [metrics.Score("m", v, str(i)) for i, v in enumerate(values)]
    shuffled = scores[:]
    random.shuffle(shuffled)
    a = metrics.dataset_means(scores)["m"]
    b = metrics.dataset_means(shuffled)["m"]
    assert a == pytest.approx(b, abs=1e-12)
    assert a == pytest.approx(float(np.mean(values)), abs=1e-12)


def test_score_identity_enhancement(registry):
    ds = generate_dataset(Condition.from_indices([2], [2], [2]), 0.0005, 4, registry)
    mix = ds[0]
    unprocessed = 0.5 * (mix.mixture[0] + mix.mixture[1])
    assert metrics.score_mixture({"delta_snr": metrics.snr_metric}, mix, unprocessed) == \
        {"delta_snr": 0.0}
    assert isinstance(mix, Mixture)
