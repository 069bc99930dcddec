"""Objective improvement scores against the direct-sound reference.

All metrics operate on the left/right average.  Delta-SNR is native;
intelligibility and quality metrics plug in through a command-line adapter.
"""

import csv
import logging
import re
import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gengap.audio import write_wav
from gengap.model import mono

log = logging.getLogger(__name__)

SNR_CAP_DB = 99.0
_FLOAT_RE = re.compile(r"[-+]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][-+]?\d+)?|[-+]?inf|nan", re.I)


def snr_metric(reference, signal):
    """Reference energy over residual energy, in dB."""
    reference = np.asarray(reference, dtype=np.float64)
    signal = np.asarray(signal, dtype=np.float64)
    if reference.shape != signal.shape:
        raise ValueError("reference and signal differ in length")
    residual = np.sum((signal - reference) ** 2)
    if residual == 0.0:
        return np.inf
    return 10.0 * np.log10(np.sum(reference**2) / residual)


def delta_metric(metric, reference, unprocessed, enhanced):
    return metric(reference, enhanced) - metric(reference, unprocessed)


def capped(value, cap=SNR_CAP_DB):
    """Clip infinite or huge dB scores so they survive averaging."""
    return float(np.clip(value, -cap, cap))


def external_metric_adapter(command_template, reference_path, signal_path, timeout=60.0):
    """Run an external scorer and parse one float from its output.

    ``command_template`` contains ``{ref}`` and ``{sig}`` placeholders.
    Returns ``None`` when the tool is missing, fails, times out or prints
    no number.
    """
    cmd = [part.format(ref=str(reference_path), sig=str(signal_path))
           for part in shlex.split(command_template)]
    try:
        out = subprocess.run(cmd, capture_output=True, text=True, timeout=timeout)
    except (OSError, subprocess.TimeoutExpired) as exc:
        log.warning("metric command %r unavailable: %s", command_template, exc)
        return None
    if out.returncode != 0:
        log.warning("metric command %r exited with %d", command_template, out.returncode)
        return None
    found = _FLOAT_RE.findall(out.stdout)
    if not found:
        log.warning("metric command %r printed no number", command_template)
        return None
    return float(found[-1])


class ExternalMetric:
    """A ``(reference, signal) -> float | None`` metric backed by an external command."""

    def __init__(self, command_template, timeout=60.0):
        self.command_template = command_template
        self.timeout = timeout

    def __call__(self, reference, signal):
        with tempfile.TemporaryDirectory() as tmp:
            ref, sig = Path(tmp) / "ref.wav", Path(tmp) / "sig.wav"
            write_wav(ref, reference)
            write_wav(sig, signal)
            return external_metric_adapter(self.command_template, ref, sig, self.timeout)


NATIVE_METRICS = {"delta_snr": snr_metric}


@dataclass(frozen=True)
class Score:
    metric_id: str
    value: float
    mixture_id: str | None = None

    @property
    def is_dataset_mean(self):
        return self.mixture_id is None


def resolve_metrics(names, external=None):
    """Map metric names to callables; ``external`` maps extra names to command templates."""
    external = external or {}
    out = {}
    for name in names:
        if name in NATIVE_METRICS:
            out[name] = NATIVE_METRICS[name]
        elif name in external:
            out[name] = ExternalMetric(external[name])
        else:
            raise ValueError(f"unknown metric {name!r}")
    return out


def score_mixture(metrics, mixture, enhanced):
    """Per-metric improvement of ``enhanced`` over the unprocessed mixture.

    Unavailable external metrics are left out.
    """
    ref = mono(mixture.speech_direct)
    unprocessed = mono(mixture.mixture)
    scores = {}
    for name, fn in metrics.items():
        before, after = fn(ref, unprocessed), fn(ref, enhanced)
        if before is None or after is None:
            continue
        scores[name] = capped(after) - capped(before) if name == "delta_snr" else after - before
    return scores


def evaluate(model, dataset, metrics, prefix=""):
    """Score ``model`` on every mixture; returns per-mixture :class:`Score` objects."""
    out = []
    for i, mix in enumerate(dataset):
        enhanced = model.enhance(mix)
        for name, value in score_mixture(metrics, mix, enhanced).items():
            out.append(Score(name, value, f"{prefix}{i:06d}"))
    return out


def dataset_means(scores):
    """Arithmetic mean per metric, accumulated in mixture order."""
    by_metric = {}
    for s in scores:
        by_metric.setdefault(s.metric_id, []).append(s.value)
    return {m: float(np.mean(v)) for m, v in sorted(by_metric.items())}


def write_scores(scores, path, extra=None):
    """CSV ``mixture_id,metric,value`` (plus any constant ``extra`` columns in front)."""
    extra = extra or {}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([*extra, "mixture_id", "metric", "value"])
        for s in scores:
            w.writerow([*extra.values(), s.mixture_id, s.metric_id, repr(s.value)])
    return path


def read_scores(path):
    with open(path, newline="") as f:
        return [Score(r["metric"], float(r["value"]), r["mixture_id"]) for r in csv.DictReader(f)]
