"""Mask-based enhancement models.

The FFNN baseline maps six stacked log-mel frames (384 values) to a 64-band
ratio mask through two rectified hidden layers of 1024 units and a logistic
output layer.  Training is plain numpy: inverted dropout, mean squared error
and Adam over duration-bucketed batches.
"""

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gengap import dsp
from gengap.scene import derive_seed

log = logging.getLogger(__name__)

LAYER_SIZES = (384, 1024, 1024, 64)
N_CONTEXT = 5
CHECKPOINT_FORMAT = "gengap-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class FfnnParams:
    weights: list
    biases: list

    @property
    def sizes(self):
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def arrays(self):
        return self.weights + self.biases

    def copy(self):
        return FfnnParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def init_ffnn(seed, sizes=LAYER_SIZES, dtype=np.float64):
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(int(seed))
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, (fan_in, fan_out)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return FfnnParams(weights, biases)


def sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    # keep the mask inside the open interval even where it rounds to 0 or 1
    info = np.finfo(out.dtype)
    return np.clip(out, info.tiny, 1.0 - info.epsneg, out=out)


def dropout_masks(rng, batch, params, rate):
    """Keep-masks for each hidden layer, already scaled by ``1 / (1 - rate)``."""
    dtype = params.weights[0].dtype
    scale = dtype.type(1.0 / (1.0 - rate))
    return [(rng.random((batch, w.shape[1])) >= rate).astype(dtype) * scale
            for w in params.weights[:-1]]


def forward(params, x, dropout=None, rate=0.2, return_cache=False):
    """Network output in (0, 1).

    ``dropout`` is ``None`` (inference), a numpy Generator (fresh masks at
    ``rate``) or an explicit list of scaled keep-masks, one per hidden layer.
    """
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[0]:
        raise ValueError(f"expected input of shape (batch, {params.weights[0].shape[0]}), "
                         f"got {x.shape}")
    if isinstance(dropout, np.random.Generator):
        dropout = dropout_masks(dropout, x.shape[0], params, rate)
    h = x.astype(params.weights[0].dtype, copy=False)
    acts, pre = [h], []
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        pre.append(z)
        if i < n_layers - 1:
            h = np.maximum(z, 0)
            if dropout is not None:
                h = h * dropout[i]
        else:
            h = sigmoid(z)
        acts.append(h)
    if return_cache:
        return h, (acts, pre, dropout)
    return h


def backward(params, cache, grad_out):
    """Gradients of a scalar loss w.r.t. every weight and bias given dL/d(output)."""
    acts, pre, masks = cache
    n_layers = len(params.weights)
    y = acts[-1]
    delta = grad_out * y * (1 - y)
    grads_w, grads_b = [None] * n_layers, [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        grads_w[i] = acts[i].T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            da = delta @ params.weights[i].T
            if masks is not None:
                da = da * masks[i - 1]
            delta = da * (pre[i - 1] > 0)
    return FfnnParams(grads_w, grads_b)


def mse_and_grads(params, x, target, dropout=None, rate=0.2):
    y, cache = forward(params, x, dropout, rate, return_cache=True)
    diff = y - target
    loss = float(np.mean(np.square(diff, dtype=np.float64)))
    grads = backward(params, cache, (2.0 / diff.size) * diff)
    return loss, grads


class Adam:
    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(a) for a in params.arrays()]
        self.v = [np.zeros_like(a) for a in params.arrays()]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        step = self.lr * np.sqrt(1 - b2**self.t) / (1 - b1**self.t)
        for p, g, m, v in zip(params.arrays(), grads.arrays(), self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (step * m / (np.sqrt(v) + self.eps)).astype(p.dtype, copy=False)


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features, floor=1e-8):
        features = np.asarray(features, dtype=np.float64)
        return cls(features.mean(axis=0), np.maximum(features.std(axis=0), floor))

    def apply(self, features):
        return (features - self.mean) / self.std


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 100
    dropout_rate: float = 0.2
    batch_budget_s: float = 128.0
    n_buckets: int = 10
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.batch_budget_s <= 0:
            raise ValueError("batch_budget_s must be positive")


def bucket_batches(durations, budget_s=128.0, n_buckets=10, rng=None):
    """Group item indices into batches whose durations sum to at most ``budget_s``.

    Items fall into ``n_buckets`` buckets bounded by duration quantiles;
    each bucket is shuffled and filled greedily, and the batch order is
    shuffled too.  An item longer than the budget becomes its own batch.
    """
    durations = np.asarray(durations, dtype=np.float64)
    if len(durations) == 0:
        return []
    rng = rng if rng is not None else np.random.default_rng(0)
    edges = np.quantile(durations, np.linspace(0, 1, n_buckets + 1)[1:-1])
    bucket_of = np.searchsorted(edges, durations, side="right")
    batches = []
    for b in range(n_buckets):
        members = np.flatnonzero(bucket_of == b)
        rng.shuffle(members)
        current, total = [], 0.0
        for i in members:
            d = durations[i]
            if d > budget_s:
                log.warning("item %d (%.1f s) exceeds the %.1f s batch budget", i, d, budget_s)
                batches.append([int(i)])
                continue
            if current and total + d > budget_s:
                batches.append(current)
                current, total = [], 0.0
            current.append(int(i))
            total += d
        if current:
            batches.append(current)
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def mono(stereo):
    return 0.5 * (stereo[0] + stereo[1])


class EnhancementModel:
    """Behavioural contract shared by all architectures."""

    name = "base"

    def train(self, dataset):
        raise NotImplementedError

    def enhance(self, mixture):
        raise NotImplementedError

    def save(self, path):
        raise NotImplementedError


class FfnnModel(EnhancementModel):
    name = "ffnn"

    def __init__(self, config=None, sizes=LAYER_SIZES, stft_config=dsp.StftConfig()):
        self.config = config or TrainConfig()
        self.sizes = tuple(sizes)
        self.stft_config = stft_config
        self.fb = dsp.mel_filterbank(n_bins=stft_config.n_bins,
                                     sample_rate=stft_config.sample_rate)
        self.params = None
        self.norm = None
        self.loss_history = []

    def features(self, x):
        """Stacked log-mel frames ``(n_frames, 384)`` of a mono signal."""
        spec = dsp.stft(x, self.stft_config)
        return dsp.stack_context(dsp.log_mel_features(spec, self.fb), N_CONTEXT).T

    def target(self, mixture):
        return dsp.oracle_mask(mono(mixture.speech_direct), mono(mixture.background), self.fb,
                               self.stft_config).T

    def train(self, dataset):
        cfg = self.config
        if len(dataset) == 0:
            raise ValueError("cannot train on an empty dataset")
        dtype = np.dtype(cfg.dtype)
        feats, targets, durations = [], [], []
        for mix in dataset:
            feats.append(self.features(mono(mix.mixture)))
            targets.append(self.target(mix).astype(dtype))
            durations.append(mix.n_samples / self.stft_config.sample_rate)
        self.norm = NormStats.fit(np.concatenate(feats))
        feats = [self.norm.apply(f).astype(dtype) for f in feats]

        rng = np.random.default_rng(derive_seed(cfg.seed, "order"))
        self.params = init_ffnn(derive_seed(cfg.seed, "init"), self.sizes, dtype)
        adam = Adam(self.params, lr=cfg.learning_rate)
        self.loss_history = [self._dataset_loss(feats, targets)]
        for epoch in range(cfg.epochs):
            total, frames = 0.0, 0
            for batch in bucket_batches(durations, cfg.batch_budget_s, cfg.n_buckets, rng):
                x = np.concatenate([feats[i] for i in batch])
                t = np.concatenate([targets[i] for i in batch])
                drop = rng if cfg.dropout_rate > 0 else None
                loss, grads = mse_and_grads(self.params, x, t, drop, cfg.dropout_rate)
                if not np.isfinite(loss):
                    raise FloatingPointError(
                        f"non-finite loss {loss} at epoch {epoch + 1}, batch of {len(batch)} items")
                adam.step(self.params, grads)
                total += loss * len(x)
                frames += len(x)
            self.loss_history.append(total / frames)
            log.info("epoch %d/%d  loss %.5f", epoch + 1, cfg.epochs, total / frames)
        return self

    def _dataset_loss(self, feats, targets):
        x, t = np.concatenate(feats), np.concatenate(targets)
        return float(np.mean(np.square(forward(self.params, x) - t, dtype=np.float64)))

    def predict_mask(self, x):
        if self.params is None:
            raise RuntimeError("model is not trained")
        feats = self.norm.apply(self.features(x)).astype(self.params.weights[0].dtype)
        return forward(self.params, feats).T.astype(np.float64)

    def enhance(self, mixture):
        x = mono(mixture.mixture)
        return dsp.mask_enhance(x, self.predict_mask(x), self.fb, self.stft_config)

    def save(self, path):
        if self.params is None:
            raise RuntimeError("model is not trained")
        arrays = {f"W{i}": w for i, w in enumerate(self.params.weights)}
        arrays.update({f"b{i}": b for i, b in enumerate(self.params.biases)})
        _write_checkpoint(path, self.name, self.config, arrays,
                          layer_sizes=np.array(self.sizes, dtype="<i8"),
                          norm_mean=self.norm.mean.astype("<f8"),
                          norm_std=self.norm.std.astype("<f8"))

    @classmethod
    def from_arrays(cls, config, data):
        sizes = tuple(int(s) for s in data["layer_sizes"])
        model = cls(config, sizes)
        n = len(sizes) - 1
        model.params = FfnnParams([data[f"W{i}"] for i in range(n)],
                                  [data[f"b{i}"] for i in range(n)])
        model.norm = NormStats(data["norm_mean"], data["norm_std"])
        return model


class OracleIrmModel(EnhancementModel):
    """Training-free model applying the ideal ratio mask of the mixture's own components."""

    name = "oracle"

    def __init__(self, config=None, stft_config=dsp.StftConfig()):
        self.config = config or TrainConfig()
        self.stft_config = stft_config
        self.fb = dsp.mel_filterbank(n_bins=stft_config.n_bins,
                                     sample_rate=stft_config.sample_rate)

    def train(self, dataset):
        return self

    def enhance(self, mixture):
        if mixture.speech_direct is None or mixture.background is None:
            raise ValueError("oracle enhancement needs the ground-truth speech and background")
        mask = dsp.oracle_mask(mono(mixture.speech_direct), mono(mixture.background), self.fb,
                               self.stft_config)
        return dsp.mask_enhance(mono(mixture.mixture), mask, self.fb, self.stft_config)

    def save(self, path):
        _write_checkpoint(path, self.name, self.config, {})

    @classmethod
    def from_arrays(cls, config, data):
        return cls(config)


ARCHITECTURES = {"ffnn": FfnnModel, "oracle": OracleIrmModel}


def make_model(name, config=None):
    try:
        return ARCHITECTURES[name](config)
    except KeyError:
        raise ValueError(f"unknown architecture {name!r}; known: {sorted(ARCHITECTURES)}") from None


def _write_checkpoint(path, architecture, config, arrays, **extra):
    """Checkpoint layout (``numpy.savez`` archive, little-endian):

    ``format`` / ``version`` / ``architecture`` (0-d strings and int),
    ``train_config`` (JSON string), ``layer_sizes`` (int64), ``W<i>``/``b<i>``
    per layer, ``norm_mean``/``norm_std`` (float64, one value per input).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        np.savez(f, format=np.array(CHECKPOINT_FORMAT), version=np.array(CHECKPOINT_VERSION),
                 architecture=np.array(architecture),
                 train_config=np.array(json.dumps(dataclasses.asdict(config), sort_keys=True)),
                 **{k: v.astype(v.dtype.newbyteorder("<")) for k, v in arrays.items()}, **extra)
    tmp.replace(path)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as data:
        if str(data["format"]) != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a model checkpoint")
        if int(data["version"]) > CHECKPOINT_VERSION:
            raise ValueError(f"{path}: checkpoint version {int(data['version'])} is newer than "
                             f"supported ({CHECKPOINT_VERSION})")
        config = TrainConfig(**json.loads(str(data["train_config"])))
        arch = str(data["architecture"])
        return ARCHITECTURES[arch].from_arrays(config, {k: data[k] for k in data.files})
