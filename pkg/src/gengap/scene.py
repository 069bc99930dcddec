"""Random acoustic scenes and binaural noisy-reverberant mixtures.

A :class:`Condition` names the databases a dataset may draw from along each
dimension.  :func:`draw_scene` turns a condition and a seed into a
:class:`SceneSpec`, which :func:`render_scene` turns into audio.
"""

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from gengap.audio import SAMPLE_RATE, write_wav
from gengap.registry import DatabaseId, Kind

SNR_RANGE_DB = (-5.0, 10.0)
LEVEL_RANGE_DBFS = (-30.0, -10.0)
MAX_NOISES = 3
SIDES = ("train", "test")


@dataclass(frozen=True)
class Condition:
    speech_dbs: frozenset
    noise_dbs: frozenset
    room_dbs: frozenset
    split_side: str = "train"

    def __post_init__(self):
        for name, kind in (("speech_dbs", Kind.SPEECH), ("noise_dbs", Kind.NOISE),
                           ("room_dbs", Kind.ROOM)):
            dbs = frozenset(getattr(self, name))
            if not dbs:
                raise ValueError(f"{name} is empty")
            if any(d.kind is not kind for d in dbs):
                raise ValueError(f"{name} holds non-{kind.value} databases")
            object.__setattr__(self, name, dbs)
        if self.split_side not in SIDES:
            raise ValueError(f"split_side must be one of {SIDES}")

    @classmethod
    def from_indices(cls, speech, noise, room, split_side="train"):
        return cls(frozenset(DatabaseId(Kind.SPEECH, j) for j in speech),
                   frozenset(DatabaseId(Kind.NOISE, j) for j in noise),
                   frozenset(DatabaseId(Kind.ROOM, j) for j in room),
                   split_side)

    def dbs(self, kind):
        return {Kind.SPEECH: self.speech_dbs, Kind.NOISE: self.noise_dbs,
                Kind.ROOM: self.room_dbs}[Kind(kind)]


@dataclass(frozen=True)
class NoiseSource:
    db: DatabaseId
    item_id: str
    offset_s: float


@dataclass(frozen=True)
class SceneSpec:
    """Everything needed to re-render one mixture exactly.

    ``brir_ids`` lists the BRIR for the target first, then one per noise;
    all come from ``room_label`` in ``room_db``.  ``n_samples`` caps the
    scene length (normally the utterance length).
    """

    target_db: DatabaseId
    target_id: str
    noises: tuple
    room_db: DatabaseId
    room_label: str
    brir_ids: tuple
    azimuths: tuple
    snr_db: float
    level_dbfs: float
    seed: int
    split_side: str
    n_samples: int

    def __post_init__(self):
        if not 1 <= len(self.noises) <= MAX_NOISES:
            raise ValueError("a scene holds 1 to 3 noise sources")
        if len(self.brir_ids) != len(self.noises) + 1 or len(self.azimuths) != len(self.brir_ids):
            raise ValueError("one BRIR per source required")
        if any(not -90.0 <= a <= 90.0 for a in self.azimuths):
            raise ValueError("azimuths must lie in [-90, 90]")

    @property
    def duration_s(self):
        return self.n_samples / SAMPLE_RATE


@dataclass(frozen=True)
class Mixture:
    mixture: np.ndarray
    speech_direct: np.ndarray
    background: np.ndarray
    spec: SceneSpec

    @property
    def n_samples(self):
        return self.mixture.shape[1]


def _choose(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def _side_or_fail(registry, db, side):
    entries = registry.side_entries(db, side) if db.kind is not Kind.NOISE else registry[db].entries
    if not entries:
        raise ValueError(f"database {db} has no items on the {side} side")
    return entries


def draw_scene(condition, registry, rng_seed):
    """Draw a scene specification; every random choice is uniform."""
    rng = np.random.default_rng(int(rng_seed))
    side = condition.split_side

    target_db = _choose(rng, sorted(condition.speech_dbs))
    utt = _choose(rng, _side_or_fail(registry, target_db, side))
    n = int(round(utt.duration * SAMPLE_RATE))
    dur = n / SAMPLE_RATE

    noises = []
    for _ in range(int(rng.integers(1, MAX_NOISES + 1))):
        db = _choose(rng, sorted(condition.noise_dbs))
        rec = _choose(rng, _side_or_fail(registry, db, side))
        start, end = registry[db].noise_interval(rec.item_id, side)
        latest = end - dur
        offset = float(rng.uniform(start, latest)) if latest > start else start
        noises.append(NoiseSource(db, rec.item_id, offset))

    room_db = _choose(rng, sorted(condition.room_dbs))
    brirs = _side_or_fail(registry, room_db, side)
    labels = sorted({e.room_label for e in brirs})
    label = _choose(rng, labels)
    in_room = [e for e in brirs if e.room_label == label]
    chosen = [_choose(rng, in_room) for _ in range(len(noises) + 1)]

    snr = float(rng.uniform(*SNR_RANGE_DB))
    level = float(rng.uniform(*LEVEL_RANGE_DBFS))
    return SceneSpec(
        target_db=target_db, target_id=utt.item_id, noises=tuple(noises), room_db=room_db,
        room_label=label, brir_ids=tuple(e.item_id for e in chosen),
        azimuths=tuple(float(e.azimuth) for e in chosen), snr_db=snr, level_dbfs=level,
        seed=int(rng_seed), split_side=side, n_samples=n)


def energy(x):
    return float(np.sum(np.square(x, dtype=np.float64)))


def compute_snr(speech_direct, background):
    """Direct speech to background energy ratio in dB, summed over ears and time."""
    if np.shape(speech_direct) != np.shape(background):
        raise ValueError("signals differ in shape")
    es, eb = energy(speech_direct), energy(background)
    if eb == 0.0:
        return np.inf
    if es == 0.0:
        return -np.inf
    return 10.0 * np.log10(es / eb)


def _convolve(x, brir_data, n):
    return fftconvolve(x[None, :], brir_data, axes=1)[:, :n]


def noise_segment(recording, interval, offset_s, n, loop=True):
    """``n`` samples from ``recording`` starting at ``offset_s``, confined to ``interval``.

    When the interval runs out, the segment wraps around to the interval
    start.
    """
    a = int(round(interval[0] * SAMPLE_RATE))
    b = min(int(round(interval[1] * SAMPLE_RATE)), len(recording))
    start = min(max(int(round(offset_s * SAMPLE_RATE)), a), b - 1)
    usable = recording[a:b]
    if start + n <= b:
        return recording[start:start + n]
    if not loop:
        raise ValueError(f"noise interval of {(b - a) / SAMPLE_RATE:g} s is shorter than the scene")
    idx = (start - a + np.arange(n)) % len(usable)
    return usable[idx]


def noise_gain(reverb, noise, target_energy):
    """Gain ``g >= 0`` with ``energy(reverb + g * noise) == target_energy``, or ``None``."""
    en, er = energy(noise), energy(reverb)
    if en == 0.0 or er >= target_energy:
        return None
    c = float(np.sum(reverb * noise))
    return (-c + np.sqrt(c * c + en * (target_energy - er))) / en


def render_scene(spec, registry, loop_noise=True):
    """Render a scene so that ``compute_snr(speech_direct, background) == spec.snr_db``.

    The reverberant speech keeps its natural level and the summed noise
    images are scaled to meet the SNR.  When the reverberation alone is
    already louder than the SNR allows, the whole background is scaled
    instead.  Finally every component is scaled so the mixture RMS over
    both ears equals ``spec.level_dbfs``.
    """
    n = spec.n_samples
    utt = registry.audio(spec.target_db, spec.target_id)[:n]
    pair = registry.direct_reverb(spec.room_db, spec.brir_ids[0])
    speech_direct = _convolve(utt, pair.direct.data, n)
    speech_reverb = _convolve(utt, pair.reverberant.data, n)

    noise_sum = np.zeros((2, n))
    for src, brir_id in zip(spec.noises, spec.brir_ids[1:]):
        rec = registry.audio(src.db, src.item_id)
        interval = registry[src.db].noise_interval(src.item_id, spec.split_side)
        seg = noise_segment(rec, interval, src.offset_s, n, loop_noise)
        img = _convolve(seg, registry.audio(spec.room_db, brir_id), n)
        e = energy(img)
        if e > 0:
            noise_sum += img / np.sqrt(e)

    es = energy(speech_direct)
    if es == 0.0:
        raise ValueError(f"scene {spec.seed}: silent direct speech, SNR undefined")
    target = es / 10.0 ** (spec.snr_db / 10.0)
    g = noise_gain(speech_reverb, noise_sum, target)
    if g is not None:
        background = speech_reverb + g * noise_sum
    else:
        background = speech_reverb + noise_sum * np.sqrt(max(energy(speech_reverb), 1e-30))
        eb = energy(background)
        if eb == 0.0:
            raise ValueError(f"scene {spec.seed}: silent background, SNR undefined")
        background = background * np.sqrt(target / eb)
    mixture = speech_direct + background
    rms = np.sqrt(energy(mixture) / mixture.size)
    k = 10.0 ** (spec.level_dbfs / 20.0) / rms
    speech_direct = speech_direct * k
    background = background * k
    return Mixture(speech_direct + background, speech_direct, background, spec)


def derive_seed(*parts):
    """Stable 32-bit seed from integers and strings."""
    words = []
    for p in parts:
        if isinstance(p, str):
            words.extend(p.encode())
        else:
            words.append(int(p))
    return int(np.random.SeedSequence(words).generate_state(1)[0])


@dataclass
class Dataset:
    """Lazily rendered collection of scenes."""

    specs: list
    registry: object = field(repr=False, default=None)

    @property
    def total_samples(self):
        return sum(s.n_samples for s in self.specs)

    @property
    def total_hours(self):
        return self.total_samples / SAMPLE_RATE / 3600.0

    @property
    def durations(self):
        return [s.duration_s for s in self.specs]

    def __len__(self):
        return len(self.specs)

    def __getitem__(self, i):
        return render_scene(self.specs[i], self.registry)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def generate_dataset(condition, hours, master_seed, registry, min_scene_s=0.5):
    """Draw scenes until their total duration reaches ``hours`` exactly.

    Scene ``i`` is drawn with ``derive_seed(master_seed, i)``.  The final
    scene is shortened to land on the requested sample count; when that
    would leave it shorter than ``min_scene_s`` the previous scene gives up
    the difference instead.
    """
    if hours <= 0:
        raise ValueError("hours must be positive")
    target = int(np.ceil(hours * 3600.0 * SAMPLE_RATE))
    min_n = int(min_scene_s * SAMPLE_RATE)
    specs, total = [], 0
    i = 0
    while total < target:
        spec = draw_scene(condition, registry, derive_seed(master_seed, i))
        remaining = target - total
        if spec.n_samples >= remaining:
            if remaining < min_n and specs:
                short = min_n - remaining
                prev = specs[-1]
                specs[-1] = _with_length(prev, prev.n_samples - short)
                remaining = min_n
            spec = _with_length(spec, remaining)
        specs.append(spec)
        total = sum(s.n_samples for s in specs)
        i += 1
    return Dataset(specs, registry)


def _with_length(spec, n):
    return replace(spec, n_samples=int(n))


# --- provenance audit ----------------------------------------------------

@dataclass
class Usage:
    """Items consumed by a dataset, per dimension."""

    utterances: set = field(default_factory=set)
    brirs: set = field(default_factory=set)
    noise: dict = field(default_factory=dict)

    def overlap(self, other):
        """Human-readable list of items both usages touch."""
        found = [f"utterance {d}/{i}" for d, i in sorted(self.utterances & other.utterances)]
        found += [f"BRIR {d}/{i}" for d, i in sorted(self.brirs & other.brirs)]
        for key in sorted(set(self.noise) & set(other.noise)):
            for a0, a1 in self.noise[key]:
                for b0, b1 in other.noise[key]:
                    if a0 < b1 and b0 < a1:
                        found.append(f"noise {key[0]}/{key[1]} [{max(a0, b0):g}, {min(a1, b1):g})")
        return found


def dataset_usage(dataset):
    usage = Usage()
    reg = dataset.registry
    for spec in dataset.specs:
        usage.utterances.add((spec.target_db, spec.target_id))
        usage.brirs.update((spec.room_db, b) for b in spec.brir_ids)
        dur = spec.duration_s
        for src in spec.noises:
            a, b = reg[src.db].noise_interval(src.item_id, spec.split_side)
            end = src.offset_s + dur
            spans = [(src.offset_s, min(end, b))]
            if end > b:
                spans = [(a, b)]
            usage.noise.setdefault((src.db, src.item_id), []).extend(spans)
    return usage


# --- persistence ---------------------------------------------------------

INDEX_COLUMNS = ["index", "seed", "split_side", "target_db", "target_id", "noises", "room_db",
                 "room_label", "brir_ids", "azimuths", "snr_db", "level_dbfs", "n_samples"]


def spec_to_row(i, s):
    return {
        "index": i, "seed": s.seed, "split_side": s.split_side,
        "target_db": str(s.target_db), "target_id": s.target_id,
        "noises": ";".join(f"{n.db}:{n.item_id}@{n.offset_s!r}" for n in s.noises),
        "room_db": str(s.room_db), "room_label": s.room_label,
        "brir_ids": ";".join(s.brir_ids), "azimuths": ";".join(repr(a) for a in s.azimuths),
        "snr_db": repr(s.snr_db), "level_dbfs": repr(s.level_dbfs), "n_samples": s.n_samples,
    }


def row_to_spec(row):
    noises = []
    for part in row["noises"].split(";"):
        db, _, rest = part.partition(":")
        item, _, offset = rest.rpartition("@")
        noises.append(NoiseSource(DatabaseId.parse(db), item, float(offset)))
    return SceneSpec(
        target_db=DatabaseId.parse(row["target_db"]), target_id=row["target_id"],
        noises=tuple(noises), room_db=DatabaseId.parse(row["room_db"]),
        room_label=row["room_label"], brir_ids=tuple(row["brir_ids"].split(";")),
        azimuths=tuple(float(a) for a in row["azimuths"].split(";")),
        snr_db=float(row["snr_db"]), level_dbfs=float(row["level_dbfs"]),
        seed=int(row["seed"]), split_side=row["split_side"], n_samples=int(row["n_samples"]))


def write_index(dataset, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, INDEX_COLUMNS, lineterminator="\n")
        w.writeheader()
        for i, s in enumerate(dataset.specs):
            w.writerow(spec_to_row(i, s))
    return path


def read_index(path, registry=None):
    with open(path, newline="") as f:
        specs = [row_to_spec(r) for r in csv.DictReader(f)]
    return Dataset(specs, registry)


def write_dataset(dataset, out_dir):
    """Render every scene to ``mixture_/speech_/background_%06d.wav`` plus ``index.csv``."""
    out_dir = Path(out_dir)
    for i, mix in enumerate(dataset):
        write_wav(out_dir / f"mixture_{i:06d}.wav", mix.mixture)
        write_wav(out_dir / f"speech_{i:06d}.wav", mix.speech_direct)
        write_wav(out_dir / f"background_{i:06d}.wav", mix.background)
    return write_index(dataset, out_dir / "index.csv")
