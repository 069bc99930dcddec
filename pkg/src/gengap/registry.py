"""Database manifests, train/test split rules and synthetic databases.

A database is a directory holding audio files and a ``manifest.csv``.  The
three acoustic dimensions (speech, noise, room) each have ``M`` databases
indexed from 1.
"""

import csv
import dataclasses
import enum
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps

from gengap import brir as brir_mod
from gengap.audio import SAMPLE_RATE, read_wav, wav_duration, write_wav

log = logging.getLogger(__name__)

N_DATABASES = 5
TRAIN_FRACTION = 0.8
MANIFEST_COLUMNS = ["item_id", "path", "duration", "room_label", "azimuth_deg", "split",
                    "boundary_s"]


class Kind(str, enum.Enum):
    SPEECH = "speech"
    NOISE = "noise"
    ROOM = "room"


KINDS = (Kind.SPEECH, Kind.NOISE, Kind.ROOM)


@dataclass(frozen=True, order=True)
class DatabaseId:
    kind: Kind
    index: int

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.index < 1:
            raise ValueError(f"database index must be >= 1, got {self.index}")

    def __str__(self):
        return f"{self.kind.value}_{self.index}"

    @classmethod
    def parse(cls, text):
        kind, _, index = text.rpartition("_")
        return cls(Kind(kind), int(index))


@dataclass(frozen=True)
class ManifestEntry:
    item_id: str
    path: str
    duration: float
    room_label: str | None = None
    azimuth: float | None = None

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError(f"{self.item_id}: duration must be positive")
        if (self.azimuth is None) != (self.room_label is None):
            raise ValueError(f"{self.item_id}: room_label and azimuth go together")
        if self.azimuth is not None and not -90.0 <= self.azimuth <= 90.0:
            raise ValueError(f"{self.item_id}: azimuth {self.azimuth} outside [-90, 90]")


@dataclass(frozen=True)
class Manifest:
    """Inventory of one database.

    ``split`` maps item ids to ``"train"``/``"test"`` for speech and rooms,
    and to the train/test time boundary in seconds for noise recordings.
    """

    database: DatabaseId
    entries: tuple
    split: dict = field(default_factory=dict)
    root: Path = Path(".")
    warnings: tuple = ()

    def __post_init__(self):
        entries = tuple(sorted(self.entries, key=lambda e: e.item_id))
        ids = [e.item_id for e in entries]
        if len(set(ids)) != len(ids):
            raise ValueError(f"{self.database}: duplicate item ids")
        for e in entries:
            if (e.azimuth is not None) != (self.database.kind is Kind.ROOM):
                raise ValueError(f"{e.item_id}: azimuth present iff kind is room")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "root", Path(self.root))

    def __len__(self):
        return len(self.entries)

    def entry(self, item_id):
        return self._index()[item_id]

    def _index(self):
        cached = self.__dict__.get("_by_id")
        if cached is None:
            cached = {e.item_id: e for e in self.entries}
            object.__setattr__(self, "_by_id", cached)
        return cached

    def audio_path(self, entry):
        return self.root / entry.path

    @property
    def is_split(self):
        return all(e.item_id in self.split for e in self.entries)

    def side(self, side):
        """Entries assigned to ``side`` (speech and room databases)."""
        return [e for e in self.entries if self.split.get(e.item_id) == side]

    def noise_interval(self, item_id, side):
        """The ``[start, end)`` seconds of a noise recording usable on ``side``."""
        t = self.split[item_id]
        return (0.0, t) if side == "train" else (t, self.entry(item_id).duration)

    def rooms(self):
        labels = []
        for e in self.entries:
            if e.room_label not in labels:
                labels.append(e.room_label)
        return sorted(labels)


def _require_kind(manifest, kind):
    if manifest.database.kind is not kind:
        raise ValueError(f"{manifest.database} is not a {kind.value} database")


def split_speech(manifest):
    """First ceil(80 %) of utterances in item-id order go to training."""
    _require_kind(manifest, Kind.SPEECH)
    if not manifest.entries:
        raise ValueError(f"{manifest.database}: empty database")
    n_train = math.ceil(TRAIN_FRACTION * len(manifest.entries))
    split = {e.item_id: ("train" if i < n_train else "test")
             for i, e in enumerate(manifest.entries)}
    return dataclasses.replace(manifest, split=split)


def split_noise(manifest, min_usable_s=1.0):
    """Each recording is cut at 80 % of its duration: train before, test after."""
    _require_kind(manifest, Kind.NOISE)
    if not manifest.entries:
        raise ValueError(f"{manifest.database}: empty database")
    split = {}
    for e in manifest.entries:
        boundary = TRAIN_FRACTION * e.duration
        if min(boundary, e.duration - boundary) < min_usable_s:
            raise ValueError(
                f"{manifest.database}/{e.item_id}: {e.duration:g} s recording leaves less than "
                f"{min_usable_s:g} s on one side of the split")
        split[e.item_id] = boundary
    return dataclasses.replace(manifest, split=split)


def split_brir(manifest):
    """Within each room, BRIRs at even azimuth-order positions train, odd ones test."""
    _require_kind(manifest, Kind.ROOM)
    if not manifest.entries:
        raise ValueError(f"{manifest.database}: empty database")
    split = {}
    warnings = list(manifest.warnings)
    for label in manifest.rooms():
        room = sorted((e for e in manifest.entries if e.room_label == label),
                      key=lambda e: (e.azimuth, e.item_id))
        if len(room) == 1:
            msg = f"{manifest.database}/{label}: single BRIR assigned to train, none for test"
            log.warning(msg)
            warnings.append(msg)
        for pos, e in enumerate(room):
            split[e.item_id] = "train" if pos % 2 == 0 else "test"
    return dataclasses.replace(manifest, split=split, warnings=tuple(warnings))


SPLITTERS = {Kind.SPEECH: split_speech, Kind.NOISE: split_noise, Kind.ROOM: split_brir}


def split_manifest(manifest):
    return SPLITTERS[manifest.database.kind](manifest)


# --- manifest files -------------------------------------------------------

def write_manifest(manifest, path=None):
    path = Path(path) if path is not None else manifest.root / "manifest.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for e in manifest.entries:
            s = manifest.split.get(e.item_id)
            side, boundary = ("", repr(s)) if isinstance(s, float) else (s or "", "")
            w.writerow([e.item_id, e.path, repr(e.duration), e.room_label or "",
                        "" if e.azimuth is None else repr(e.azimuth), side, boundary])
    return path


def read_manifest(path, database):
    """Load a manifest; its parent directory becomes the audio root."""
    path = Path(path)
    entries, split = [], {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            entries.append(ManifestEntry(
                item_id=row["item_id"],
                path=row["path"],
                duration=float(row["duration"]),
                room_label=row["room_label"] or None,
                azimuth=float(row["azimuth_deg"]) if row["azimuth_deg"] else None,
            ))
            if row["boundary_s"]:
                split[row["item_id"]] = float(row["boundary_s"])
            elif row["split"]:
                split[row["item_id"]] = row["split"]
    return Manifest(database, tuple(entries), split, root=path.parent)


_AZIMUTH_RE = re.compile(r"az(?:imuth)?[_=]?([+-]?\d+(?:\.\d+)?)", re.IGNORECASE)


def import_directory(root, database):
    """Build a manifest from a directory tree of WAV files.

    Room databases are expected as ``<room_label>/<...az<degrees>...>.wav``.
    Item ids are the POSIX relative paths without the extension.
    """
    root = Path(root)
    entries = []
    for wav in sorted(root.rglob("*.wav")):
        rel = wav.relative_to(root)
        item_id = rel.with_suffix("").as_posix()
        kw = {}
        if database.kind is Kind.ROOM:
            m = _AZIMUTH_RE.search(wav.stem)
            if m is None:
                raise ValueError(f"{rel}: cannot parse azimuth from file name")
            kw = dict(room_label=rel.parts[0] if len(rel.parts) > 1 else "room",
                      azimuth=float(m.group(1)))
        entries.append(ManifestEntry(item_id, rel.as_posix(), wav_duration(wav), **kw))
    return Manifest(database, tuple(entries), root=root)


# --- synthetic databases --------------------------------------------------

@dataclass(frozen=True)
class SynthProfile:
    """Sizes of synthetic databases.  Per-database acoustics derive from the seed."""

    utterance_s: tuple = (1.5, 3.0)
    noise_s: float = 20.0
    rooms: int = 2
    rt60_range: tuple = (0.2, 0.6)
    sample_rate: int = SAMPLE_RATE


def _speech_character(rng):
    # per-database pitch, vowel space and speaking rate, so corpora sound different
    return dict(
        f0=rng.uniform(90.0, 240.0),
        formants=np.sort(rng.uniform([350.0, 1000.0, 2200.0], [850.0, 2000.0, 3200.0])),
        spread=rng.uniform(0.1, 0.3),
        bandwidth=rng.uniform(60.0, 150.0),
        syllable_s=rng.uniform(0.15, 0.3),
        pause_prob=rng.uniform(0.25, 0.45),
        breath=rng.uniform(0.02, 0.15),
    )


def _resonator(fc, bw, sample_rate):
    r = np.exp(-np.pi * bw / sample_rate)
    theta = 2 * np.pi * fc / sample_rate
    return [1.0 - r], [1.0, -2.0 * r * np.cos(theta), r * r]


def synth_utterance(rng, character, duration_s, sample_rate=SAMPLE_RATE):
    """Source-filter babble: a glottal pulse train through per-syllable formant resonators.

    Syllables are separated by random pauses; the first one starts at t = 0.
    """
    n = int(round(duration_s * sample_rate))
    out = np.zeros(n)
    f0 = character["f0"] * rng.uniform(0.9, 1.1)
    pos, first = 0, True
    while pos < n:
        length = int(character["syllable_s"] * rng.uniform(0.6, 1.4) * sample_rate)
        length = min(length, n - pos)
        if not first and rng.random() < character["pause_prob"]:
            pos += length
            continue
        first = False
        t = np.arange(length) / sample_rate
        contour = f0 * (1.0 + rng.uniform(-0.15, 0.15) + rng.uniform(-0.1, 0.1) * t / max(t[-1], 1e-3))
        phase = np.cumsum(contour) / sample_rate
        pulses = np.diff(np.floor(phase), prepend=0.0)
        source = sps.lfilter([1.0], [1.0, -0.9], pulses)
        source += character["breath"] * rng.standard_normal(length)
        seg = source
        for fc in character["formants"]:
            fc = fc * np.exp(character["spread"] * rng.standard_normal())
            b, a = _resonator(min(fc, 0.45 * sample_rate), character["bandwidth"], sample_rate)
            seg = sps.lfilter(b, a, seg)
        env = np.sin(np.pi * np.arange(length) / length) ** 0.5
        out[pos:pos + length] = seg * env * rng.uniform(0.5, 1.0)
        pos += length
    return 0.1 * out / np.sqrt(np.mean(out**2))


def _noise_character(rng):
    return dict(
        tilt_db=rng.uniform(-9.0, 3.0),
        peak_hz=rng.uniform(200.0, 5000.0),
        peak_db=rng.uniform(0.0, 15.0),
        mod_hz=rng.uniform(0.5, 8.0),
        mod_depth=rng.uniform(0.0, 0.9),
    )


def synth_noise(rng, character, duration_s, sample_rate=SAMPLE_RATE):
    """Spectrally shaped Gaussian noise with slow amplitude fluctuations."""
    n = int(round(duration_s * sample_rate))
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / sample_rate)
    tilt = character["tilt_db"] * rng.uniform(0.8, 1.2)
    peak = character["peak_hz"] * rng.uniform(0.8, 1.25)
    shape_db = tilt * np.log2(np.maximum(f, 50.0) / 1000.0)
    shape_db += character["peak_db"] / (1.0 + (np.log2(np.maximum(f, 1.0) / peak) / 0.5) ** 2)
    x = np.fft.irfft(spec * 10 ** (shape_db / 20.0), n)
    t = np.arange(n) / sample_rate
    depth = character["mod_depth"]
    mod = 1.0 - depth * 0.5 * (1.0 + np.sin(2 * np.pi * character["mod_hz"] * t
                                           + rng.uniform(0, 2 * np.pi)))
    x = x * mod
    return 0.1 * x / np.sqrt(np.mean(x**2))


def _room_profiles(rng, n_rooms, rt60_range):
    lo, hi = rt60_range
    centre = rng.uniform(lo, hi)
    drr = rng.uniform(6.0, 14.0)
    profiles = []
    for _ in range(n_rooms):
        profiles.append(brir_mod.RoomProfile(
            rt60_s=float(np.clip(centre * rng.uniform(0.85, 1.15), 0.1, None)),
            direct_delay_ms=float(rng.uniform(1.0, 4.0)),
            drr_db=float(drr + rng.uniform(-1.5, 1.5)),
        ))
    return profiles


def synth_database(kind, seed, n_items, profile=SynthProfile(), out_dir=".", index=1):
    """Write a synthetic database to ``out_dir`` and return its (unsplit) manifest.

    Output is a pure function of ``(kind, seed, n_items, profile)``; the
    seed also fixes the database's acoustic character.
    """
    kind = Kind(kind)
    if n_items < 1:
        raise ValueError("n_items must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([int(seed), KINDS.index(kind)])
    sr = profile.sample_rate
    database = DatabaseId(kind, index)
    entries = []
    if kind is Kind.SPEECH:
        character = _speech_character(rng)
        for i in range(n_items):
            dur = float(np.round(rng.uniform(*profile.utterance_s), 3))
            x = synth_utterance(rng, character, dur, sr)
            item_id = f"utt{i:05d}"
            write_wav(out_dir / f"{item_id}.wav", x, sr)
            entries.append(ManifestEntry(item_id, f"{item_id}.wav", len(x) / sr))
    elif kind is Kind.NOISE:
        character = _noise_character(rng)
        for i in range(n_items):
            x = synth_noise(rng, character, profile.noise_s, sr)
            item_id = f"noise{i:03d}"
            write_wav(out_dir / f"{item_id}.wav", x, sr)
            entries.append(ManifestEntry(item_id, f"{item_id}.wav", len(x) / sr))
    else:
        n_rooms = min(profile.rooms, n_items)
        per_room = np.array_split(np.arange(n_items), n_rooms)
        rooms = _room_profiles(rng, n_rooms, profile.rt60_range)
        for r, (members, room) in enumerate(zip(per_room, rooms)):
            label = f"room{r + 1}"
            azimuths = np.linspace(-90.0, 90.0, len(members)) if len(members) > 1 else [0.0]
            room_seed = int(rng.integers(2**31))
            for j, az in enumerate(azimuths):
                az = float(np.round(az, 2))
                b = brir_mod.synth_brir(room_seed, room, az, sr, room_label=label)
                item_id = f"{label}_{j:03d}"
                write_wav(out_dir / f"{item_id}.wav", b.data, sr)
                entries.append(ManifestEntry(item_id, f"{item_id}.wav", len(b) / sr,
                                             room_label=label, azimuth=az))
    manifest = Manifest(database, tuple(entries), root=out_dir)
    write_manifest(manifest)
    return manifest


# --- registry of all databases -------------------------------------------

class Registry:
    """Split manifests for every database plus a read-through audio cache."""

    def __init__(self, manifests):
        self.manifests = {}
        for m in manifests:
            self.manifests[m.database] = m if m.is_split else split_manifest(m)
        self._audio = {}
        self._sides = {}
        self._splits = {}

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_audio"] = {}
        state["_splits"] = {}
        return state

    def __getitem__(self, database):
        try:
            return self.manifests[database]
        except KeyError:
            known = ", ".join(str(d) for d in sorted(self.manifests))
            raise KeyError(f"unknown database {database}; known: {known}") from None

    def __contains__(self, database):
        return database in self.manifests

    def databases(self, kind=None):
        return sorted(d for d in self.manifests if kind is None or d.kind is Kind(kind))

    def side_entries(self, database, side):
        key = (database, side)
        if key not in self._sides:
            self._sides[key] = self[database].side(side)
        return self._sides[key]

    def audio(self, database, item_id):
        key = (database, item_id)
        if key not in self._audio:
            m = self[database]
            self._audio[key] = read_wav(m.audio_path(m.entry(item_id)))
        return self._audio[key]

    def brir(self, database, item_id):
        e = self[database].entry(item_id)
        return brir_mod.Brir.from_array(self.audio(database, item_id),
                                        room_label=e.room_label, azimuth=e.azimuth)

    def direct_reverb(self, database, item_id):
        key = (database, item_id)
        if key not in self._splits:
            self._splits[key] = brir_mod.split_direct_reverb(self.brir(database, item_id))
        return self._splits[key]

    @classmethod
    def load(cls, root):
        """Load every ``<kind>_<index>/manifest.csv`` under ``root``."""
        root = Path(root)
        manifests = []
        for path in sorted(root.glob("*_*/manifest.csv")):
            manifests.append(read_manifest(path, DatabaseId.parse(path.parent.name)))
        if not manifests:
            raise FileNotFoundError(f"no database manifests under {root}")
        return cls(manifests)


DEFAULT_ITEMS = {Kind.SPEECH: 40, Kind.NOISE: 6, Kind.ROOM: 16}


def synth_all(root, master_seed, n_databases=N_DATABASES, items=None, profile=SynthProfile()):
    """Create ``n_databases`` synthetic databases per dimension under ``root``."""
    items = {**DEFAULT_ITEMS, **(items or {})}
    manifests = []
    for kind in KINDS:
        for j in range(1, n_databases + 1):
            seed = int(np.random.SeedSequence([int(master_seed), KINDS.index(kind), j])
                       .generate_state(1)[0])
            db = DatabaseId(kind, j)
            m = split_manifest(synth_database(kind, seed, items[kind], profile,
                                              Path(root) / str(db), index=j))
            write_manifest(m)
            manifests.append(m)
    return Registry(manifests)
