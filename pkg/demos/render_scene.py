"""Synthesize the databases, draw one scene and check its SNR.

Run with ``python3 demos/render_scene.py [out_dir]``.  The rendered
mixture and its two components are written as WAV files.
"""

import sys
import tempfile
from pathlib import Path

from gengap.audio import write_wav
from gengap.registry import Registry, synth_all
from gengap.scene import Condition, compute_snr, derive_seed, draw_scene, render_scene

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="gengap_"))
synth_all(out / "dbs", master_seed=0)
registry = Registry.load(out / "dbs")

# speech from databases 1 and 2, noise from 3, rooms from 4, training side
cond = Condition.from_indices([1, 2], [3], [4], "train")
spec = draw_scene(cond, registry, derive_seed(0, 0))
mix = render_scene(spec, registry)

print(f"target {spec.target_db}/{spec.target_id}, {spec.duration_s:.2f} s")
print(f"room {spec.room_db}/{spec.room_label}, azimuths {spec.azimuths}")
print(f"{len(spec.noises)} noise source(s): " + ", ".join(f"{n.db}/{n.item_id}@{n.offset_s:.1f}s"
                                                         for n in spec.noises))
print(f"requested SNR {spec.snr_db:.3f} dB, measured "
      f"{compute_snr(mix.speech_direct, mix.background):.3f} dB")

for name in ("mixture", "speech_direct", "background"):
    write_wav(out / f"{name}.wav", getattr(mix, name))
print(f"wrote WAVs to {out}")
