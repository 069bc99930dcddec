"""A small five-fold generalization-gap experiment.

The oracle IRM model runs in seconds and always shows a zero gap, since it
is not trained.  Pass ``ffnn`` as the first argument to train real models
(several minutes).
"""

import sys
import tempfile
from pathlib import Path

from gengap import crossval as cv
from gengap.registry import Registry, synth_all

arch = sys.argv[1] if len(sys.argv) > 1 else "oracle"
out = Path(tempfile.mkdtemp(prefix="gengap_"))
synth_all(out / "dbs", master_seed=7)
registry = Registry.load(out / "dbs")

config = cv.ExperimentConfig(architecture=arch, n_values=(1,),
                             mismatches=tuple(cv.parse_mismatches("noise;speech,noise,room")),
                             train_hours=0.02, test_hours=0.005, epochs=10)
for r in cv.run_experiment(config, registry, out / "cv"):
    print(f"N={r.n} {r.mismatch:<18} E={[round(v, 2) for v in r.scores]}")
    print(f"{'':<22} E_ref={[round(v, 2) for v in r.ref_scores]}  gap {cv.format_gap(r.gap)}")
print((out / "cv" / "summary.txt").read_text())
