"""Train the FFNN enhancer on one matched condition and compare it to the oracle mask.

About a minute on one core.  Run with ``python3 demos/train_ffnn.py``.
"""

import tempfile
from pathlib import Path

from gengap.metrics import NATIVE_METRICS, dataset_means, evaluate
from gengap.model import FfnnModel, OracleIrmModel, TrainConfig
from gengap.registry import Registry, synth_all
from gengap.scene import Condition, generate_dataset

root = Path(tempfile.mkdtemp(prefix="gengap_")) / "dbs"
synth_all(root, master_seed=7)
registry = Registry.load(root)

train = generate_dataset(Condition.from_indices([1], [1], [1], "train"), 0.05, 1, registry)
test = generate_dataset(Condition.from_indices([1], [1], [1], "test"), 0.01, 2, registry)
print(f"{len(train)} training mixtures ({train.total_hours * 60:.1f} min), {len(test)} test")

model = FfnnModel(TrainConfig(epochs=20, batch_budget_s=4.0, seed=0)).train(train)
print("loss by epoch:", " ".join(f"{v:.4f}" for v in model.loss_history))

for name, m in (("ffnn", model), ("oracle IRM", OracleIrmModel())):
    score = dataset_means(evaluate(m, test, NATIVE_METRICS))["delta_snr"]
    print(f"{name:>10}: delta SNR {score:+.2f} dB")
