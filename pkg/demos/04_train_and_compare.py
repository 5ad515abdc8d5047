"""Train IWD-QUEEN and IWD-Transformer on a small synthetic scene and compare them.

Uses a reduced scene and a few epochs so it finishes in about a minute.
"""

# %%
from dataclasses import replace

from iwdqueen import datagen
from iwdqueen.ddm_core import passes_filter
from iwdqueen.evaluation import metrics_from_labels
from iwdqueen.models import build_model, classify, parameter_census
from iwdqueen.training import TrainConfig, predict_arrays, split_by_id, stack_records, train

scene = replace(datagen.bundled_scene("default"), n_tracks=40)
ds = datagen.generate(scene)
kept = [r for r in ds.records if passes_filter(r)]
tr, va = split_by_id(kept)
print(f"{len(ds.records)} records, {len(kept)} pass the filter: train {len(tr)}, val {len(va)}")

# %% Both models share the transformer encoder and differ in the refinement block.
models = {
    "IWD-QUEEN": build_model("queen", 0),
    "IWD-QUEEN without SE": build_model("queen", 0, use_se=False),
    "IWD-Transformer": build_model("transformer", 0),
}
for name, m in models.items():
    c = parameter_census(m)
    print(f"{name:22s} qubits {c['qubits']:3d}  quantum angles {c['quantum_angles']:4d}  classical {c['classical']}")

# %% Train with BCE + soft-kappa loss, batch 100, Adam at 1e-3.
xv, yv = stack_records(va)
for name, m in models.items():
    train(m, tr, TrainConfig(epochs=5, seed=0))
    met = metrics_from_labels(classify(predict_arrays(m, xv)), yv)
    print(f"{name:22s} F1 {met.f1:.3f}  kappa {met.kappa:.3f}  OA {met.oa:.3f}")
