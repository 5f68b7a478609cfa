"""Evaluate two quickly-trained models, render the comparison table, and
export the five-column qualitative grid.

Run:  python3 demos/04_evaluate_and_report.py   (~3 minutes on one core)
"""

from vertseg.data import extract_slices, make_synthetic_dataset
from vertseg.evaluation import MetricsReport, evaluate, export_qualitative
from vertseg.network import (ModelConfig, build_doubleunet_baseline,
                             build_doubleunet_pp)
from vertseg.training import TrainConfig, train

pairs = make_synthetic_dataset(3, seed=12, shape=(48, 48, 48))
train_slices, eval_slices = [], []
for i, (img, mask) in enumerate(pairs):
    phase = "train" if i == 0 else "test"
    sl = extract_slices(img, mask, "sagittal", volume_id=f"p{i}",
                        phase=phase, size=48)
    (train_slices if phase == "train" else eval_slices).extend(sl[::2])
print(f"{len(train_slices)} training and {len(eval_slices)} test slices")

cfg = TrainConfig(epochs=40, batch_size=4, seed=0,
                  lr_start=2e-4, lr_peak=3e-3, lr_final=1e-3)
models = {}
for name, builder in (("doubleunet", build_doubleunet_baseline),
                      ("doubleunet_pp", build_doubleunet_pp)):
    model = builder(ModelConfig.desk(seed=0, input_size=(48, 48)))
    model, _ = train(model, {"train": train_slices}, cfg)
    models[name] = model
    print(f"trained {name}")

report = MetricsReport(provenance={"dataset_id": "synthetic-demo"})
for name, model in models.items():
    report.add(evaluate(model, eval_slices, "sagittal", "test",
                        model_name=name))
print()
print(report.to_markdown())

grid = export_qualitative(models["doubleunet"], models["doubleunet_pp"],
                          eval_slices[:3], ".")
print(f"wrote {grid} (baseline mask1/mask2, improved mask1/mask2, ground truth)")
