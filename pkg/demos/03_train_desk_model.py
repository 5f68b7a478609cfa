"""Train the desk-scale model on phantom slices and plot the learning-rate
schedule next to the loss/F1 curves.

Run:  python3 demos/03_train_desk_model.py     (~2 minutes on one core;
writes training_demo.png and desk_weights.vsw)
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from vertseg.data import extract_slices, make_synthetic_dataset
from vertseg.network import ModelConfig, build_doubleunet_pp, count_parameters, \
    save_weights
from vertseg.training import TrainConfig, lr_at, train

img, mask = make_synthetic_dataset(1, seed=7)[0]
slices = extract_slices(img, mask, "sagittal", volume_id="p0", size=64)
samples = slices[len(slices) // 2 - 2:len(slices) // 2 + 2]
print(f"training on {len(samples)} slices of one phantom")

model = build_doubleunet_pp(ModelConfig.desk(seed=0))
print(f"desk model parameters: {count_parameters(model):,}")

cfg = TrainConfig(epochs=120, batch_size=4, seed=0,
                  lr_start=2e-4, lr_peak=3e-3, lr_final=1e-3)
model, history = train(model, {"train": samples}, cfg)
print(f"final train F1 = {history.rows[-1]['train_f1']:.3f}")

save_weights(model, "desk_weights.vsw")
history.to_csv("desk_history.csv")

fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
epochs = [r["epoch"] for r in history.rows]
axes[0].plot(epochs, [lr_at(e, cfg) for e in epochs])
axes[0].set_title("learning-rate schedule")
axes[0].set_xlabel("epoch")
axes[1].plot(epochs, [r["train_loss"] for r in history.rows])
axes[1].set_title("loss (BCE + Dice)")
axes[2].plot(epochs, [r["train_f1"] for r in history.rows])
axes[2].set_title("train F1")
for ax in axes:
    ax.grid(alpha=0.3)
fig.tight_layout()
fig.savefig("training_demo.png", dpi=110)
print("wrote training_demo.png, desk_history.csv, desk_weights.vsw")
