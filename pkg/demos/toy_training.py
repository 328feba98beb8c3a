"""Train a small detector on synthetic shapes and look at what it predicts.

A shorter run than the default (about four minutes on one core).  The full default run is
``deformdet train``.

    python demos/toy_training.py [out_dir]
"""

import sys

import numpy as np
import torch

from deformdet.data import CLASSES, gen_dataset
from deformdet.evaluation import detections_from_outputs
from deformdet.train import RunConfig, export_curves, train

out_dir = sys.argv[1] if len(sys.argv) > 1 else "runs/demo"

# %% Half the default data, eight epochs.  Fewer than ~250 optimizer steps
# and the model is still guessing box sizes.
cfg = RunConfig(n_train=512, n_val=64, epochs=8, lr_drop=7, out_dir=out_dir)
val = gen_dataset(cfg.scene_spec("val"), cfg.n_val)
print("first validation image has", [CLASSES[c] for c in val.labels[0]], "at", val.boxes[0].round(2).tolist())

model, rows = train(cfg, val_set=val)
for r in rows:
    print(f"epoch {r.epoch:2d}  val loss {r.loss:6.3f}  AP50 {r.ap50:.3f}  AP {r.ap:.3f}")
export_curves(rows, f"{out_dir}/curves.csv")

# %% Top detections on the first validation image
model.eval()
with torch.no_grad():
    out = model(torch.as_tensor(val.images[:1]))
last = out["layers"][-1]
for det in detections_from_outputs(last["logits"], last["boxes"], top_k=3):
    box = np.round([det["cx"], det["cy"], det["w"], det["h"]], 2).tolist()
    print(f"{CLASSES[det['class']]:>9}  score {det['score']:.2f}  box {box}")
