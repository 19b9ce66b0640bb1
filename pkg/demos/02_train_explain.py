"""Small end-to-end run in one process: synthesize, split, train one seed,
evaluate against the mean-intensity baseline, then Grad-CAM a positive.

    python3 demos/02_train_explain.py [out_dir] [epochs]

Without ``epochs`` the config default (120) applies, about 20 minutes on one core.
"""

import sys
import time
from pathlib import Path

import numpy as np

from pvrct.config import load_config
from pvrct.explain import export_overlay, gradcam3d
from pvrct.models import build_model, save_checkpoint
from pvrct.preprocess import map_mask_to_grid, mask_bbox
from pvrct.synthgen import dataset_specs, desk_spec, lesion_mask, write_phantoms
from pvrct.trainer import evaluate, load_dataset, mean_intensity_baseline, stratified_split, train
from pvrct.volume_io import Volume

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/train")
cfg = load_config(overrides=[f"train.max_epochs={int(sys.argv[2])}"] if len(sys.argv) > 2 else [])
epochs = cfg.train.max_epochs

specs = dataset_specs(200, cfg.synth.positive_fraction, desk_spec(), seed=123)
manifest = write_phantoms(specs, out / "data")
train_m, test_m = stratified_split(manifest, cfg.split)
tr, te = load_dataset(train_m, cfg.preprocess), load_dataset(test_m, cfg.preprocess)
print(f"train {len(tr)} ({int(tr.y.sum())} positive), test {len(te)} ({int(te.y.sum())} positive)")

model = build_model(cfg.model, 0)
t0 = time.perf_counter()
res = train(model, tr, cfg.train, seed=0,
            on_epoch=lambda e, loss: print(f"  epoch {e:3d} loss {loss:.4f}") if e % 10 == 0 else None)
rep, cm = evaluate(model, te)
print(f"trained {epochs} epochs in {time.perf_counter() - t0:.0f}s")
print(f"test BA {rep.balanced_accuracy:.3f} (sens {rep.sensitivity:.2f}, spec {rep.specificity:.2f})")
print(f"mean-intensity baseline BA {mean_intensity_baseline(tr, te).balanced_accuracy:.3f}")
print(cm.to_csv(), end="")
save_checkpoint(model, out / "model")

# Grad-CAM on the first positive test phantom
i = int(np.flatnonzero(te.y == 1)[0])
pid = te.ids[i]
heat = gradcam3d(model, te.X[i, 0])
box = mask_bbox(map_mask_to_grid(lesion_mask(specs[int(pid[1:])]), cfg.preprocess))
top = heat.grid >= 0.9
inside = np.zeros_like(top)
inside[tuple(slice(a, b) for a, b in box)] = True
print(f"{pid}: {100 * (top & inside).sum() / max(1, top.sum()):.0f}% of top-decile CAM voxels in the lesion box")
vol = Volume.from_array(te.X[i, 0], te.spacing, unit="normalized")
export_overlay(vol, heat, out / "gradcam" / pid, slice_stride=4)
