# %% [markdown]
# # Segments by counterfactual motion, and a small contact probe
#
# Point CWM_CHECKPOINT at a trained run directory (e.g. the acceptance
# cache under .cache/acceptance/<hash>); an untrained model gives empty
# segments and chance-level probes.

# %%
import os
from pathlib import Path

import numpy as np

from cwm.predictor import PredictorConfig, init_state, load_state
from cwm.probe import iou, run_probe
from cwm.spriteworld import WorldConfig, generate
from cwm.structures import check_constructive, discover_objects, extract_segment

world = WorldConfig()
if os.environ.get("CWM_CHECKPOINT"):
    ckpt = Path(os.environ["CWM_CHECKPOINT"])
    state, _ = load_state(ckpt / "checkpoint" if (ckpt / "checkpoint").is_dir() else ckpt)
else:
    state = init_state(PredictorConfig(encoder_dim=64, encoder_depth=2, decoder_dim=32, decoder_depth=1))

# %%
ep = generate(world, 50_000_000)
x = ep.frames[0]
gt = ep.gt_masks[0, 0]
pixel = tuple(int(v) for v in np.argwhere(gt).mean(0).round())  # roughly the red sprite's centre
seg = extract_segment(state, x, pixel, rng=np.random.default_rng(0))
print("area", int(seg.mask.sum()), "IoU", iou(seg.mask, gt), "invariants", check_constructive(seg))

# %%
# each iteration keeps moving patches inside the last segment and holding patches outside it
[(r["motion"], r["stop"], r["area"]) for r in seg.records]

# %%
objs = discover_objects(state, x, max_objects=2, rng=np.random.default_rng(1))
[(o.query, int(o.mask.sum())) for o in objs]

# %%
# tiny probe: 40 train / 20 test episodes, four ablation rows
res = run_probe(state, world, "ocd", n_train=40, n_test=20, ablate=True, workers=1)
[(r["row"], r["dim"], r["accuracy"]) for r in res["ablation"]]
