# %% [markdown]
# # Train a small predictor, then read flow out of it
#
# A narrow model trained for a few hundred steps is enough to see the
# loss curve cross the copy baseline.  The default toy config takes
# about 1 s per step on one core; set CWM_CHECKPOINT to a trained run to
# skip training here.

# %%
import logging
import os
from pathlib import Path

import numpy as np

from cwm.predictor import PredictorConfig, TrainConfig, load_state, train
from cwm.spriteworld import WorldConfig, generate
from cwm.structures import flow_field
from cwm.probe import epe

logging.basicConfig(level=logging.INFO, format="%(message)s")
world = WorldConfig()

# %%
if os.environ.get("CWM_CHECKPOINT"):
    ckpt = Path(os.environ["CWM_CHECKPOINT"])
    state, _ = load_state(ckpt / "checkpoint" if (ckpt / "checkpoint").is_dir() else ckpt)
else:
    pc = PredictorConfig(encoder_dim=64, encoder_depth=2, decoder_dim=32, decoder_depth=1)
    tc = TrainConfig(steps=1500, base_lr=0.1, log_every=250)
    res = train(pc, world, tc, progress=True)
    state = res.state
    # holdout vs copy baseline at each log point
    [(r["step"], round(r["holdout_loss"], 5), round(r["baseline_loss"], 5))
     for r in res.curve if r["holdout_loss"] != ""]

# %%
# cosine flow: match encoder embeddings of the two frames, then refine per pixel
ep = generate(world, 40_000_000)
ff = flow_field(state, ep.frames[0], ep.frames[1], "cosine", refine=True)
print("EPE on moving sprites", epe(ff.with_nan(), ep.gt_flow[0], ep.moving_mask(0)))

# %%
# coarse patch flow only (multiples of the patch size)
coarse = flow_field(state, ep.frames[0], ep.frames[1], "cosine", refine=False)
np.unique(coarse.flow.reshape(-1, 2), axis=0)
