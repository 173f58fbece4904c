# %% [markdown]
# # Sprite world and counterfactual actions
#
# Generate an episode, look at its ground truth, and build a sparse action
# that moves one patch.  Runs in a few seconds; needs only numpy.

# %%
import numpy as np

from cwm.counterfactual import Action, move_entry, stop_motion_entry
from cwm.spriteworld import WorldConfig, generate

world = WorldConfig()
ep = generate(world, 7)
ep.frames.shape, ep.gt_flow.shape, ep.gt_masks.shape  # (T,H,W,3) (T-1,H,W,2) (T,S,H,W)

# %%
# sprite 0 is red, sprite 1 is yellow; contact between them decides the probe labels
[(s.shape, s.height, s.width, tuple(s.velocities[0])) for s in ep.sprites]
ep.contact, ep.label("ocd"), ep.label("ocp")

# %%
# flow is defined on pixels of frame t+1 whose source pixel belongs to the same sprite
moving = ep.moving_mask(0)
gt = ep.gt_flow[0]
print("moving pixels", int(moving.sum()), "flows", np.unique(gt[moving].reshape(-1, 2), axis=0))

# %%
# an action is a sparse target frame: copied patches at chosen grid cells
x = ep.frames[0]
P = world.patch_size
a = Action(world.size // P, P)
r, c = np.argwhere(ep.gt_masks[0, 0])[0] // P  # a patch touching the red sprite
a.add(move_entry(x, (int(r), int(c)), (0, 6), P))  # pretend it moved 6px right
a.add(stop_motion_entry(x, (0, 0), P))  # and the top-left corner stays put
idx, content = a.visible()
print("visible patches", idx, content.shape)

# %%
# move entries snap to the nearest grid cell and read the edge-replicated window behind it
ent = a.resolved()
sorted(ent)
