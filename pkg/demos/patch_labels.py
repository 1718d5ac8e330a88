"""
From motion to patch labels
===========================

A synthetic clip pans by a whole number of HR pixels per frame. Block matching
on the HR frames recovers that pan wherever a block has texture. Blocks that
fall inside one of the flat painted rectangles match equally well anywhere
nearby, and the tie-break then prefers the smallest displacement.
"""

import numpy as np

from satvsr import videodata as vd
from satvsr.flowlabel import block_matching, build_labels

hr = vd.synthetic_clip(seed=3, size=64)
ref = hr.frames[hr.ref_index]
print("frames:", hr.T, " size:", hr.shape, " reference index:", hr.ref_index)

# estimate flow from the reference to each neighbour with 8x8 blocks
flows = [block_matching(ref, f, block=8).displacement for f in hr.frames]
inner = (slice(16, 48), slice(16, 48))
for t, (known, est) in enumerate(zip(hr.flows, flows)):
    agree = np.mean(np.all(known[inner] == est[inner], axis=-1))
    print(f"frame {t}: pan {known[0, 0]}  interior blocks matching it: {agree:.0%}")

# turn flows into labels on the 8x8 patch grid
grid = build_labels(flows, P=8, s=8, H=64, W=64)
print("labels of four patches in row 3, one column per frame:")
print(grid.labels[24:28])

# the reference column always points at the patch itself
assert np.array_equal(grid.labels[:, hr.ref_index], np.arange(grid.labels.shape[0]))

# after degradation the pan is a quarter of the step and often fractional
lr = vd.make_lr_sequence(hr)
print("LR pan per frame:", [tuple(f[0, 0]) for f in lr.flows])
