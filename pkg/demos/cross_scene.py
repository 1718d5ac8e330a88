"""
Spliced clips and the bicubic floor
===================================

Two unrelated clips are spliced at a random frame to make a cross-scene clip.
The fusion plan is a pure function of the seed, so the same seed always gives
the same partners and splice points.
"""

from satvsr import videodata as vd
from satvsr.evalkit import bicubic_predict, run_benchmark

pool = vd.synthetic_pool(6, seed=0)
plan_a = vd.fusion_plan(len(pool), T=7, seed=0)
plan_b = vd.fusion_plan(len(pool), T=7, seed=0)
assert plan_a == plan_b

fused, plan = vd.fused_pool(pool, seed=0)
for i, (clip, f) in enumerate(zip(fused, plan)):
    print(f"clip {i}: partner {f.partner_index}, new scene from frame {clip.scene_boundary}")

# frames after the splice come from the partner, so their stored flow is zero
clip = fused[0]
print(f"clip 0 splits at frame {clip.scene_boundary}; flow magnitude per frame:", [round(float(abs(f).max()), 2) for f in clip.flows])

# bicubic upsampling of the reference frame is the no-learning baseline
clips = [(f"c{i}", vd.make_lr_sequence(h), h) for i, h in enumerate(fused)]
report = run_benchmark(bicubic_predict, clips)
print(report.table())
