"""How far simulated features sit from the target as the diffusion depth k grows.

A reverse operator trained only on target features turns diffused source
features into something target-like.  Small k keeps the source, large k lands
near the target, and the intermediate k give the transitional distributions.

Run: python demos/02_transition_profile.py
"""

import numpy as np

from dadmls.dad import DadModule, dad_distance_profile, pretrain_target_reverse, profile_steps
from dadmls.diffusion import make_linear_schedule
from dadmls.domains import apply_shift, gen_two_moons
from dadmls.models import SOURCE_TAG, TARGET_TAG, FeatureBatch
from dadmls.numerics import OptSettings, Rng
from dadmls.perf import tune_allocator

tune_allocator()
K = 50

src = gen_two_moons(1000, seed=0)
tgt = apply_shift(gen_two_moons(1000, seed=1), rotation_deg=50.0)
fs = FeatureBatch(src.points, src.labels, SOURCE_TAG)
ft = FeatureBatch(tgt.points, None, TARGET_TAG)

rng = Rng(0)
dad = DadModule.create(2, make_linear_schedule(K, 1e-4, 0.1), rng.child("net"), hidden=64, depth=2, embed_dim=16)
dad.fit_frame(fs, ft)
draw = rng.child("batches")


def target_batches():
    while True:
        yield ft.take(draw.integers(0, len(ft), size=64))


pretrain_target_reverse(dad, target_batches(), 1500, OptSettings(0.01, 0.9, 0.0), rng.child("noise"))
dad.freeze()

# %% Profile on fresh held-out samples
hs = gen_two_moons(500, seed=10)
ht = apply_shift(gen_two_moons(500, seed=11), rotation_deg=50.0)
profile = dad_distance_profile(dad, FeatureBatch(hs.points, hs.labels, SOURCE_TAG),
                               FeatureBatch(ht.points, None, TARGET_TAG), profile_steps(K, 10), rng.child("profile"))
top = max(v for _, v in profile)
for k, v in profile:
    print(f"k={k:3d}  mmd2={v:.4f}  {'#' * int(round(40 * v / top))}")
gaps = np.abs(np.diff([v for _, v in profile]))
print(f"largest adjacent change {gaps.max():.4f} vs endpoint change {abs(profile[-1][1] - profile[0][1]):.4f}")
