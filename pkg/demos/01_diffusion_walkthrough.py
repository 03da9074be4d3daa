"""Forward noising and learned denoising on a 2-D toy target.

Run: python demos/01_diffusion_walkthrough.py
"""

import numpy as np

from dadmls import numerics as nx
from dadmls.dad import DadModule, pretrain_target_reverse
from dadmls.diffusion import diffuse_k_steps, make_linear_schedule, reverse_one_step
from dadmls.models import TARGET_TAG, FeatureBatch
from dadmls.numerics import OptSettings, Rng
from dadmls.perf import tune_allocator

tune_allocator()

# %% The schedule: betas grow linearly, alpha_bar decays toward zero.
sched = make_linear_schedule(50, 1e-4, 0.1)
for k in (1, 10, 25, 50):
    print(f"k={k:2d}  beta={sched.beta_at(k):.4f}  alpha_bar={sched.alpha_bar_at(k):.4f}")

# %% A point cloud drifts toward the standard normal as k grows.
rng = Rng(0)
cloud = np.array([2.0, -1.0]) + 0.1 * rng.normal((2000, 2))
for k in (1, 10, 50):
    noised = diffuse_k_steps(cloud, k, sched, nx.Tensor(rng.child(k).normal(cloud.shape))).data
    print(f"k={k:2d}  mean={np.round(noised.mean(0), 3)}  std={np.round(noised.std(0), 3)}")

# %% Teach a noise predictor the target cloud, then walk pure noise back.
dad = DadModule.create(2, sched, rng.child("net"), hidden=64, depth=2, embed_dim=16)
data = rng.child("data")


def target_batches():
    while True:
        yield FeatureBatch(np.array([2.0, -1.0]) + 0.1 * data.normal((64, 2)), None, TARGET_TAG)


trace = pretrain_target_reverse(dad, target_batches(), 1500, OptSettings(0.01, 0.9, 0.0), rng.child("noise"))
print(f"noise-prediction loss: first 100 steps {np.mean(trace[:100]):.3f}, last 100 {np.mean(trace[-100:]):.3f}")

dad.freeze()
walk = rng.child("walk")
z = nx.Tensor(walk.normal((2000, 2)))
with nx.no_grad():
    for step in range(sched.K, 0, -1):
        noise = nx.Tensor(walk.normal(z.shape) if step > 1 else np.zeros(z.shape))
        z = reverse_one_step(z, step, sched, dad.f_theta, noise)
print(f"samples after {sched.K} reverse steps: mean={np.round(z.data.mean(0), 3)} (target [2, -1])")
