"""
Noise schedules and the deterministic sampler
=============================================

Forward noising, DDIM steps and score interpolation, checked on cases where
the answer is known.
"""

# %%
import numpy as np

from mixtable.diffusion import build_schedule, ddim_sample, forward_noise, score_interpolation

sched = build_schedule(T_train=1000, T_infer=200)
print("betas", sched.betas[[0, -1]], "alpha_bar at 0 / 500 / 999:", sched.alphas_bar[[0, 500, 999]].round(5))
print("first inference steps", sched.inference_steps[:5], "... last", sched.inference_steps[-3:])

# %%
# A sampler that is told the clean value lands on it exactly.
rng = np.random.default_rng(1)
x0 = rng.standard_normal(6)
out = ddim_sample(sched, rng.standard_normal(6), lambda x_t, t: x0)
print("max |x0 - sample|", np.abs(out - x0).max())

# %%
# Second moment of x_t matches abar * x0^2 + (1 - abar).
n = 100_000
for t in (10, 300, 900):
    xt = forward_noise(sched, np.full(n, 2.0), t, rng.standard_normal(n))
    ab = sched.alphas_bar[t]
    print(f"t={t:3d}  E[x_t^2] {np.mean(xt**2):.4f}  expected {ab * 4 + 1 - ab:.4f}")

# %%
# Score interpolation: a convex combination of unit category vectors.
cats = rng.standard_normal((4, 8))
cats /= np.linalg.norm(cats, axis=1, keepdims=True)
for probs in ([1, 0, 0, 0], [0.25] * 4, rng.dirichlet(np.ones(4))):
    c = score_interpolation(np.asarray(probs, float), cats)
    print(np.round(probs, 3), "norm", round(float(np.linalg.norm(c)), 4))
