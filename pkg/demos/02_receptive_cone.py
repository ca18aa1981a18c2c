"""The receptive field grows one cell ring per step: poke one pixel, watch
the difference spread as a Chebyshev-distance cone.

Run: python demos/02_receptive_cone.py
"""

import numpy as np

from ncaseg import seeds
from ncaseg.nca_core import NcaConfig, random_params, rollout, seed_grid

SIZE = 17
CENTER = SIZE // 2

cfg = NcaConfig(d_img=1, n_cls=4, state_dim=8, hidden_dim=16, fire_rate=1.0)
params = random_params(cfg, seeds.stream(3, seeds.INIT), w2_scale=0.1)

base = np.full((1, SIZE, SIZE), 0.5, dtype=np.float32)
poked = base.copy()
poked[0, CENTER, CENTER] += 0.25

for steps in (1, 2, 4, 8):
    # full-fire rollouts share no randomness to diverge on; any difference
    # is causal influence of the poked pixel
    a = rollout(seed_grid(base, cfg.state_dim), params, steps, seeds.stream(0, seeds.FIRE), 1.0)
    b = rollout(seed_grid(poked, cfg.state_dim), params, steps, seeds.stream(0, seeds.FIRE), 1.0)
    diff = np.abs(a.state - b.state).max(axis=0)
    ii, jj = np.nonzero(diff)
    radius = max(np.abs(ii - CENTER).max(), np.abs(jj - CENTER).max())
    print(f"\nT={steps}: influence radius {radius} (bound {steps})")
    for i in range(SIZE):
        print("".join("#" if diff[i, j] > 0 else "." for j in range(SIZE)))
