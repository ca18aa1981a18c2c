"""What one cell sees and what one update does, on a grid small enough
to print.

Run: python demos/01_cell_anatomy.py
"""

import numpy as np

from ncaseg import seeds
from ncaseg.nca_core import (
    NcaConfig,
    count_trainable_params,
    draw_fire_mask,
    fixed_kernel_bank,
    nca_step,
    perceive,
    random_params,
    seed_grid,
)

cfg = NcaConfig(d_img=1, n_cls=4, state_dim=8, hidden_dim=16, fire_rate=0.5)
rng = seeds.stream(0, seeds.INIT)

print("== fixed perception kernels ==")
for name, k in zip(("identity", "average", "grad-i", "grad-j"), fixed_kernel_bank()):
    print(f"{name}:")
    print(np.array2string(k, precision=3, suppress_small=True))

params = random_params(cfg, rng)
print(f"\ntrainable parameters: {count_trainable_params(params)}")
print(f"(w1 {params.w1.shape}, b1 {params.b1.shape}, w2 {params.w2.shape})")

# a 6x6 image with a single bright square becomes channel 0 of the state;
# logits and latent channels start at zero
image = np.zeros((1, 6, 6), dtype=np.float32)
image[0, 2:4, 2:4] = 1.0
grid = seed_grid(image, cfg.state_dim, cfg.n_cls)
print(f"\nstate tensor: {grid.state.shape}  (image 0:1, logits 1:5, latent 5:8)")

perc = perceive(grid, params)
print(f"perception output: {perc.shape}  = 4 features per state channel")
print("grad-i response on the image channel (edges of the square):")
print(np.array2string(perc[2 * cfg.state_dim], precision=2, suppress_small=True))

fire = draw_fire_mask(grid.state.shape[1:], cfg.fire_rate, seeds.stream(0, seeds.FIRE))
after = nca_step(grid, params, fire)
changed = np.any(after.state != grid.state, axis=0)
print(f"\none step: {int(fire.mask.sum())}/36 cells fired, {int(changed.sum())} changed")
print("fired cells (X) vs touched cells (o):")
for i in range(6):
    print(
        " ".join(
            "X" if fire.mask[i, j] else ("o" if changed[i, j] else ".") for j in range(6)
        )
    )
print("\nimage channel is re-pinned, so it never drifts:")
print("channel 0 unchanged:", bool(np.array_equal(after.state[0], image[0])))
