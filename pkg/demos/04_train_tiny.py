"""A one-minute training run: tiny synthetic dataset, short rollouts,
loss printed per epoch. Everything lands in a temp directory.

Run: python demos/04_train_tiny.py
"""

import tempfile

from ncaseg import seeds
from ncaseg.datagen import DEFAULT_DOMAINS, gen_dataset, load_dataset
from ncaseg.nca_core import NcaConfig, init_params
from ncaseg.training import TrainConfig, fit, init_opt_state

work = tempfile.mkdtemp(prefix="ncaseg_demo_")
print(f"working in {work}")

gen_dataset(DEFAULT_DOMAINS, n_per_domain=10, size=(32, 32), seed=0, out_dir=f"{work}/data")
samples = load_dataset(f"{work}/data")
train, val = samples[3:], samples[:3]
print(f"{len(train)} training samples, {len(val)} validation samples, 3 domains")

nca_cfg = NcaConfig(d_img=1, n_cls=4, state_dim=32, hidden_dim=128, fire_rate=0.5)
train_cfg = TrainConfig(
    epochs=8,
    batch_size=9,
    t_min=8,
    t_max=24,
    t_eval=16,
    lr=1e-3,
    grad_clip=1.0,
    seed=0,
)

params = init_params(nca_cfg, seeds.stream(0, seeds.INIT))
result = fit(params, init_opt_state(params, train_cfg), train, val, nca_cfg, train_cfg,
             out_dir=f"{work}/run", run_id="demo")
print(f"\nbest epoch {result.best_epoch}, checkpoint at {result.best_path}")
print("loss should be visibly below the ~3.07 all-background plateau by now;")
print("the desk profile (configs/desk.toml) takes this to convergence.")
