"""Acceptance gate: ten criteria, one printed pass/fail line each.

Criteria 7 and 8 run real training and dominate the runtime (tens of
minutes on one core); everything else is seconds. Run with ``pytest -s``
to watch the lines appear.
"""

import math
import os
import time

import numpy as np
import pytest

from ncaseg import container, seeds
from ncaseg.autodiff_bptt import grad_check
from ncaseg.cli import _probe_sample, main
from ncaseg.datagen import DEFAULT_DOMAINS, gen_dataset, load_dataset
from ncaseg.experiment import run_lodo
from ncaseg.nca_core import (
    CheckpointError,
    NcaConfig,
    count_trainable_params,
    init_params,
    load_checkpoint,
    random_params,
    rollout,
    save_checkpoint,
    seed_grid,
)
from ncaseg.autodiff_bptt import Grads
from ncaseg.training import (
    TrainConfig,
    adamw_step,
    dice_loss,
    dice_score,
    fit,
    init_opt_state,
)

# Frozen from the calibration baseline run (see configs/baseline.toml):
# with these seeds the trajectory is bit-reproducible and crosses 0.85 at
# epoch 26, reaching 0.9278 by epoch 37; 40 epochs take ~26 min on one core.
TRAIN_DICE_BAR = 0.85
TRAIN_EPOCH_BUDGET = 40
TRAIN_TIME_BUDGET_S = 30 * 60

CI_LODO_TIME_BUDGET_S = 15 * 60


def report(num: int, name: str, ok: bool, detail: str = "") -> None:
    tail = f"  ({detail})" if detail else ""
    print(f"\ncriterion {num:2d} [{'PASS' if ok else 'FAIL'}] {name}{tail}")
    assert ok, f"criterion {num}: {name}{tail}"


def test_01_parameter_count():
    cfg = NcaConfig(d_img=1, n_cls=4, state_dim=32, hidden_dim=128, fire_rate=0.5)
    n = count_trainable_params(init_params(cfg, seeds.stream(0, seeds.INIT)))
    report(1, "parameter count D=32 H=128 is exactly 20608", n == 20608, f"got {n}")


def test_02_gradient_correctness():
    t0 = time.time()
    cfg = NcaConfig(d_img=1, n_cls=4, state_dim=8, hidden_dim=16, fire_rate=1.0)
    worst = 0.0
    for seed in range(5):
        params = random_params(cfg, seeds.stream(seed, seeds.INIT))
        err = grad_check(
            params,
            _probe_sample(8, seed),
            n_steps=4,
            eps=1e-3,
            n_probe=64,
            seed=seed,
            fire_rate=1.0,
        )
        worst = max(worst, err)
    dt = time.time() - t0
    report(
        2,
        "BPTT gradients match finite differences (5 seeds, 64 probes)",
        worst <= 1e-3 and dt < 60.0,
        f"worst rel err {worst:.2e}, {dt:.1f}s",
    )


def test_03_receptive_field_cone():
    cfg = NcaConfig(d_img=1, n_cls=4, state_dim=8, hidden_dim=16, fire_rate=1.0)
    # small w2 keeps 16 full-fire steps finite; locality holds at any scale
    params = random_params(cfg, seeds.stream(2, seeds.INIT), w2_scale=0.2)
    size, c = 40, 20
    base = np.full((1, size, size), 0.4, dtype=np.float32)
    poked = base.copy()
    poked[0, c, c] += 0.3
    ok = True
    radii = []
    for steps in (1, 4, 16):
        a = rollout(seed_grid(base, 8), params, steps, seeds.stream(0, seeds.FIRE), 1.0)
        b = rollout(seed_grid(poked, 8), params, steps, seeds.stream(0, seeds.FIRE), 1.0)
        diff = np.abs(a.state - b.state).max(axis=0)
        ii, jj = np.mgrid[0:size, 0:size]
        cheb = np.maximum(np.abs(ii - c), np.abs(jj - c))
        outside = diff[cheb > steps]
        ok = ok and np.all(outside == 0.0) and diff.max() > 0
        radii.append(int(np.max(cheb[diff > 0])))
    report(
        3,
        "perturbations stay inside the Chebyshev cone at T=1,4,16",
        ok,
        f"observed radii {radii}",
    )


def test_04_image_channel_pinning():
    cfg = NcaConfig(d_img=1, n_cls=4, state_dim=16, hidden_dim=24, fire_rate=0.5)
    ok = True
    for trial in range(20):
        rng = seeds.stream(trial, seeds.INIT)
        params = random_params(cfg, rng, w2_scale=0.2)
        image = rng.random((1, 12, 12), dtype=np.float32)
        out = rollout(
            seed_grid(image, 16), params, 256, seeds.stream(trial, seeds.FIRE), 0.5
        )
        ok = ok and out.state[:1].tobytes() == image.tobytes()
    report(4, "image channels bit-equal the input after 256 steps, 20 trials", ok)


def test_05_zero_init_identity():
    cfg = NcaConfig(d_img=1, n_cls=4, state_dim=32, hidden_dim=128, fire_rate=0.5)
    params = init_params(cfg, seeds.stream(0, seeds.INIT))  # w2 == 0
    image = seeds.stream(1, seeds.GEOMETRY).random((1, 16, 16), dtype=np.float32)
    start = seed_grid(image, 32)
    out = rollout(start, params, 256, seeds.stream(0, seeds.FIRE), 0.5)
    report(
        5,
        "zero-initialized model is the identity over 256 steps, bit-exact",
        out.state.tobytes() == start.state.tobytes(),
    )


def test_06_loss_and_optimizer_oracles():
    # dice: hand-enumerated 2x2 single-pixel-overlap case, one class pair.
    # pred puts mass 1 on class 1 at pixel (0,0) only; truth is class 1 at
    # (0,0) and (0,1). per-class soft dice: c0 overlap 2, sums 3+2; c1
    # overlap 1, sums 1+2 -> loss = (1 - 4/5) + (1 - 2/3) = 0.2 + 1/3
    probs = np.zeros((2, 2, 2), dtype=np.float32)
    probs[1, 0, 0] = 1.0
    probs[0] = 1.0 - probs[1]
    truth = np.zeros((2, 2, 2), dtype=np.float32)
    truth[1, 0, 0] = truth[1, 0, 1] = 1.0
    truth[0] = 1.0 - truth[1]
    want = (1.0 - 4.0 / 5.0) + (1.0 - 2.0 / 3.0)
    loss_ok = abs(dice_loss(probs, truth) - want) <= 1e-6

    pred = np.array([[1, 0], [0, 0]], dtype=np.int64)
    true = np.array([[1, 1], [0, 0]], dtype=np.int64)
    scores, fg_mean = dice_score(pred, true, n_cls=2)
    score_ok = (
        abs(scores[1] - 2.0 / 3.0) <= 1e-6
        and abs(scores[0] - 4.0 / 5.0) <= 1e-6
        and abs(fg_mean - 2.0 / 3.0) <= 1e-6
    )

    # adamw: one coordinate vs a pure-python mirror, 100 steps, f64 params
    cfg = TrainConfig(epochs=1, t_min=1, t_max=1, lr=1e-2, weight_decay=0.04)
    nca = NcaConfig(d_img=1, n_cls=4, state_dim=8, hidden_dim=16, fire_rate=0.5)
    params = random_params(nca, seeds.stream(0, seeds.INIT)).astype(np.float64)
    opt = init_opt_state(params, cfg)
    g_rng = seeds.stream(9, seeds.PROBE)
    theta = float(params.w1[0, 0])
    m = v = 0.0
    adam_ok = True
    for t in range(1, 101):
        grads = Grads(
            g_w1=np.zeros_like(params.w1),
            g_b1=np.zeros_like(params.b1),
            g_w2=np.zeros_like(params.w2),
        )
        g = float(g_rng.standard_normal())
        grads.g_w1[0, 0] = g
        params, opt = adamw_step(params, grads, opt)
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        mhat = m / (1 - cfg.beta1**t)
        vhat = v / (1 - cfg.beta2**t)
        theta = theta - cfg.lr * (mhat / (math.sqrt(vhat) + cfg.adam_eps) + cfg.weight_decay * theta)
        adam_ok = adam_ok and abs(float(params.w1[0, 0]) - theta) <= 1e-7 * t
    report(
        6,
        "dice loss/score match hand values; adamw matches scalar reference",
        loss_ok and score_ok and adam_ok,
    )


def test_07_trainability(tmp_path):
    t0 = time.time()
    data_dir = tmp_path / "data"
    gen_dataset(DEFAULT_DOMAINS, 200, (64, 64), 0, data_dir)
    samples = [s for s in load_dataset(data_dir) if s.domain in ("vendor_a", "vendor_b")]
    by_dom: dict[str, list] = {}
    for s in samples:
        by_dom.setdefault(s.domain, []).append(s)
    train, val = [], []
    for dom in sorted(by_dom):
        group = sorted(by_dom[dom], key=lambda s: s.sample_id)
        order = seeds.stream(0, seeds.SPLIT, seeds.sample_key(dom)).permutation(len(group))
        val.extend(group[i] for i in order[:40])
        train.extend(group[i] for i in order[40:])
    nca_cfg = NcaConfig(d_img=1, n_cls=4, state_dim=32, hidden_dim=128, fire_rate=0.5)
    train_cfg = TrainConfig(
        epochs=TRAIN_EPOCH_BUDGET,
        batch_size=32,
        t_min=8,
        t_max=24,
        t_eval=16,
        lr=1e-3,
        grad_clip=1.0,
        grad_chunk=8,
        seed=0,
    )
    params = init_params(nca_cfg, seeds.stream(0, seeds.INIT))
    fit(
        params,
        init_opt_state(params, train_cfg),
        train,
        val,
        nca_cfg,
        train_cfg,
        out_dir=tmp_path / "run",
        run_id="accept7",
        verbose=False,
    )
    best = 0.0
    with open(tmp_path / "run" / "train_log.csv") as fh:
        for line in fh:
            parts = line.strip().split(",")
            if len(parts) == 6 and parts[1] == "val" and parts[2] == "dice_score":
                best = max(best, float(parts[3]))
    dt = time.time() - t0
    report(
        7,
        f"two-source run reaches IID val foreground dice >= {TRAIN_DICE_BAR}",
        best >= TRAIN_DICE_BAR and dt <= TRAIN_TIME_BUDGET_S,
        f"best {best:.4f} in {dt/60:.1f} min (budget {TRAIN_EPOCH_BUDGET} epochs / 30 min)",
    )


def test_08_lodo_generalization_gap(tmp_path):
    t0 = time.time()
    data_dir = tmp_path / "data"
    gen_dataset(DEFAULT_DOMAINS, 60, (32, 32), 0, data_dir)
    report_obj = run_lodo(
        load_dataset(data_dir),
        NcaConfig(d_img=1, n_cls=4, state_dim=32, hidden_dim=128, fire_rate=0.5),
        TrainConfig(
            epochs=20,
            batch_size=32,
            t_min=8,
            t_max=24,
            t_eval=16,
            lr=1e-3,
            grad_clip=1.0,
            grad_chunk=8,
            seed=0,
        ),
        out_dir=tmp_path / "logo",
        n_runs=1,
        val_fraction=0.2,
    )
    iid = report_obj.mean("iid")
    ood = report_obj.mean("ood")
    dt = time.time() - t0
    report(
        8,
        "reduced LODO: mean IID >= mean OOD within the CI budget",
        iid >= ood and dt <= CI_LODO_TIME_BUDGET_S,
        f"IID {iid:.4f} OOD {ood:.4f} gap {iid - ood:+.4f}, {dt/60:.1f} min",
    )


@pytest.fixture(scope="module")
def tiny_ws(tmp_path_factory):
    """Shared workspace for the determinism and serialization criteria:
    a small dataset and two identical CLI train/eval/rollout passes."""
    root = tmp_path_factory.mktemp("accept")
    cfg = root / "cfg.toml"
    cfg.write_text(
        "\n".join(
            [
                "seed = 3",
                "n_per_domain = 4",
                "image_size = [32, 32]",
                "epochs = 2",
                "batch_size = 4",
                "t_min = 2",
                "t_max = 6",
                "t_eval = 4",
                "lr = 1e-3",
                "grad_clip = 1.0",
                "grad_chunk = 4",
                "val_fraction = 0.25",
                "reproducible = true",
                "",
            ]
        )
    )
    for rep in ("a", "b"):
        d = root / rep
        argv = ["--config", str(cfg)]
        assert main(["gen-data"] + argv + ["--out", str(d / "data")]) == 0
        assert (
            main(["train"] + argv + ["--data", str(d / "data"), "--out", str(d / "run")])
            == 0
        )
        ck = str(d / "run" / "checkpoints" / "best.ncat")
        assert (
            main(
                ["eval"] + argv
                + ["--checkpoint", ck, "--data", str(d / "data"), "--out", str(d / "ev")]
            )
            == 0
        )
        assert (
            main(
                ["rollout"] + argv
                + [
                    "--checkpoint", ck,
                    "--image", str(d / "data" / "images" / "vendor_a_0000.ncat"),
                    "--steps", "8",
                    "--out", str(d / "ro"),
                ]
            )
            == 0
        )
    return root


def test_09_determinism(tiny_ws):
    same = []
    for rel in (
        os.path.join("data", "manifest.json"),
        os.path.join("data", "images", "vendor_c_0003.ncat"),
        os.path.join("run", "checkpoints", "best.ncat"),
        os.path.join("run", "checkpoints", "epoch_0001.ncat"),
        os.path.join("run", "train_log.csv"),
        os.path.join("ev", "eval.csv"),
        os.path.join("ro", "frame_0008.pgm"),
    ):
        a = (tiny_ws / "a" / rel).read_bytes()
        b = (tiny_ws / "b" / rel).read_bytes()
        same.append(a == b)
    report(
        9,
        "reruns are bit-identical (dataset, checkpoints, logs, csv, frames)",
        all(same),
        f"{sum(same)}/{len(same)} artifacts equal",
    )


def test_10_serialization_roundtrip(tiny_ws, tmp_path):
    src = tiny_ws / "a" / "run" / "checkpoints" / "epoch_0001.ncat"
    params, cfg, opt = load_checkpoint(src)
    resaved = tmp_path / "resaved.ncat"
    save_checkpoint(resaved, params, cfg, opt_sections=opt)
    roundtrip_ok = resaved.read_bytes() == src.read_bytes()

    tampered = tmp_path / "tampered.ncat"
    sections = container.read_sections(src)
    sections["fixed_kernels"] = sections["fixed_kernels"] * np.float32(1.0000001)
    container.write_sections(tampered, sections)
    with pytest.raises(CheckpointError):
        load_checkpoint(tampered)
    report(
        10,
        "save->load->save is byte-identical; tampered kernels rejected",
        roundtrip_ok,
    )
