"""Command-line interface: the single executable tying the package together.

Subcommands: gen-data, train, eval, logo, gradcheck, rollout. Every command
takes ``--config`` (TOML), ``--seed``, ``--out`` and ``--reproducible``;
flags win over file values, and the fully resolved configuration is echoed
as ``config.toml`` into the output directory. Exit codes: 0 success, 2 bad
configuration, 3 I/O failure, 4 training divergence, 5 checkpoint mismatch.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import container, seeds
from .autodiff_bptt import grad_check
from .config import ConfigError, RunConfig, load_config, write_config
from .datagen import Sample, gen_dataset, load_dataset
from .experiment import evaluate, format_report, run_lodo, write_report
from .nca_core import (
    CheckpointError,
    DivergenceError,
    FireMask,
    NcaConfig,
    init_params,
    load_checkpoint,
    nca_step,
    random_params,
    read_class_logits,
    seed_grid,
)
from .training import fit, init_opt_state, opt_from_sections

__all__ = ["main"]

GRADCHECK_TOL = 1e-3


def _echo_config(cfg: RunConfig, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    write_config(cfg, os.path.join(out_dir, "config.toml"))


def _filter_domains(samples: list[Sample], wanted: list[str]) -> list[Sample]:
    if not wanted:
        return samples
    present = {s.domain for s in samples}
    missing = set(wanted) - present
    if missing:
        raise ConfigError(f"domains not in dataset: {sorted(missing)}")
    return [s for s in samples if s.domain in wanted]


def _split_train_val(samples: list[Sample], val_fraction: float, seed: int):
    """Stratified per-domain holdout (the non-LODO variant of the split)."""
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError("val_fraction must be in (0, 1)")
    by_domain: dict[str, list[Sample]] = {}
    for s in samples:
        by_domain.setdefault(s.domain, []).append(s)
    train, val = [], []
    for domain in sorted(by_domain):
        group = sorted(by_domain[domain], key=lambda s: s.sample_id)
        order = seeds.stream(seed, seeds.SPLIT, seeds.sample_key(domain)).permutation(
            len(group)
        )
        n_val = max(1, int(len(group) * val_fraction))
        val.extend(group[i] for i in order[:n_val])
        train.extend(group[i] for i in order[n_val:])
    return train, val


def _require_cfg_match(ck: NcaConfig, want: NcaConfig, what: str) -> None:
    same = (
        ck.state_dim == want.state_dim
        and ck.hidden_dim == want.hidden_dim
        and ck.d_img == want.d_img
        and ck.n_cls == want.n_cls
        and abs(ck.fire_rate - want.fire_rate) < 1e-9
    )
    if not same:
        raise CheckpointError(f"{what}: checkpoint architecture {ck} != configured {want}")


# --- subcommands -------------------------------------------------------------


def _cmd_gen_data(cfg: RunConfig, args) -> int:
    out_dir = args.out or cfg.data_dir
    manifest = gen_dataset(
        cfg.domain_specs(), cfg.n_per_domain, tuple(cfg.image_size), cfg.seed, out_dir
    )
    _echo_config(cfg, out_dir)
    domains = sorted({e["domain"] for e in manifest})
    print(
        f"wrote {len(manifest)} samples ({len(domains)} domains x {cfg.n_per_domain}) "
        f"at {cfg.image_size[0]}x{cfg.image_size[1]} to {out_dir}"
    )
    return 0


def _cmd_train(cfg: RunConfig, args) -> int:
    samples = _filter_domains(load_dataset(cfg.data_dir), cfg.train_domains)
    train_samples, val_samples = _split_train_val(samples, cfg.val_fraction, cfg.seed)
    nca_cfg = cfg.nca_config()
    train_cfg = cfg.train_config()
    out_dir = cfg.out
    if args.resume:
        params, ck_cfg, opt_sections = load_checkpoint(args.resume)
        _require_cfg_match(ck_cfg, nca_cfg, args.resume)
        if opt_sections is None:
            raise CheckpointError(f"{args.resume}: no optimizer state; cannot resume")
        opt = opt_from_sections(opt_sections, train_cfg, params)
    else:
        params = init_params(nca_cfg, seeds.stream(cfg.seed, seeds.INIT))
        opt = init_opt_state(params, train_cfg)
    _echo_config(cfg, out_dir)
    result = fit(
        params,
        opt,
        train_samples,
        val_samples,
        nca_cfg,
        train_cfg,
        out_dir,
        run_id=f"s{cfg.seed}",
        resume=bool(args.resume),
    )
    print(
        f"best epoch {result.best_epoch} val_loss {result.best_val_loss:.4f} "
        f"-> {result.best_path}"
    )
    return 0


def _cmd_eval(cfg: RunConfig, args) -> int:
    params, ck_cfg, _ = load_checkpoint(args.checkpoint)
    samples = load_dataset(cfg.data_dir)
    if args.domains:
        samples = _filter_domains(samples, args.domains.split(","))
    t_eval = args.t_eval if args.t_eval is not None else cfg.t_eval
    mean, rows = evaluate(params, ck_cfg, samples, t_eval, cfg.seed)
    out_dir = cfg.out
    _echo_config(cfg, out_dir)
    domain_of = {s.sample_id: s.domain for s in samples}
    csv_path = os.path.join(out_dir, "eval.csv")
    with open(csv_path, "w") as fh:
        fh.write("sample_id,domain,dice\n")
        for sid, score in rows:
            fh.write(f"{sid},{domain_of[sid]},{score:.6f}\n")
    print(f"mean foreground dice {mean:.4f} over {len(rows)} samples ({csv_path})")
    return 0


def _cmd_logo(cfg: RunConfig, args) -> int:
    samples = load_dataset(cfg.data_dir)
    out_dir = cfg.out
    _echo_config(cfg, out_dir)
    report = run_lodo(
        samples,
        cfg.nca_config(),
        cfg.train_config(),
        out_dir,
        n_runs=cfg.n_runs,
        val_fraction=cfg.val_fraction,
        targets=cfg.targets or None,
    )
    write_report(report, out_dir)
    print(format_report(report), end="")
    return 0


def _probe_sample(size: int, seed: int, n_cls: int = 4) -> Sample:
    """Tiny deterministic sample for gradient checking: concentric square
    rings so every class is present even on an 8x8 grid."""
    c = (size - 1) / 2.0
    ii, jj = np.mgrid[0:size, 0:size]
    d = np.maximum(np.abs(ii - c), np.abs(jj - c))
    ring = np.minimum((d / (c / (n_cls - 0.5))).astype(np.int64), n_cls - 1)
    mask = (n_cls - 1 - ring).astype(np.uint8)
    rng = seeds.stream(seed, seeds.GEOMETRY)
    image = 0.2 + 0.15 * mask.astype(np.float32)
    image = image + rng.uniform(-0.05, 0.05, image.shape).astype(np.float32)
    return Sample(
        image=np.clip(image, 0.0, 1.0)[None],
        mask=mask,
        domain="probe",
        sample_id=f"probe_{seed}",
    )


def _cmd_gradcheck(cfg: RunConfig, args) -> int:
    nca_cfg = NcaConfig(
        d_img=1,
        n_cls=4,
        state_dim=args.state_dim,
        hidden_dim=args.hidden_dim,
        fire_rate=args.fire_rate,
    )
    _echo_config(cfg, cfg.out)
    worst = 0.0
    ok = True
    for k in range(args.seeds):
        seed = cfg.seed + k
        sample = _probe_sample(args.size, seed, nca_cfg.n_cls)
        params = random_params(nca_cfg, seeds.stream(seed, seeds.INIT))
        err = grad_check(
            params,
            sample,
            n_steps=args.t_steps,
            eps=args.eps,
            n_probe=args.n_probe,
            seed=seed,
            fire_rate=args.fire_rate,
            n_cls=nca_cfg.n_cls,
            corruption=args.corrupt,
        )
        passed = err <= GRADCHECK_TOL
        ok = ok and passed
        worst = max(worst, err)
        print(
            f"seed {seed}: max_rel_error {err:.3e} over {args.n_probe} probed "
            f"coordinates [{'PASS' if passed else 'FAIL'}]"
        )
    print(f"gradcheck {'PASS' if ok else 'FAIL'} (worst {worst:.3e}, tol {GRADCHECK_TOL:g})")
    return 0 if ok else 1


def _write_pgm(path: str, labels: np.ndarray, n_cls: int) -> None:
    gray = (labels.astype(np.uint32) * 255 // max(n_cls - 1, 1)).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def _cmd_rollout(cfg: RunConfig, args) -> int:
    params, ck_cfg, _ = load_checkpoint(args.checkpoint)
    image = container.read_tensor(args.image)
    if image.ndim != 3 or image.shape[0] != ck_cfg.d_img:
        raise ConfigError(
            f"{args.image}: expected [{ck_cfg.d_img}, I, J] image, got {image.shape}"
        )
    out_dir = cfg.out
    os.makedirs(out_dir, exist_ok=True)
    _echo_config(cfg, out_dir)
    grid = seed_grid(image, ck_cfg.state_dim, ck_cfg.n_cls)
    rng = seeds.stream(cfg.seed, seeds.FIRE)

    def frame(t: int):
        pred = np.argmax(read_class_logits(grid), axis=0)
        _write_pgm(os.path.join(out_dir, f"frame_{t:04d}.pgm"), pred, ck_cfg.n_cls)

    frame(0)
    for t in range(1, args.steps + 1):
        mask = (rng.random(grid.state.shape[1:]) < ck_cfg.fire_rate).astype(np.float32)
        grid = nca_step(grid, params, FireMask(mask=mask, fire_rate=ck_cfg.fire_rate))
        frame(t)
    print(f"wrote {args.steps + 1} frames to {out_dir}")
    return 0


# --- argument parsing ---------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--seed", type=int, default=None, help="root RNG seed")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument(
        "--reproducible",
        action="store_true",
        default=None,
        help="force deterministic ordered reductions (this build always is)",
    )
    parser = argparse.ArgumentParser(
        prog="ncaseg",
        description="cellular-automaton segmentation: data, training, evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset")

    p = sub.add_parser("train", parents=[common], help="train on the configured domains")
    p.add_argument("--data", default=None, help="dataset directory (overrides config)")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--t-eval", type=int, default=None, help="rollout steps (default 128)")
    p.add_argument("--domains", default=None, help="comma-separated domain filter")

    p = sub.add_parser("logo", parents=[common], help="leave-one-domain-out experiment")
    p.add_argument("--data", default=None)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--state-dim", type=int, default=8)
    p.add_argument("--hidden-dim", type=int, default=16)
    p.add_argument("--size", type=int, default=8, help="grid side length")
    p.add_argument("--t-steps", type=int, default=4)
    p.add_argument("--fire-rate", type=float, default=1.0)
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--n-probe", type=int, default=64)
    p.add_argument("--seeds", type=int, default=5, help="number of seeds to check")
    p.add_argument("--corrupt", type=float, default=0.0, help=argparse.SUPPRESS)

    p = sub.add_parser("rollout", parents=[common], help="dump per-step prediction frames")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="NCAT image tensor [d_img, I, J]")
    p.add_argument("--steps", type=int, default=64)
    return parser


_DISPATCH = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "logo": _cmd_logo,
    "gradcheck": _cmd_gradcheck,
    "rollout": _cmd_rollout,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    overrides = {"seed": args.seed, "out": args.out, "reproducible": args.reproducible}
    if getattr(args, "data", None):
        overrides["data_dir"] = args.data
    try:
        cfg = load_config(args.config, overrides)
        return _DISPATCH[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except container.ContainerError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 5
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
