"""Leave-one-domain-out protocol: splits, repeated runs, IID/OOD scoring.

For each target domain, a model is trained from scratch on the remaining
domains (with a held-out in-distribution validation slice used for model
selection and for nothing else), then the selected checkpoint is scored on
the untouched target domain. The difference between in-distribution and
target scores is the generalization gap, aggregated over repeated runs with
independent seeds.

Divergent runs are never silently averaged: they are flagged, excluded from
the filtered means, and counted as zero in the raw means, with both means
reported side by side.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace

import numpy as np

from . import seeds
from .datagen import Sample
from .nca_core import (
    DivergenceError,
    NcaConfig,
    RuleParams,
    init_params,
    load_checkpoint,
    read_class_logits,
    rollout,
    seed_grid,
)
from .training import TrainConfig, dice_score, fit, init_opt_state

__all__ = [
    "LodoSplit",
    "RunResult",
    "ExperimentReport",
    "make_lodo_splits",
    "evaluate",
    "run_lodo",
    "format_report",
    "write_report",
]


@dataclass
class LodoSplit:
    """Sample lists for one leave-one-domain-out cell."""

    target_domain: str
    train: list[Sample]
    iid_val: list[Sample]
    ood_test: list[Sample]


def _check_split(split: LodoSplit) -> None:
    train_ids = {s.sample_id for s in split.train}
    val_ids = {s.sample_id for s in split.iid_val}
    if train_ids & val_ids:
        raise ValueError("train and iid_val overlap")
    for group in (split.train, split.iid_val):
        for s in group:
            if s.domain == split.target_domain:
                raise ValueError(f"target-domain sample {s.sample_id} leaked into sources")


def make_lodo_splits(
    samples: list[Sample],
    target_domain: str,
    val_fraction: float = 0.2,
    seed: int = 0,
) -> LodoSplit:
    """Hold ``val_fraction`` of every source domain out for IID validation;
    the whole target domain becomes the OOD test set. Stratified, seeded,
    order-independent."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must be in (0, 1)")
    by_domain: dict[str, list[Sample]] = {}
    for s in samples:
        by_domain.setdefault(s.domain, []).append(s)
    if target_domain not in by_domain:
        raise ValueError(f"unknown target domain {target_domain!r}")
    sources = sorted(d for d in by_domain if d != target_domain)
    if len(sources) < 2:
        raise ValueError("need at least 2 source domains")
    train, iid_val = [], []
    for domain in sources:
        group = sorted(by_domain[domain], key=lambda s: s.sample_id)
        if len(group) < 2:
            raise ValueError(f"domain {domain!r} too small to split")
        order = seeds.stream(seed, seeds.SPLIT, seeds.sample_key(domain)).permutation(
            len(group)
        )
        n_val = max(1, math.floor(len(group) * val_fraction))
        iid_val.extend(group[i] for i in order[:n_val])
        train.extend(group[i] for i in order[n_val:])
    split = LodoSplit(
        target_domain=target_domain,
        train=train,
        iid_val=iid_val,
        ood_test=list(by_domain[target_domain]),
    )
    _check_split(split)
    return split


def evaluate(
    params: RuleParams,
    nca_cfg: NcaConfig,
    samples: list[Sample],
    t_eval: int,
    seed: int,
) -> tuple[float, list[tuple[str, float]]]:
    """Mean foreground Dice over ``samples`` at exactly ``t_eval`` steps.

    Pure per sample: each sample's rollout uses its own id-keyed stream, so
    the score of a sample never depends on which other samples are listed.
    """
    if not samples:
        raise ValueError("no samples to evaluate")
    rows = []
    for s in samples:
        rng = seeds.stream(seed, seeds.EVAL, seeds.sample_key(s.sample_id))
        grid = seed_grid(s.image, nca_cfg.state_dim, nca_cfg.n_cls)
        out = rollout(grid, params, t_eval, rng, nca_cfg.fire_rate)
        pred = np.argmax(read_class_logits(out), axis=0)
        _, fg = dice_score(pred, s.mask, nca_cfg.n_cls)
        rows.append((s.sample_id, fg))
    mean = float(np.mean([r[1] for r in rows]))
    return mean, rows


@dataclass
class RunResult:
    target: str
    run: int
    iid: float  # NaN when excluded
    ood: float
    excluded: bool
    note: str = ""

    @property
    def gap(self) -> float:
        return self.iid - self.ood


@dataclass
class ExperimentReport:
    rows: list[RunResult]
    n_runs: int

    def _values(self, attr: str, target: str | None, filtered: bool) -> list[float]:
        vals = []
        for r in self.rows:
            if target is not None and r.target != target:
                continue
            if r.excluded:
                if filtered:
                    continue
                vals.append(0.0)  # raw mean counts a failed run as a zero score
            else:
                vals.append(getattr(r, attr))
        return vals

    def mean(self, attr: str, target: str | None = None, filtered: bool = True) -> float:
        vals = self._values(attr, target, filtered)
        return float(np.mean(vals)) if vals else float("nan")

    def targets(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.target not in seen:
                seen.append(r.target)
        return seen


def run_lodo(
    samples: list[Sample],
    nca_cfg: NcaConfig,
    train_cfg: TrainConfig,
    out_dir,
    n_runs: int = 5,
    val_fraction: float = 0.2,
    targets: list[str] | None = None,
    verbose: bool = True,
) -> ExperimentReport:
    """The full experiment grid: every target domain times ``n_runs`` seeds.

    Each cell derives an independent root seed from (train_cfg.seed, target
    index, run index), trains via the standard fit loop under
    ``out_dir/runs/<target>/run<k>``, and scores the selected checkpoint on
    its IID validation and OOD test sets.
    """
    domains = []
    for s in samples:
        if s.domain not in domains:
            domains.append(s.domain)
    if targets is None:
        targets = sorted(domains)
    rows = []
    for t_idx, target in enumerate(sorted(targets)):
        for run in range(n_runs):
            run_seed = seeds.child_seed(train_cfg.seed, seeds.RUN, t_idx, run)
            split = make_lodo_splits(samples, target, val_fraction, seed=run_seed)
            cfg = replace(train_cfg, seed=run_seed)
            run_dir = os.path.join(str(out_dir), "runs", target, f"run{run}")
            run_id = f"{target}-r{run}-s{run_seed % 10**8}"
            if verbose:
                print(
                    f"[lodo] target={target} run={run} seed={run_seed} "
                    f"train={len(split.train)} val={len(split.iid_val)} "
                    f"ood={len(split.ood_test)}",
                    flush=True,
                )
            try:
                params = init_params(nca_cfg, seeds.stream(run_seed, seeds.INIT))
                opt = init_opt_state(params, cfg)
                result = fit(
                    params,
                    opt,
                    split.train,
                    split.iid_val,
                    nca_cfg,
                    cfg,
                    run_dir,
                    run_id,
                    verbose=verbose,
                )
                best_params, best_cfg, _ = load_checkpoint(result.best_path)
                iid, _ = evaluate(best_params, best_cfg, split.iid_val, cfg.t_eval, run_seed)
                ood, _ = evaluate(best_params, best_cfg, split.ood_test, cfg.t_eval, run_seed)
                rows.append(RunResult(target=target, run=run, iid=iid, ood=ood, excluded=False))
            except DivergenceError as exc:
                rows.append(
                    RunResult(
                        target=target,
                        run=run,
                        iid=float("nan"),
                        ood=float("nan"),
                        excluded=True,
                        note=str(exc),
                    )
                )
                if verbose:
                    print(f"[lodo] target={target} run={run} DIVERGED: {exc}", flush=True)
    return ExperimentReport(rows=rows, n_runs=n_runs)


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.4f}"


def format_report(report: ExperimentReport) -> str:
    """Human-readable table: per-target OOD then the overall aggregates."""
    lines = []
    lines.append(f"{'target':<12} {'ood(filtered)':>14} {'ood(raw)':>10} {'runs':>5} {'excluded':>9}")
    for target in report.targets():
        rows = [r for r in report.rows if r.target == target]
        n_exc = sum(r.excluded for r in rows)
        lines.append(
            f"{target:<12} {_fmt(report.mean('ood', target)):>14} "
            f"{_fmt(report.mean('ood', target, filtered=False)):>10} "
            f"{len(rows):>5} {n_exc:>9}"
        )
    for label, filtered in (("filtered", True), ("raw", False)):
        lines.append(
            f"mean OOD {_fmt(report.mean('ood', filtered=filtered))}  "
            f"mean IID {_fmt(report.mean('iid', filtered=filtered))}  "
            f"mean gap {_fmt(report.mean('gap', filtered=filtered))}  ({label})"
        )
    return "\n".join(lines) + "\n"


def write_report(report: ExperimentReport, out_dir) -> str:
    """Emit ``report.csv`` (one row per run and split) and ``report.txt``."""
    out_dir = str(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "report.csv")
    with open(csv_path, "w") as fh:
        fh.write("target,run,split,dice,excluded\n")
        for r in report.rows:
            flag = "true" if r.excluded else "false"
            fh.write(f"{r.target},{r.run},iid,{_fmt(r.iid)},{flag}\n")
            fh.write(f"{r.target},{r.run},ood,{_fmt(r.ood)},{flag}\n")
    with open(os.path.join(out_dir, "report.txt"), "w") as fh:
        fh.write(format_report(report))
    return csv_path
