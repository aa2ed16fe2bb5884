"""Experiment runners: arm-vs-arm comparisons trained on identical data and
seeds. Reports carry one row per (arm, seed), each traceable to a finished
training run. ULAST_THREADS > 1 runs arms in worker processes."""

from __future__ import annotations

import dataclasses
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, FullConfig


@dataclass
class ExperimentReport:
    name: str
    settings: dict
    rows: list[dict] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)

    def as_table(self) -> str:
        header = f"{'arm':<14} {'seed':<6} {'mean_iou':<10} {'success_auc':<12}"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            lines.append(f"{r['arm']:<14} {r['seed']:<6} "
                         f"{r['mean_iou']:<10.4f} {r['success_auc']:<12.4f}")
        return "\n".join(lines)

    def arm_means(self) -> dict[str, float]:
        arms: dict[str, list[float]] = {}
        for r in self.rows:
            arms.setdefault(r["arm"], []).append(r["mean_iou"])
        return {k: float(np.mean(v)) for k, v in arms.items()}

    def save(self, path: str | Path) -> None:
        payload = {"name": self.name, "settings": self.settings,
                   "seeds": self.seeds, "rows": self.rows,
                   "arm_means": self.arm_means()}
        Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def _run_arm(payload: tuple[str, dict, int]) -> dict:
    """Train one arm at one seed and evaluate on its held-out set
    (module level so it can cross a process boundary)."""
    from .runtime import evaluate_model
    from .training import heldout_sequences, train

    arm_name, flat, seed = payload
    cfg = FullConfig.from_flat(flat)
    cfg.train.seed = seed
    result = train(cfg)
    metrics = evaluate_model(result.model, heldout_sequences(cfg), cfg.runtime)
    return {"arm": arm_name, "seed": seed,
            "mean_iou": metrics["mean_iou"], "success_auc": metrics["success_auc"],
            "steps": result.steps}


def _run_jobs(jobs: list[tuple[str, dict, int]]) -> list[dict]:
    workers = int(os.environ.get("ULAST_THREADS", "1"))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            return list(pool.map(_run_arm, jobs))
    return [_run_arm(j) for j in jobs]


def _arm_config(cfg: FullConfig, **overrides) -> dict:
    flat = cfg.to_flat()
    for key, value in overrides.items():
        if key not in flat:
            raise ConfigError(f"unknown override {key!r}")
        flat[key] = value
    return flat


def _seed_list(cfg: FullConfig, n_seeds: int) -> list[int]:
    return [cfg.train.seed + i for i in range(n_seeds)]


def run_misalignment_study(cfg: FullConfig, out_dir: str | Path | None = None,
                           n_seeds: int = 3) -> ExperimentReport:
    """Clean template boxes vs fully jittered ones, trained from matched
    seeds and scored on matched held-out sets."""
    seeds = _seed_list(cfg, n_seeds)
    jobs = []
    for seed in seeds:
        jobs.append(("clean", _arm_config(cfg, jitter_level=0.0), seed))
        jobs.append(("jittered", _arm_config(cfg, jitter_level=1.0), seed))
    report = ExperimentReport(
        name="misalignment",
        settings={"jitter_levels": [0.0, 1.0], "n_seeds": n_seeds},
        rows=_run_jobs(jobs), seeds=seeds)
    if out_dir is not None:
        report.save(Path(out_dir) / "misalignment.json")
    return report


_STUDIES = {
    "detach": [("attached", {"detach_boxes": False}),
               ("detached", {"detach_boxes": True})],
    "residual": [("no_residual", {"residual": False}),
                 ("residual", {"residual": True})],
    "lt_st": [("lt+st", {"long_term": True, "short_term": True}),
              ("lt", {"long_term": True, "short_term": False}),
              ("st", {"long_term": False, "short_term": True})],
    "threshold": [("th0.0", {"mask_threshold": 0.0}),
                  ("th0.5", {"mask_threshold": 0.5}),
                  ("th0.9", {"mask_threshold": 0.9})],
    "reloss": [("reweight_on", {"reweight_enabled": True}),
               ("reweight_off", {"reweight_enabled": False})],
}


def run_ablation(cfg: FullConfig, study: str, out_dir: str | Path | None = None,
                 n_seeds: int = 1) -> ExperimentReport:
    """Toggle one switch, train each arm on identical data/seed, compare."""
    if study not in _STUDIES:
        raise ConfigError(f"unknown study {study!r}; choose from {sorted(_STUDIES)}")
    seeds = _seed_list(cfg, n_seeds)
    jobs = []
    for seed in seeds:
        for arm_name, overrides in _STUDIES[study]:
            jobs.append((arm_name, _arm_config(cfg, **overrides), seed))
    report = ExperimentReport(
        name=study,
        settings={"arms": [a for a, _ in _STUDIES[study]], "n_seeds": n_seeds},
        rows=_run_jobs(jobs), seeds=seeds)
    if out_dir is not None:
        report.save(Path(out_dir) / f"ablation_{study}.json")
    return report
