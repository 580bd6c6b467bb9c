"""Ablation studies: contrast/VQ arms, positive-pair samplers, annotation budgets."""

from __future__ import annotations

import copy
import dataclasses
from typing import Callable, Dict, List, Optional, Tuple

from .config import RunConfig
from .dataset import Dataset, annotate_subset
from .deploy import run_benchmark
from .dynamics import SAMPLERS
from .pipeline import TrainOutput, retrain_transfer, train_s_onis
from .reporting import MetricRow
from .transfer import ABLATION_ARMS, ablation_config

STUDIES = ("contrast-vq", "temporal", "annotation")
ANNOTATION_BUDGETS = (4, 8, 16, 24)


def study_arms(study: str) -> Tuple[str, ...]:
    if study == "contrast-vq":
        return tuple(ABLATION_ARMS)
    if study == "temporal":
        return SAMPLERS
    if study == "annotation":
        return tuple(f"budget={b}" for b in ANNOTATION_BUDGETS)
    raise ValueError(f"unknown study {study!r}; expected one of {', '.join(STUDIES)}")


def _arm_transfer(study: str, arm: str, cfg: RunConfig):
    if study == "contrast-vq":
        return ablation_config(cfg.transfer, arm)
    return dataclasses.replace(cfg.transfer, sampler=arm)


def _train_arm(args) -> Tuple[str, TrainOutput]:
    study, arm, dataset, cfg, base = args
    if study == "annotation":
        budget = int(arm.split("=")[1])
        ds = annotate_subset(copy.deepcopy(dataset), budget, seed=cfg.seed)
        return arm, train_s_onis(ds, cfg)
    return arm, retrain_transfer(base, dataset, cfg, _arm_transfer(study, arm, cfg))


def train_study(study: str, dataset: Dataset, cfg: RunConfig, jobs: int = 1,
                progress: Optional[Callable[[str], None]] = None) -> Dict[str, TrainOutput]:
    """Train every arm of ``study``; transfer-only arms share one skill encoder and decoder."""
    arms = study_arms(study)
    base = None
    if study != "annotation":
        base = train_s_onis(dataset, cfg, progress)
    tasks = [(study, arm, dataset, cfg, base) for arm in arms]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            trained = list(pool.map(_train_arm, tasks))
    else:
        trained = []
        for t in tasks:
            trained.append(_train_arm(t))
            if progress is not None:
                progress(f"arm {t[1]}")
    return dict(trained)


def run_study(study: str, dataset: Dataset, cfg: RunConfig, jobs: int = 1,
              progress: Optional[Callable[[str], None]] = None) -> Tuple[List[MetricRow], Dict[str, TrainOutput]]:
    """Train all arms and evaluate them on ``cfg.eval``; one row per arm and condition."""
    outputs = train_study(study, dataset, cfg, jobs, progress)
    methods = {arm: out.model for arm, out in outputs.items()}
    rows, _ = run_benchmark(methods, dataset.eval_tasks, cfg.eval, cfg.env, jobs=jobs)
    order = {arm: i for i, arm in enumerate(study_arms(study))}
    rows.sort(key=lambda r: (order[r.method], r.K))
    return rows, outputs
