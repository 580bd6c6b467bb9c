"""Metrics and table emission: success rate, skills-matching ratio, seed aggregation."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

LEVEL_ORDER = ("stationary", "low", "medium", "high")
CSV_COLUMNS = ("K", "level", "modality", "method", "success_rate", "success_std", "matching_ratio",
               "matching_std", "n", "seeds")


def matching_ratio(predicted: Sequence[int], truth: Sequence[int]) -> float:
    """Fraction of timesteps where the predicted skill id equals the ground-truth one."""
    p, g = np.asarray(predicted), np.asarray(truth)
    if p.shape != g.shape:
        raise ValueError(f"length mismatch: {p.shape} predicted vs {g.shape} ground truth")
    if p.size == 0:
        raise ValueError("matching ratio of empty sequences is undefined")
    return float(np.mean(p == g))


@dataclass
class RunRow:
    """One (condition, method, seed) cell before seed aggregation."""

    K: int
    level: str
    modality: str
    method: str
    seed: int
    success_rate: float
    matching_ratio: float
    n: int


@dataclass
class MetricRow:
    K: int
    level: str
    modality: str
    method: str
    success_rate: float
    matching_ratio: float
    n: int
    seeds: List[int] = field(default_factory=list)
    success_std: float = 0.0
    matching_std: float = 0.0

    def as_record(self) -> Dict[str, object]:
        return {"K": self.K, "level": self.level, "modality": self.modality, "method": self.method,
                "success_rate": self.success_rate, "success_std": self.success_std,
                "matching_ratio": self.matching_ratio, "matching_std": self.matching_std,
                "n": self.n, "seeds": " ".join(str(s) for s in self.seeds)}


def _level_rank(level: str) -> int:
    return LEVEL_ORDER.index(level) if level in LEVEL_ORDER else len(LEVEL_ORDER)


def _std(values: Sequence[float]) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def aggregate(rows: Iterable[RunRow], keys: Tuple[str, ...] = ("K", "level", "modality", "method")) -> List[MetricRow]:
    """Mean and unbiased std over seeds for every group of ``keys``.

    Rows are ordered by K, then level severity, then the remaining keys.
    Groups without episodes are omitted.
    """
    groups: Dict[tuple, List[RunRow]] = {}
    for r in rows:
        if r.n <= 0:
            continue
        groups.setdefault(tuple(getattr(r, k) for k in keys), []).append(r)
    out = []
    for key, members in groups.items():
        first = members[0]
        succ = [m.success_rate for m in members]
        match = [m.matching_ratio for m in members]
        out.append(MetricRow(K=first.K, level=first.level, modality=first.modality, method=first.method,
                             success_rate=float(np.mean(succ)), matching_ratio=float(np.mean(match)),
                             n=int(sum(m.n for m in members)), seeds=sorted(m.seed for m in members),
                             success_std=_std(succ), matching_std=_std(match)))
    out.sort(key=lambda r: (r.K, _level_rank(r.level), r.level, r.modality, r.method))
    return out


def write_csv(path, rows: Sequence[MetricRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(CSV_COLUMNS))
        w.writeheader()
        for r in rows:
            rec = r.as_record()
            rec["success_rate"] = repr(float(rec["success_rate"]))
            rec["success_std"] = repr(float(rec["success_std"]))
            rec["matching_ratio"] = repr(float(rec["matching_ratio"]))
            rec["matching_std"] = repr(float(rec["matching_std"]))
            w.writerow(rec)


def write_json(path, rows: Sequence[MetricRow], meta: Dict[str, object] = None) -> None:
    payload = {"rows": [r.as_record() for r in rows]}
    if meta:
        payload["meta"] = meta
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def read_csv(path) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_rows_from_episodes(episodes: Sequence, K: int, level: str, modality: str, method: str,
                           seed: int) -> RunRow:
    """Collapse per-episode results (``success``, ``demo_matching``) into a single seed row."""
    n = len(episodes)
    if n == 0:
        return RunRow(K, level, modality, method, seed, 0.0, 0.0, 0)
    succ = float(np.mean([e.success for e in episodes]))
    match = float(np.mean([e.demo_matching for e in episodes]))
    return RunRow(K, level, modality, method, seed, succ, match, n)


def as_dicts(rows: Sequence[RunRow]) -> List[dict]:
    return [asdict(r) for r in rows]
