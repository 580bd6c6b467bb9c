"""Expert dataset generation, annotation and persistence."""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import world
from .world import (ACTION_DIM, FRAME_DIM, MAX_STAGES, N_OBJECTS, STATE_DIM, DynamicsConfig, EnvConfig,
                    Renderer, TaskSpec)


DATA_FORMAT = "onis-data-v1"
DEFAULT_M_GRID = tuple(round(-0.3 + 0.05 * i, 2) for i in range(13))
EPISODE_ID_BASE = 16


def all_permutation_tasks() -> List[Tuple[int, ...]]:
    return list(itertools.permutations(range(N_OBJECTS)))


def default_task_split(seed: int = 0, n_train: int = 16) -> Tuple[List[Tuple[int, ...]], List[Tuple[int, ...]]]:
    """Split the 24 orderings of the four subtasks into train and held-out lists."""
    perms = all_permutation_tasks()
    order = np.random.default_rng(seed).permutation(len(perms))
    train = [perms[i] for i in sorted(order[:n_train])]
    held = [perms[i] for i in sorted(order[n_train:])]
    return train, held


def episode_instruction_id(subtasks: Sequence[int]) -> int:
    """Stable id for the episode-level instruction naming the ordered subtask list."""
    code = 0
    for j in reversed(list(subtasks)):
        code = code * (N_OBJECTS + 1) + (int(j) + 1)
    return EPISODE_ID_BASE + code


def decode_episode_instruction(l: int) -> Tuple[int, ...]:
    if l < EPISODE_ID_BASE:
        raise ValueError(f"{l} is a subtask-level instruction id")
    code, out = l - EPISODE_ID_BASE, []
    while code:
        code, d = divmod(code, N_OBJECTS + 1)
        out.append(d - 1)
    return tuple(out)


@dataclass
class Trajectory:
    task: Tuple[int, ...]
    dynamics: DynamicsConfig
    states: np.ndarray          # (T, 14)
    frames: np.ndarray          # (T, 32)
    instr: np.ndarray           # (T,) int
    actions: np.ndarray         # (T, 2)
    stages: np.ndarray          # (T,) ground-truth subtask id being worked on at t
    events: List[int] = field(default_factory=list)
    task_id: int = -1
    annotated: bool = False
    final_state: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def task_spec(self) -> TaskSpec:
        return TaskSpec(self.task)

    @property
    def episode_instruction(self) -> int:
        return episode_instruction_id(self.task)

    def next_states(self) -> np.ndarray:
        """``s_{t+1}`` for every ``t`` (the last one is :attr:`final_state`)."""
        tail = self.final_state if self.final_state is not None else self.states[-1]
        return np.concatenate([self.states[1:], tail[None]], axis=0)


@dataclass
class DatasetConfig:
    m_grid: Tuple[float, ...] = DEFAULT_M_GRID
    n_train_tasks: int = 16
    episodes_per_cell: int = 15
    annotation_budget: int = 24
    task_split_seed: int = 0
    max_retries: int = 10
    train_tasks: Optional[Tuple[Tuple[int, ...], ...]] = None

    def tasks(self) -> Tuple[List[Tuple[int, ...]], List[Tuple[int, ...]]]:
        train, held = default_task_split(self.task_split_seed, self.n_train_tasks)
        if self.train_tasks is not None:
            train = [tuple(t) for t in self.train_tasks]
        return train, held


@dataclass
class Dataset:
    trajectories: List[Trajectory]
    env: EnvConfig
    config: DatasetConfig
    train_tasks: List[Tuple[int, ...]]
    eval_tasks: List[Tuple[int, ...]]
    seed: int = 0

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, i) -> Trajectory:
        return self.trajectories[i]

    @property
    def annotated(self) -> List[Trajectory]:
        return [t for t in self.trajectories if t.annotated]

    def n_steps(self) -> int:
        return int(sum(len(t) for t in self.trajectories))

    def checksum(self) -> str:
        return _checksum(self.trajectories)


# -- rollouts -------------------------------------------------------------------


class EpisodeBatch:
    """Lock-step simulator for ``B`` episodes with per-episode RNG streams.

    Every random draw an episode needs (start position, anchor jitter, frame
    noise, drift noise) comes from its own generator, made up front, so a
    trajectory does not depend on which other episodes share the batch.
    """

    def __init__(self, tasks: Sequence[Sequence[int]], dynamics: Sequence[DynamicsConfig], env: EnvConfig,
                 rngs: Sequence[np.random.Generator], renderer: Optional[Renderer] = None,
                 t_max: Optional[Sequence[int]] = None):
        B = len(tasks)
        self.env = env
        self.B = B
        self.renderer = renderer or Renderer.from_config(env)
        self.task_len = np.array([len(t) for t in tasks], dtype=np.int64)
        self.tasks = np.full((B, MAX_STAGES), -1, dtype=np.int64)
        for i, t in enumerate(tasks):
            self.tasks[i, :len(t)] = t
        self.t_max = np.asarray(t_max if t_max is not None else self.task_len * env.t_max_per_stage)
        horizon = int(self.t_max.max())
        self.p = np.empty((B, 2))
        self.anchors = np.empty((B, N_OBJECTS, 2))
        self.frame_noise = np.empty((B, horizon + 1, FRAME_DIM))
        self.drift_noise = np.empty((B, horizon + 1))
        for i, rng in enumerate(rngs):
            s = world.reset(TaskSpec(tasks[i]), env, rng)
            self.p[i] = s.p
            self.anchors[i] = s.anchors
            self.frame_noise[i] = rng.standard_normal((horizon + 1, FRAME_DIM))
            self.drift_noise[i] = rng.standard_normal(horizon + 1)
        self.goals = self.anchors + np.asarray(env.offsets)[None]
        self.m = np.array([d.m for d in dynamics], dtype=np.float64)
        self.b = np.array([d.b for d in dynamics], dtype=np.float64)
        self.w = np.array([d.w0 for d in dynamics], dtype=np.float64)
        self.flags = np.zeros((B, N_OBJECTS), dtype=np.int64)
        self.dwell = np.zeros(B, dtype=np.int64)
        self.zone = np.full(B, -1, dtype=np.int64)
        self.stage = np.zeros(B, dtype=np.int64)
        self.t = 0
        self.done = np.zeros(B, dtype=bool)
        self.failed = np.zeros(B, dtype=bool)
        self.events: List[List[int]] = [[] for _ in range(B)]

    def states(self) -> np.ndarray:
        return world.state_vector(self.p, self.flags, self.anchors)

    def frames(self, states: Optional[np.ndarray] = None) -> np.ndarray:
        s = self.states() if states is None else states
        return self.renderer(s, self.frame_noise[:, min(self.t, self.frame_noise.shape[1] - 1)])

    def current_subtask(self) -> np.ndarray:
        rows = np.arange(self.B)
        return np.where(self.stage < self.task_len, self.tasks[rows, np.minimum(self.stage, MAX_STAGES - 1)], -1)

    def current_waypoints(self):
        j = np.maximum(self.current_subtask(), 0)
        rows = np.arange(self.B)
        return self.anchors[rows, j], self.goals[rows, j]

    def expert_actions(self) -> np.ndarray:
        a, g = self.current_waypoints()
        return world.expert_action_batch(self.env, self.p, a, g, self.m)

    def step(self, actions: np.ndarray) -> None:
        """Advance all unfinished episodes; finished ones are frozen."""
        live = ~self.done
        w = self.w
        p, flags, dwell, zone, stage, completed = world.step_batch(
            self.env, self.p, self.flags, self.dwell, self.zone, self.stage, self.tasks, self.task_len,
            self.goals, actions, w)
        for arr, new in ((self.p, p), (self.flags, flags), (self.dwell, dwell), (self.zone, zone),
                         (self.stage, stage)):
            arr[live] = new[live]
        for i in np.nonzero(live & (completed >= 0))[0]:
            self.events[i].append(int(completed[i]))
            if int(completed[i]) != self.tasks[i, len(self.events[i]) - 1]:
                self.failed[i] = True
        self.t += 1
        noise_idx = min(self.t, self.drift_noise.shape[1] - 1)
        w_next, _ = world.drift_step_batch(self.m, self.b, self.w, self.drift_noise[:, noise_idx])
        self.w = np.where(live, w_next, self.w)
        self.done |= live & ((self.stage >= self.task_len) | self.failed | (self.t >= self.t_max))

    @property
    def success(self) -> np.ndarray:
        return self.stage >= self.task_len


def rollout_expert(tasks: Sequence[Sequence[int]], dynamics: Sequence[DynamicsConfig], env: EnvConfig,
                   rngs: Sequence[np.random.Generator], renderer: Optional[Renderer] = None,
                   instr: Optional[Sequence[int]] = None) -> Tuple[List[Trajectory], np.ndarray]:
    """Run the scripted expert on a batch of episodes; returns trajectories and success flags."""
    sim = EpisodeBatch(tasks, dynamics, env, rngs, renderer)
    B = sim.B
    S, V, A, G = [], [], [], []
    lengths = np.zeros(B, dtype=np.int64)
    while not sim.done.all():
        live = ~sim.done
        s = sim.states()
        v = sim.frames(s)
        a = sim.expert_actions()
        S.append(s)
        V.append(v)
        A.append(a)
        G.append(sim.current_subtask())
        lengths[live] += 1
        sim.step(a)
    S, V, A, G = (np.stack(x, axis=1) for x in (S, V, A, G))
    final = sim.states()
    out = []
    for i in range(B):
        T = lengths[i]
        l = episode_instruction_id(tasks[i]) if instr is None else instr[i]
        out.append(Trajectory(task=tuple(tasks[i]), dynamics=dynamics[i], states=S[i, :T].copy(),
                              frames=V[i, :T].copy(), instr=np.full(T, l, dtype=np.int64),
                              actions=A[i, :T].copy(), stages=G[i, :T].astype(np.int64),
                              events=list(sim.events[i]), final_state=final[i].copy()))
    return out, sim.success & ~sim.failed


def episode_rng(seed: int, index: int, attempt: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index), int(attempt)])


def generate_dataset(seed: int = 0, config: DatasetConfig = DatasetConfig(), env: EnvConfig = EnvConfig(),
                     chunk: int = 256, annotate: bool = True) -> Dataset:
    """Expert trajectories for every ``(m, task, episode)`` cell, all with ``b = 0``.

    Episodes the expert fails to finish are regenerated from a fresh seed,
    up to ``config.max_retries`` times.
    """
    train, held = config.tasks()
    cells = [(m, ti, e) for m in config.m_grid for ti in range(len(train)) for e in range(config.episodes_per_cell)]
    renderer = Renderer.from_config(env)
    trajs: List[Optional[Trajectory]] = [None] * len(cells)
    for start in range(0, len(cells), chunk):
        idx = list(range(start, min(start + chunk, len(cells))))
        attempt = {i: 0 for i in idx}
        pending = idx
        while pending:
            tasks = [train[cells[i][1]] for i in pending]
            dyn = [DynamicsConfig(m=float(cells[i][0]), b=0.0) for i in pending]
            rngs = [episode_rng(seed, i, attempt[i]) for i in pending]
            out, ok = rollout_expert(tasks, dyn, env, rngs, renderer)
            retry = []
            for i, traj, good in zip(pending, out, ok):
                if good:
                    traj.task_id = cells[i][1]
                    trajs[i] = traj
                    continue
                attempt[i] += 1
                if attempt[i] > config.max_retries:
                    raise RuntimeError(f"expert failed on cell {cells[i]} after {config.max_retries} retries")
                retry.append(i)
            pending = retry
    ds = Dataset(trajectories=list(trajs), env=env, config=config, train_tasks=train, eval_tasks=held, seed=seed)
    if annotate and config.annotation_budget > 0:
        annotate_subset(ds, config.annotation_budget, seed)
    return ds


def annotate_subset(dataset: Dataset, budget: int, seed: int = 0) -> Dataset:
    """Flag ``budget`` episodes as subtask-level annotated, stratified by first subtask.

    Flagged episodes get per-step instruction ids equal to the ground-truth
    current subtask; every other episode keeps its episode-level id.
    """
    n = len(dataset)
    if budget > n:
        raise ValueError(f"annotation budget {budget} exceeds dataset size {n}")
    for traj in dataset.trajectories:
        traj.annotated = False
        traj.instr = np.full(len(traj), traj.episode_instruction, dtype=np.int64)
    if budget == 0:
        return dataset
    rng = np.random.default_rng([int(seed), 0xA11])
    strata: Dict[int, List[int]] = {}
    for i, traj in enumerate(dataset.trajectories):
        strata.setdefault(traj.task[0], []).append(i)
    keys = sorted(strata)
    pools = {k: list(rng.permutation(strata[k])) for k in keys}
    chosen: List[int] = []
    while len(chosen) < budget:
        progressed = False
        for k in keys:
            if len(chosen) == budget:
                break
            if pools[k]:
                chosen.append(int(pools[k].pop()))
                progressed = True
        if not progressed:
            break
    covered = {j for i in chosen for j in dataset.trajectories[i].task}
    if len(chosen) < budget or len(covered) < min(N_OBJECTS, len({j for t in dataset for j in t.task})):
        raise ValueError(f"cannot select {budget} annotated episodes covering every subtask")
    for i in chosen:
        traj = dataset.trajectories[i]
        traj.annotated = True
        traj.instr = traj.stages.astype(np.int64).copy()
    return dataset


# -- persistence ------------------------------------------------------------------


def _traj_record(t: Trajectory) -> dict:
    return {
        "task_id": t.task_id,
        "task": list(t.task),
        "dynamics": t.dynamics.to_dict(),
        "annotation_flag": "subtask-level" if t.annotated else "episode-level",
        "events": list(t.events),
        "stages": t.stages.tolist(),
        "final_state": None if t.final_state is None else t.final_state.tolist(),
        "steps": [{"s": s.tolist(), "v": v.tolist(), "l": int(l), "a": a.tolist()}
                  for s, v, l, a in zip(t.states, t.frames, t.instr, t.actions)],
    }


def _traj_from_record(r: dict) -> Trajectory:
    steps = r["steps"]
    fs = r.get("final_state")
    return Trajectory(
        task=tuple(r["task"]), dynamics=DynamicsConfig(**r["dynamics"]),
        states=np.array([s["s"] for s in steps], dtype=np.float64).reshape(-1, STATE_DIM),
        frames=np.array([s["v"] for s in steps], dtype=np.float64).reshape(-1, FRAME_DIM),
        instr=np.array([s["l"] for s in steps], dtype=np.int64),
        actions=np.array([s["a"] for s in steps], dtype=np.float64).reshape(-1, ACTION_DIM),
        stages=np.array(r["stages"], dtype=np.int64), events=list(r["events"]), task_id=r["task_id"],
        annotated=r["annotation_flag"] == "subtask-level",
        final_state=None if fs is None else np.array(fs, dtype=np.float64))


def _checksum(trajs: Sequence[Trajectory]) -> str:
    h = hashlib.sha256()
    for t in trajs:
        h.update(json.dumps([list(t.task), t.dynamics.to_dict(), t.annotated, t.events]).encode())
        for arr in (t.states, t.frames, t.instr, t.actions, t.stages):
            h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def _header(ds: Dataset) -> dict:
    env = asdict(ds.env)
    cfg = asdict(ds.config)
    return {"version": DATA_FORMAT, "env": env, "config": cfg, "m_grid": list(ds.config.m_grid),
            "task_table": {"train": [list(t) for t in ds.train_tasks], "eval": [list(t) for t in ds.eval_tasks]},
            "seed": ds.seed, "count": len(ds), "checksum": ds.checksum()}


def _tuplify(x):
    if isinstance(x, list):
        return tuple(_tuplify(v) for v in x)
    return x


def _from_header(header: dict, trajs: List[Trajectory]) -> Dataset:
    if header.get("version") != DATA_FORMAT:
        raise ValueError(f"data format mismatch: expected {DATA_FORMAT!r}, got {header.get('version')!r}")
    env = EnvConfig(**{k: _tuplify(v) for k, v in header["env"].items()})
    cfg = DatasetConfig(**{k: _tuplify(v) for k, v in header["config"].items()})
    ds = Dataset(trajectories=trajs, env=env, config=cfg,
                 train_tasks=[tuple(t) for t in header["task_table"]["train"]],
                 eval_tasks=[tuple(t) for t in header["task_table"]["eval"]], seed=header.get("seed", 0))
    if len(trajs) != header["count"]:
        raise ValueError(f"dataset is truncated: header says {header['count']} trajectories, found {len(trajs)}")
    if ds.checksum() != header["checksum"]:
        raise ValueError("dataset checksum mismatch")
    return ds


def save_dataset(dataset: Dataset, path) -> str:
    """Write ``dataset``; ``.npz`` paths use the columnar variant, anything else JSON-lines."""
    path = Path(path)
    header = _header(dataset)
    if path.suffix == ".npz":
        arrays = {"header": np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)}
        meta = []
        for i, t in enumerate(dataset.trajectories):
            rec = _traj_record(t)
            rec.pop("steps")
            meta.append(rec)
            for key in ("states", "frames", "instr", "actions"):
                arrays[f"{key}_{i}"] = getattr(t, key)
        arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)
        return header["checksum"]
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for t in dataset.trajectories:
            fh.write(json.dumps(_traj_record(t)) + "\n")
    return header["checksum"]


def load_dataset(path) -> Dataset:
    path = Path(path)
    if path.suffix == ".npz":
        try:
            with np.load(path) as z:
                header = json.loads(bytes(z["header"]).decode())
                if header.get("version") != DATA_FORMAT:
                    raise ValueError(f"data format mismatch: expected {DATA_FORMAT!r}, "
                                     f"got {header.get('version')!r}")
                meta = json.loads(bytes(z["meta"]).decode())
                trajs = []
                for i, rec in enumerate(meta):
                    rec = dict(rec)
                    rec["steps"] = []
                    t = _traj_from_record(rec)
                    t.states, t.frames, t.instr, t.actions = (z[f"{k}_{i}"] for k in
                                                              ("states", "frames", "instr", "actions"))
                    trajs.append(t)
        except (OSError, KeyError, EOFError, json.JSONDecodeError) as exc:
            raise ValueError(f"cannot read dataset {path}: {exc}") from exc
        except Exception as exc:  # zipfile raises its own BadZipFile
            if isinstance(exc, ValueError):
                raise
            raise ValueError(f"cannot read dataset {path}: {exc}") from exc
        return _from_header(header, trajs)
    trajs = []
    with open(path) as fh:
        first = fh.readline()
        try:
            header = json.loads(first)
        except json.JSONDecodeError as exc:
            raise ValueError(f"cannot parse dataset header in {path}") from exc
        if header.get("version") != DATA_FORMAT:
            raise ValueError(f"data format mismatch: expected {DATA_FORMAT!r}, got {header.get('version')!r}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                trajs.append(_traj_from_record(json.loads(line)))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"corrupt or truncated record at line {lineno} of {path}") from exc
    return _from_header(header, trajs)
