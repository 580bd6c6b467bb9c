"""Two-dimensional multi-stage point world with a drifting action channel.

The agent is a point in ``[-1, 1]^2``.  Four objects sit at fixed anchors;
subtask ``j`` is completed by dwelling ``dwell`` consecutive steps inside the
goal zone ``anchor_j + offset_j``.  The scripted expert reaches each goal via
its anchor, which gives every subtask a distinct two-waypoint path.

Actions are clipped to ``[-1, 1]`` and then perturbed by a scalar drift
``w_t`` added to both components::

    p <- clip(p + delta * (a + w_t * (1, 1)))

with ``w_t`` following the sinusoidal random process in :func:`drift_step`.

Most functions come in two flavours: a value-level API on :class:`WorldState`
and an array API (``*_batch``) that advances many episodes in lock-step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np

N_OBJECTS = 4
STATE_DIM = 2 + N_OBJECTS + 2 * N_OBJECTS
FRAME_DIM = 32
ACTION_DIM = 2
MAX_STAGES = 10

DEFAULT_ANCHORS = ((0.4, 0.4), (-0.4, 0.4), (-0.4, -0.4), (0.4, -0.4))
DEFAULT_OFFSETS = ((0.35, 0.0), (0.0, 0.35), (-0.35, 0.0), (0.0, -0.35))


@dataclass(frozen=True)
class EnvConfig:
    arena: float = 1.0
    delta: float = 0.05
    radius: float = 0.08
    dwell: int = 5
    t_max_per_stage: int = 120
    sigma_obs: float = 0.01
    renderer_seed: int = 7
    gain: float = 2.0
    anchors: Tuple[Tuple[float, float], ...] = DEFAULT_ANCHORS
    offsets: Tuple[Tuple[float, float], ...] = DEFAULT_OFFSETS
    anchor_jitter: float = 0.0
    start_box: float = 0.2

    def goals(self, anchors: Optional[np.ndarray] = None) -> np.ndarray:
        a = np.asarray(self.anchors if anchors is None else anchors, dtype=np.float64)
        return a + np.asarray(self.offsets, dtype=np.float64)


@dataclass(frozen=True)
class DynamicsConfig:
    m: float
    b: float = 0.0
    w0: Optional[float] = None

    def __post_init__(self):
        if self.w0 is None:
            object.__setattr__(self, "w0", self.m)
        for name in ("m", "b", "w0"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"dynamics parameter {name} must be finite")

    def to_dict(self) -> dict:
        return {"m": self.m, "b": self.b, "w0": self.w0}


@dataclass(frozen=True)
class DriftState:
    w: float
    rho: float = 0.0
    t: int = 0


def initial_drift(cfg: DynamicsConfig) -> DriftState:
    return DriftState(w=float(cfg.w0), rho=0.0, t=0)


def drift_step(cfg: DynamicsConfig, prev: DriftState, z: float) -> DriftState:
    """Advance the drift: ``rho_t = w_{t-1} + 0.75*pi*z``, ``w_t = m + 0.25*b*sin(rho_t)``."""
    rho = prev.w + 0.75 * math.pi * z
    w = cfg.m + 0.25 * cfg.b * math.sin(rho)
    return DriftState(w=w, rho=rho, t=prev.t + 1)


def drift_sequence(cfg: DynamicsConfig, z: np.ndarray) -> np.ndarray:
    """``w_0 .. w_n`` for a noise stream of length ``n`` (``w_0 = cfg.w0``)."""
    out = np.empty(len(z) + 1)
    state = initial_drift(cfg)
    out[0] = state.w
    for i, zi in enumerate(z):
        state = drift_step(cfg, state, float(zi))
        out[i + 1] = state.w
    return out


def drift_step_batch(m: np.ndarray, b: np.ndarray, w_prev: np.ndarray, z: np.ndarray):
    rho = w_prev + 0.75 * np.pi * z
    return m + 0.25 * b * np.sin(rho), rho


@dataclass(frozen=True)
class TaskSpec:
    subtasks: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "subtasks", tuple(int(j) for j in self.subtasks))
        if not 1 <= len(self.subtasks) <= MAX_STAGES:
            raise ValueError(f"task length must be in 1..{MAX_STAGES}, got {len(self.subtasks)}")
        if any(j < 0 or j >= N_OBJECTS for j in self.subtasks):
            raise ValueError(f"subtask ids must be in 0..{N_OBJECTS - 1}: {self.subtasks}")

    @property
    def K(self) -> int:
        return len(self.subtasks)

    def waypoints(self, stage: int, env: EnvConfig, anchors=None):
        a = np.asarray(env.anchors if anchors is None else anchors)[self.subtasks[stage]]
        return a, a + np.asarray(env.offsets)[self.subtasks[stage]]


@dataclass(frozen=True)
class WorldState:
    p: Tuple[float, float]
    flags: Tuple[int, ...]
    anchors: Tuple[Tuple[float, float], ...]
    dwell: int = 0
    zone: int = -1
    stage: int = 0
    task: Tuple[int, ...] = ()
    events: Tuple[int, ...] = ()
    t: int = 0

    def vector(self) -> np.ndarray:
        return state_vector(np.asarray(self.p), np.asarray(self.flags), np.asarray(self.anchors))

    @property
    def success(self) -> bool:
        return self.stage >= len(self.task) > 0

    @property
    def failed(self) -> bool:
        return any(True for _ in _out_of_order(self.events, self.task))


def _out_of_order(events, task):
    k = 0
    for e in events:
        if k < len(task) and e == task[k]:
            k += 1
        else:
            yield e


def state_vector(p: np.ndarray, flags: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Flatten ``(p, flags, anchors)`` into the 14-dim observation; works on batches."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 1:
        return np.concatenate([p, np.asarray(flags, dtype=np.float64), np.asarray(anchors).reshape(-1)])
    B = p.shape[0]
    return np.concatenate([p, flags.astype(np.float64), anchors.reshape(B, -1)], axis=1)


def reset(task: TaskSpec, env: EnvConfig, rng: np.random.Generator) -> WorldState:
    start = rng.uniform(-env.start_box, env.start_box, size=2)
    anchors = np.asarray(env.anchors) + rng.uniform(-env.anchor_jitter, env.anchor_jitter, size=(N_OBJECTS, 2)) \
        if env.anchor_jitter > 0 else np.asarray(env.anchors, dtype=np.float64)
    return WorldState(p=tuple(start), flags=(0,) * N_OBJECTS, anchors=tuple(map(tuple, anchors)),
                      task=task.subtasks)


def step_batch(env: EnvConfig, p, flags, dwell, zone, stage, tasks, task_len, goals, action, w):
    """Vectorised transition for ``B`` episodes.

    ``tasks`` is ``(B, MAX_STAGES)`` padded with ``-1``; ``goals`` is
    ``(B, N_OBJECTS, 2)``.  Returns the new ``(p, flags, dwell, zone, stage)``
    and an array of completed subtask ids (``-1`` where nothing completed).
    Completion of a fresh object out of order is reported too; callers treat
    it as a terminal failure.
    """
    B = p.shape[0]
    a = np.clip(action, -1.0, 1.0)
    p_new = np.clip(p + env.delta * (a + w[:, None]), -env.arena, env.arena)
    d = np.linalg.norm(p_new[:, None, :] - goals, axis=2)
    inside = d <= env.radius
    in_zone = np.where(inside.any(axis=1), np.argmax(inside, axis=1), -1)
    same = (in_zone == zone) & (in_zone >= 0)
    dwell_new = np.where(same, dwell + 1, np.where(in_zone >= 0, 1, 0))
    rows = np.arange(B)
    cur_target = np.where(stage < task_len, tasks[rows, np.minimum(stage, MAX_STAGES - 1)], -1)
    zone_idx = np.maximum(in_zone, 0)
    fresh = (in_zone >= 0) & (flags[rows, zone_idx] == 0)
    eligible = (in_zone >= 0) & ((in_zone == cur_target) | fresh)
    done_now = eligible & (dwell_new >= env.dwell) & (stage < task_len)
    completed = np.where(done_now, in_zone, -1)
    flags_new = flags.copy()
    flags_new[rows[done_now], in_zone[done_now]] = 1
    advance = done_now & (in_zone == cur_target)
    stage_new = stage + advance.astype(stage.dtype)
    dwell_new = np.where(done_now, 0, dwell_new)
    return p_new, flags_new, dwell_new, in_zone, stage_new, completed


def env_step(state: WorldState, action, drift: DriftState, env: EnvConfig = EnvConfig()) -> WorldState:
    """Advance one step; the displacement is ``delta * (clip(a) + w * (1, 1))``."""
    tasks = np.full((1, MAX_STAGES), -1, dtype=np.int64)
    tasks[0, :len(state.task)] = state.task
    goals = (np.asarray(state.anchors) + np.asarray(env.offsets))[None]
    p, flags, dwell, zone, stage, completed = step_batch(
        env, np.asarray([state.p], dtype=np.float64), np.asarray([state.flags], dtype=np.int64),
        np.asarray([state.dwell]), np.asarray([state.zone]), np.asarray([state.stage]), tasks,
        np.asarray([len(state.task)]), goals, np.asarray(action, dtype=np.float64).reshape(1, 2),
        np.asarray([drift.w], dtype=np.float64))
    events = state.events + ((int(completed[0]),) if completed[0] >= 0 else ())
    return replace(state, p=tuple(p[0]), flags=tuple(int(f) for f in flags[0]), dwell=int(dwell[0]),
                   zone=int(zone[0]), stage=int(stage[0]), events=events, t=state.t + 1)


# -- rendering ----------------------------------------------------------------

@dataclass(frozen=True)
class Renderer:
    """Frozen map ``R(s) = tanh(W s + b)`` from states to 32-dim frames."""

    W: np.ndarray
    b: np.ndarray
    sigma_obs: float

    @classmethod
    def from_config(cls, env: EnvConfig) -> "Renderer":
        rng = np.random.default_rng(env.renderer_seed)
        W = rng.normal(0.0, 0.6, size=(FRAME_DIM, STATE_DIM))
        b = rng.normal(0.0, 0.3, size=FRAME_DIM)
        if np.linalg.matrix_rank(W) < STATE_DIM:
            raise RuntimeError("renderer weights are rank deficient; pick another seed")
        return cls(W=W, b=b, sigma_obs=env.sigma_obs)

    def clean(self, s: np.ndarray) -> np.ndarray:
        # einsum keeps each row's arithmetic independent of the batch size (BLAS does not)
        return np.tanh(np.einsum("...j,kj->...k", np.asarray(s, dtype=np.float64), self.W) + self.b)

    def __call__(self, s: np.ndarray, noise: Optional[np.ndarray] = None) -> np.ndarray:
        v = self.clean(s)
        if noise is not None and self.sigma_obs > 0:
            v = v + self.sigma_obs * noise
        return v


def render(state: WorldState, rng: np.random.Generator, renderer: Renderer) -> np.ndarray:
    """Frame for ``state`` with i.i.d. Gaussian observation noise drawn from ``rng``."""
    noise = rng.standard_normal(FRAME_DIM) if renderer.sigma_obs > 0 else None
    return renderer(state.vector(), noise)


# -- expert -------------------------------------------------------------------

def expert_target_batch(env: EnvConfig, p, anchors_sel, goals_sel):
    """Via-point rule: head for the anchor until the goal is within ``|offset| + radius``."""
    reach = np.linalg.norm(goals_sel - anchors_sel, axis=1) + env.radius
    far = np.linalg.norm(p - goals_sel, axis=1) > reach
    return np.where(far[:, None], anchors_sel, goals_sel)


def expert_action_batch(env: EnvConfig, p, anchors_sel, goals_sel, m):
    target = expert_target_batch(env, p, anchors_sel, goals_sel)
    return np.clip(env.gain * (target - p) - np.asarray(m)[:, None], -1.0, 1.0)


def expert_action(state: WorldState, task: TaskSpec, stage: int, m: float,
                  env: EnvConfig = EnvConfig()) -> np.ndarray:
    """Proportional controller toward the current waypoint with drift compensation ``-m``."""
    if not 0 <= stage < task.K:
        raise IndexError(f"stage {stage} out of range for a task with K={task.K}")
    anchor, goal = task.waypoints(stage, env, state.anchors)
    return expert_action_batch(env, np.asarray([state.p]), anchor[None], goal[None], np.asarray([m]))[0]


# -- evaluation ---------------------------------------------------------------

@dataclass
class EpisodeRecord:
    """Minimal record needed to score an episode: its ordered completion events."""

    events: List[int] = field(default_factory=list)


def evaluate_success(episode, task: TaskSpec) -> Tuple[float, bool]:
    """Ordered-subtask score in ``{0, 1/K, ..., 1}`` and the success flag.

    Credit accrues while completion events follow the task order; the first
    event that does not match the next expected subtask ends the scoring.
    """
    events = episode.events if hasattr(episode, "events") else episode
    k = 0
    for e in events:
        if k < task.K and int(e) == task.subtasks[k]:
            k += 1
        else:
            break
    return k / task.K, k == task.K
