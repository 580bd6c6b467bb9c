"""One-shot imitation at deployment, demo corruption, and the flat-BC baseline.

Every agent runs against a lock-step :class:`~onis.dataset.EpisodeBatch`, so
a whole evaluation cell is simulated at once.  Agents only ever see the
demonstration and the states/actions they produced themselves; the true
task and drift are used for scoring alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import MLP, ParamSet, Tensor
from .dataset import (DEFAULT_M_GRID, EpisodeBatch, Trajectory, episode_instruction_id, episode_rng,
                      rollout_expert)
from .dynamics import DynamicsModel, PAIR_DIM, build_windows, window_index
from .multimodal import EMBED_DIM, FrozenEncoders, Prompt
from .reporting import LEVEL_ORDER, RunRow, aggregate, matching_ratio, run_rows_from_episodes
from .skillseq import SkillDecoder, USkillHeads, encode_sequence_S, select_codes
from .transfer import TransferPolicy, policy_action
from .world import (ACTION_DIM, FRAME_DIM, N_OBJECTS, STATE_DIM, DynamicsConfig, EnvConfig,
                    Renderer, TaskSpec, evaluate_success)

LEVEL_AMPLITUDE = {"stationary": 0.0, "low": 0.5, "medium": 1.0, "high": 2.0}
EVAL_M_RANGE = 0.45
NOISE_TYPES = ("jitter", "gaussian", "cutout")
NOISE_LEVELS = {
    "jitter": {"low": 0.05, "medium": 0.10, "high": 0.20},
    "gaussian": {"low": 0.05, "medium": 0.15, "high": 0.30},
    "cutout": {"low": 4, "medium": 8, "high": 16},
}
MODALITIES = ("video", "language")


# -- demonstrations and conditions -------------------------------------------------

@dataclass
class Demonstration:
    """A single demonstration; ``task`` and ``stages`` are hidden from agents and used for scoring."""

    modality: str
    payload: Union[np.ndarray, Tuple[int, ...]]
    task: Tuple[int, ...]
    stages: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {self.modality!r}")


def make_demo(task: Sequence[int], modality: str, env: EnvConfig, rng: np.random.Generator,
              renderer: Optional[Renderer] = None, m_grid: Sequence[float] = DEFAULT_M_GRID) -> Demonstration:
    """Expert demonstration of ``task`` recorded in a stationary source environment."""
    task = tuple(int(j) for j in task)
    if modality == "language":
        return Demonstration("language", task, task)
    m = float(m_grid[int(rng.integers(0, len(m_grid)))])
    child = np.random.default_rng(rng.integers(0, 2 ** 63))
    trajs, ok = rollout_expert([task], [DynamicsConfig(m=m)], env, [child], renderer)
    if not ok[0]:
        raise RuntimeError(f"expert failed to demonstrate task {task}")
    return Demonstration("video", trajs[0].frames, task, trajs[0].stages)


def demo_from_trajectory(traj: Trajectory) -> Demonstration:
    return Demonstration("video", traj.frames, tuple(traj.task), traj.stages)


@dataclass(frozen=True)
class EvalCondition:
    """Test-time dynamics prior for one non-stationarity level."""

    level: str = "stationary"
    seen_m: bool = False
    m_grid: Tuple[float, ...] = DEFAULT_M_GRID

    def __post_init__(self):
        if self.level not in LEVEL_AMPLITUDE:
            raise ValueError(f"level must be one of {tuple(LEVEL_AMPLITUDE)}, got {self.level!r}")

    def draw(self, rng: np.random.Generator) -> DynamicsConfig:
        b = LEVEL_AMPLITUDE[self.level]
        if self.seen_m:
            m = float(self.m_grid[int(rng.integers(0, len(self.m_grid)))])
        else:
            m = float(rng.uniform(-EVAL_M_RANGE, EVAL_M_RANGE))
        return DynamicsConfig(m=m, b=b)


def evaluation_tasks(held_out: Sequence[Sequence[int]], K: int, n: int) -> List[Tuple[int, ...]]:
    """``n`` unseen tasks of length ``K`` cycling through the held-out orders.

    ``K <= 4`` uses prefixes; longer tasks chain consecutive held-out orders,
    skipping immediate repeats.
    """
    held = [tuple(t) for t in held_out]
    out = []
    for i in range(n):
        if K <= len(held[0]):
            out.append(held[i % len(held)][:K])
            continue
        seq: List[int] = []
        j = i
        while len(seq) < K:
            for s in held[j % len(held)]:
                if not seq or seq[-1] != s:
                    seq.append(s)
                if len(seq) == K:
                    break
            j += 1
        out.append(tuple(seq))
    return out


# -- corruption ----------------------------------------------------------------------

def corrupt_demo(demo: Demonstration, noise: str, level: Optional[str], rng: np.random.Generator) -> Demonstration:
    """Noisy copy of a video demonstration.

    All levels consume the same random draws, scaled by the level magnitude,
    so for a fixed ``rng`` state the corruptions are nested across levels.
    ``level=None`` returns the demo unchanged.
    """
    if demo.modality != "video":
        raise ValueError("only video demonstrations can be corrupted")
    if noise not in NOISE_TYPES:
        raise ValueError(f"noise must be one of {NOISE_TYPES}, got {noise!r}")
    if level is None:
        return demo
    if level not in NOISE_LEVELS[noise]:
        raise ValueError(f"level must be one of {tuple(NOISE_LEVELS[noise])}, got {level!r}")
    v = np.asarray(demo.payload, dtype=np.float64)
    T = len(v)
    mag = NOISE_LEVELS[noise][level]
    if noise == "jitter":
        r_scale = rng.uniform(-1.0, 1.0, size=(T, FRAME_DIM))
        r_shift = rng.uniform(-1.0, 1.0, size=(T, FRAME_DIM))
        out = v * (1.0 + mag * r_scale) + mag * r_shift
    elif noise == "gaussian":
        out = v + mag * rng.standard_normal((T, FRAME_DIM))
    else:
        big = NOISE_LEVELS["cutout"]["high"]
        r = rng.random((T, 3))
        s16 = np.floor(r[:, 0] * (FRAME_DIM - big + 1)).astype(np.int64)
        s8 = s16 + np.floor(r[:, 1] * (big - 8 + 1)).astype(np.int64)
        s4 = s8 + np.floor(r[:, 2] * (8 - 4 + 1)).astype(np.int64)
        start = {16: s16, 8: s8, 4: s4}[int(mag)]
        cols = np.arange(FRAME_DIM)[None, :]
        mask = (cols >= start[:, None]) & (cols < start[:, None] + int(mag))
        out = np.where(mask, 0.0, v)
    return Demonstration("video", out, demo.task, demo.stages)


# -- bundles ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DeployConfig:
    min_run: int = 3
    debounce: int = 16
    history: int = 10


@dataclass
class ModelBundle:
    """Everything frozen at deployment.

    ``instructions`` is the retrievable set: subtask ids in S-mode, training
    episode-instruction ids in U-mode.  ``code_to_stage`` maps U-mode skill
    codes to the subtask they mostly cover (reporting only).
    """

    mode: str
    encoders: FrozenEncoders
    policy: TransferPolicy
    dynamics: DynamicsModel
    decoder: Optional[SkillDecoder] = None
    prompt: Optional[Prompt] = None
    uheads: Optional[USkillHeads] = None
    instructions: Tuple[int, ...] = tuple(range(N_OBJECTS))
    code_to_stage: Optional[np.ndarray] = None
    deploy: DeployConfig = field(default_factory=DeployConfig)

    def param_sets(self) -> Dict[str, ParamSet]:
        out = {"pi": self.policy.params, "psi": self.dynamics.params}
        if self.decoder is not None:
            out["dec"] = self.decoder.params
        if self.prompt is not None:
            out["prompt"] = self.prompt.params
        if self.uheads is not None:
            out["u"] = self.uheads.params
        return out

    def all_params(self) -> ParamSet:
        sets = self.param_sets()
        names = sorted(sets)
        first, *rest = [sets[n] for n in names]
        return first.merged(*rest, prefixes=[n + "/" for n in names])

    def checksum(self) -> str:
        return self.all_params().checksum()


# -- episode results -----------------------------------------------------------------

@dataclass
class EpisodeResult:
    task: Tuple[int, ...]
    m: float
    b: float
    success: bool
    score: float
    events: List[int]
    steps: int
    skill_pred: np.ndarray
    stages: np.ndarray
    step_matching: float
    demo_matching: float
    flagged: bool = False
    codes: Optional[np.ndarray] = None

    def to_record(self) -> dict:
        return {"task": list(self.task), "m": self.m, "b": self.b, "success": bool(self.success),
                "score": self.score, "events": list(self.events), "steps": self.steps,
                "step_matching": self.step_matching, "demo_matching": self.demo_matching,
                "flagged": bool(self.flagged), "skill_pred": [int(x) for x in self.skill_pred]}


# -- agents -----------------------------------------------------------------------------

class _History:
    """Per-episode ``(s, a)`` history shared by every agent; windows follow the training convention."""

    def __init__(self, B: int, horizon: int):
        self.S = np.zeros((horizon + 1, B, STATE_DIM))
        self.A = np.zeros((horizon + 1, B, ACTION_DIM))
        self.t = 0

    def push_state(self, s: np.ndarray) -> None:
        self.S[self.t] = s

    def push_action(self, a: np.ndarray) -> None:
        self.A[self.t] = a
        self.t += 1

    def pair_window(self, length: int) -> np.ndarray:
        """``(B, length * 16)`` window of the pairs before the current step."""
        t = self.t
        B = self.S.shape[1]
        if t == 0:
            pair = np.concatenate([self.S[0], np.zeros((B, ACTION_DIM))], axis=1)
            return np.tile(pair, (1, length))
        idx = window_index([t], length)[0]
        w = np.concatenate([self.S[idx], self.A[idx]], axis=2)  # (length, B, 16)
        return w.transpose(1, 0, 2).reshape(B, length * PAIR_DIM)

    def state_window(self, length: int) -> np.ndarray:
        rows = np.clip(np.arange(self.t - length + 1, self.t + 1), 0, None)
        return self.S[rows].transpose(1, 0, 2).reshape(self.S.shape[1], length * STATE_DIM)


class _SAgent:
    """Precomputed skill sequence consumed through the decoder-driven pointer."""

    def __init__(self, bundle: ModelBundle, demos: Sequence[Demonstration]):
        self.bundle = bundle
        enc, prompt = bundle.encoders, bundle.prompt
        instructions = list(bundle.instructions)
        self.table = enc.encode_instructions(prompt.vector, instructions)
        self.seqs: List[np.ndarray] = []
        self.flagged = np.zeros(len(demos), dtype=bool)
        self.demo_matching = np.ones(len(demos))
        for i, d in enumerate(demos):
            try:
                seq = encode_sequence_S(enc, prompt, d.payload, instructions)
            except KeyError:
                self.flagged[i] = True
                self.seqs.append(np.zeros(1, dtype=np.int64))
                continue
            if d.modality == "video" and d.stages is not None and len(seq) == len(d.stages):
                self.demo_matching[i] = matching_ratio(seq.ids, d.stages)
            ids, _ = seq.collapsed(bundle.deploy.min_run if d.modality == "video" else 1)
            self.seqs.append(np.array([instructions.index(int(j)) for j in ids], dtype=np.int64))
        B = len(demos)
        self.ptr = np.zeros(B, dtype=np.int64)
        self.lengths = np.array([len(s) for s in self.seqs])
        self.padded = np.zeros((B, int(self.lengths.max())), dtype=np.int64)
        for i, s in enumerate(self.seqs):
            self.padded[i, :len(s)] = s
        self.count = np.zeros(B, dtype=np.int64)
        self.armed = np.ones(B, dtype=bool)
        self.s_start: Optional[np.ndarray] = None
        self.instructions = np.asarray(instructions)

    def _current(self) -> np.ndarray:
        return self.padded[np.arange(len(self.ptr)), np.minimum(self.ptr, self.lengths - 1)]

    def skill(self, s: np.ndarray, hist: _History) -> Tuple[np.ndarray, np.ndarray]:
        if self.s_start is None:
            self.s_start = s.copy()
        z = self.table[self._current()]
        fire = self.bundle.decoder.predict(self.s_start, s, z).astype(bool)
        self.count = np.where(fire, self.count + 1, 0)
        self.armed |= ~fire
        advance = self.armed & (self.count >= self.bundle.deploy.debounce) & (self.ptr < self.lengths - 1)
        self.ptr = self.ptr + advance
        self.s_start[advance] = s[advance]
        self.armed &= ~advance
        self.count[advance] = 0
        cur = self._current()
        return self.table[cur], self.instructions[cur]


class _UAgent:
    """Per-step skill inference from the demo and the recent state window."""

    def __init__(self, bundle: ModelBundle, demos: Sequence[Demonstration]):
        self.bundle = bundle
        heads = bundle.uheads
        heads.check_codebook()
        enc = bundle.encoders
        self.heads = heads
        self.video = np.array([d.modality == "video" for d in demos])
        q = np.zeros((len(demos), EMBED_DIM))
        base = np.zeros((len(demos), EMBED_DIM))
        for i, d in enumerate(demos):
            if d.modality == "video":
                q[i] = enc.encode_video(np.asarray(d.payload, dtype=np.float64))
            else:
                base[i] = enc.base_embedding([episode_instruction_id(d.payload)])[0]
        self.vq = q
        self.base = base
        self.cand_base = enc.base_embedding(list(bundle.instructions))
        self.flagged = np.zeros(len(demos), dtype=bool)
        self.demo_matching = np.full(len(demos), np.nan)

    def skill(self, s: np.ndarray, hist: _History) -> Tuple[np.ndarray, np.ndarray]:
        heads = self.heads
        win = hist.state_window(heads.config.window)
        cb = heads.codebook.data
        ids = np.zeros(len(s), dtype=np.int64)
        v = self.video
        if v.any():
            n, L = int(v.sum()), len(self.cand_base)
            cand = heads.code_index(np.repeat(self.cand_base[None], n, axis=0).reshape(n * L, -1),
                                    np.repeat(win[v], L, axis=0)).reshape(n, L)
            query = heads.video_query(self.vq[v], win[v])
            ids[v] = select_codes(query, cb, cand)
        if (~v).any():
            ids[~v] = heads.code_index(self.base[~v], win[~v])
        return cb[ids], ids


def _dynamics_codes(bundle: ModelBundle, hist: _History) -> Tuple[np.ndarray, np.ndarray]:
    h, idx = bundle.dynamics.encode_numpy(hist.pair_window(bundle.dynamics.config.h0))
    if idx is None:
        idx = np.full(len(h), -1, dtype=np.int64)
    return h, idx


def _simulate(agent_act, demos: Sequence[Demonstration], dynamics: Sequence[DynamicsConfig], env: EnvConfig,
              rngs: Sequence[np.random.Generator], renderer: Optional[Renderer] = None):
    tasks = [d.task for d in demos]
    sim = EpisodeBatch(tasks, dynamics, env, rngs, renderer)
    horizon = int(sim.t_max.max())
    hist = _History(sim.B, horizon)
    preds, stages, codes = [], [], []
    lengths = np.zeros(sim.B, dtype=np.int64)
    while not sim.done.all():
        live = ~sim.done
        s = sim.states()
        hist.push_state(s)
        stages.append(sim.current_subtask())
        a, pred, code = agent_act(s, hist, sim)
        preds.append(pred)
        codes.append(code)
        lengths[live] += 1
        hist.push_action(a)
        sim.step(a)
    return sim, np.stack(preds, 1), np.stack(stages, 1), np.stack(codes, 1), lengths


def _results(sim: EpisodeBatch, demos, dynamics, preds, stages, codes, lengths, demo_matching, flagged,
             stage_of=None) -> List[EpisodeResult]:
    out = []
    for i, d in enumerate(demos):
        T = int(lengths[i])
        score, ok = evaluate_success(sim.events[i], TaskSpec(d.task))
        pred = preds[i, :T]
        mapped = pred if stage_of is None else stage_of[pred]
        step_match = matching_ratio(mapped, stages[i, :T]) if T else 0.0
        dm = demo_matching[i] if np.isfinite(demo_matching[i]) else step_match
        success = bool(ok and not flagged[i])
        out.append(EpisodeResult(task=tuple(d.task), m=float(dynamics[i].m), b=float(dynamics[i].b),
                                 success=success, score=float(score) if not flagged[i] else 0.0,
                                 events=list(sim.events[i]), steps=T, skill_pred=pred.copy(),
                                 stages=stages[i, :T].copy(), step_matching=float(step_match),
                                 demo_matching=float(dm), flagged=bool(flagged[i]), codes=codes[i, :T].copy()))
    return out


def one_shot_imitate(bundle: ModelBundle, demos: Sequence[Demonstration], dynamics: Sequence[DynamicsConfig],
                     env: EnvConfig, rngs: Sequence[np.random.Generator],
                     renderer: Optional[Renderer] = None) -> List[EpisodeResult]:
    """Run the frozen framework on a batch of (demonstration, dynamics) episodes."""
    demos = list(demos)
    if not demos:
        return []
    agent = _SAgent(bundle, demos) if bundle.mode == "s-onis" else _UAgent(bundle, demos)

    def act(s, hist, sim):
        z, pred = agent.skill(s, hist)
        h, code = _dynamics_codes(bundle, hist)
        return policy_action(bundle.policy, s, z, h), pred, code

    sim, preds, stages, codes, lengths = _simulate(act, demos, dynamics, env, rngs, renderer)
    stage_of = bundle.code_to_stage if bundle.mode == "u-onis" else None
    return _results(sim, demos, dynamics, preds, stages, codes, lengths, agent.demo_matching, agent.flagged,
                    stage_of)


def run_expert(demos: Sequence[Demonstration], dynamics: Sequence[DynamicsConfig], env: EnvConfig,
               rngs: Sequence[np.random.Generator]) -> List[EpisodeResult]:
    """Oracle reference: the scripted expert with the true subtask and drift mean."""
    demos = list(demos)
    if not demos:
        return []

    def act(s, hist, sim):
        return sim.expert_actions(), sim.current_subtask(), np.full(len(s), -1)

    sim, preds, stages, codes, lengths = _simulate(act, demos, dynamics, env, rngs)
    return _results(sim, demos, dynamics, preds, stages, codes, lengths, np.ones(len(demos)),
                    np.zeros(len(demos), dtype=bool))


# -- flat-BC baseline ---------------------------------------------------------------------

@dataclass(frozen=True)
class FlatBCConfig:
    history: int = 10
    hidden: int = 128
    layers: int = 5
    lr: float = 0.05
    steps: int = 6000
    batch: int = 256
    head_hidden: int = 128
    head_lr: float = 0.5
    head_steps: int = 5000
    alpha: float = 1.0
    prefix_relabel: bool = True
    delta_features: bool = True
    delta: float = 0.05


class FlatBC:
    """Single policy over ``s || demo embedding || (s, a) history``; no skills, no dynamics codes."""

    def __init__(self, encoders: FrozenEncoders, config: FlatBCConfig = FlatBCConfig(),
                 rng: Optional[np.random.Generator] = None, params: Optional[ParamSet] = None):
        self.encoders = encoders
        self.config = config
        c = config
        head_sizes = (EMBED_DIM, c.head_hidden, EMBED_DIM)
        width = STATE_DIM + EMBED_DIM + c.history * PAIR_DIM + (2 * c.history if c.delta_features else 0)
        pol_sizes = (width,) + (c.hidden,) * c.layers + (ACTION_DIM,)
        if params is None:
            if rng is None:
                raise ValueError("need an rng to initialise fresh parameters")
            params = ParamSet()
            ad.init_mlp(head_sizes, rng, "g.", params, activation_tag="tanh")
            ad.init_mlp(pol_sizes, rng, "bc.", params)
        self.params = params
        self.head = MLP(head_sizes, params=params, prefix="g.", activation_tag="tanh")
        self.policy = MLP(pol_sizes, params=params, prefix="bc.")

    def head_params(self) -> ParamSet:
        return ParamSet({n: self.params[n] for n in self.params.names() if n.startswith("g.")})

    def policy_params(self) -> ParamSet:
        return ParamSet({n: self.params[n] for n in self.params.names() if n.startswith("bc.")})

    def demo_embedding(self, demo: Demonstration) -> np.ndarray:
        enc = self.encoders
        if demo.modality == "video":
            v = enc.encode_video(np.asarray(demo.payload, dtype=np.float64))
            return _unit(self.head.numpy(v[None]))[0]
        return enc.base_embedding([episode_instruction_id(demo.payload)])[0]

    def features(self, s: np.ndarray, e: np.ndarray, window: np.ndarray) -> np.ndarray:
        """Policy input; optionally with position deltas through the history up to ``s`` (scaled by the step)."""
        parts = [s, e, window]
        if self.config.delta_features:
            H = self.config.history
            p = np.concatenate([window.reshape(len(s), H, PAIR_DIM)[:, :, :2], s[:, None, :2]], axis=1)
            parts.append(((p[:, 1:] - p[:, :-1]) / self.config.delta).reshape(len(s), -1))
        return np.concatenate(parts, axis=1)

    def act(self, s: np.ndarray, e: np.ndarray, window: np.ndarray) -> np.ndarray:
        return np.clip(self.policy.numpy(self.features(s, e, window)), -1.0, 1.0)

    def checksum(self) -> str:
        return self.params.checksum()


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def head_contrastive_loss(model: FlatBC, video_emb: np.ndarray, own: np.ndarray, targets: np.ndarray,
                          alpha: float = 1.0) -> Tensor:
    """Episode-level alignment of ``g(Phi_V(video))`` to its instruction embedding (negatives-only denominator)."""
    g = model.head(Tensor(video_emb))
    S = ad.sim_matrix(g, Tensor(targets), alpha)
    pos_mask = np.zeros(S.shape)
    pos_mask[np.arange(len(own)), own] = 1.0
    pos = (S * Tensor(pos_mask)).sum(axis=1)
    neg = (S * Tensor(1.0 - pos_mask)).sum(axis=1)
    return (ad.log(neg) - ad.log(pos)).mean()


def flat_bc_baseline(trajectories: Sequence[Trajectory], encoders: FrozenEncoders,
                     config: FlatBCConfig = FlatBCConfig(), seed: int = 0, log=None) -> FlatBC:
    """Train the contrastive demo head, then the flat policy by behaviour cloning.

    With ``prefix_relabel`` the head also learns from clips covering each
    task prefix, and each policy sample may be conditioned on the instruction
    of a prefix that still contains the current stage, so shorter
    demonstrations are in-distribution too.
    """
    rng = np.random.default_rng([seed, 0xBC])
    model = FlatBC(encoders, config, np.random.default_rng([seed, 0xBC1]))
    c = config
    trajectories = list(trajectories)
    instr, videos = [], []
    for t in trajectories:
        ks = range(1, len(t.task) + 1) if c.prefix_relabel else [len(t.task)]
        pos = _stage_positions(t)
        for k in ks:
            # the clip that demonstrates the first k subtasks
            end = int(np.argmax(pos >= k)) if np.any(pos >= k) else len(t)
            instr.append(episode_instruction_id(t.task[:k]))
            videos.append(encoders.encode_video(t.frames[:max(end, 1)]))
    videos = np.stack(videos)
    distinct = sorted(set(instr))
    targets = encoders.base_embedding(distinct)
    own = np.array([distinct.index(l) for l in instr])
    for step in range(c.head_steps):
        idx = rng.integers(0, len(videos), size=min(c.batch, len(videos)))
        loss = head_contrastive_loss(model, videos[idx], own[idx], targets, c.alpha)
        loss.backward()
        ad.sgd_step(model.head_params(), c.head_lr)
        if log is not None and step % 100 == 0:
            log("head", step, loss.item())

    lengths = np.array([len(t) for t in trajectories])
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    S = np.concatenate([t.states for t in trajectories])
    A = np.concatenate([t.actions for t in trajectories])
    stage_pos = np.concatenate([_stage_positions(t) for t in trajectories])
    K = np.array([len(t.task) for t in trajectories])
    prefix_table = {}
    for t in trajectories:
        for k in range(1, len(t.task) + 1):
            l = episode_instruction_id(t.task[:k])
            if l not in prefix_table:
                prefix_table[l] = encoders.base_embedding([l])[0]
    prefix_emb = np.zeros((len(trajectories), max(K), EMBED_DIM))
    for i, t in enumerate(trajectories):
        for k in range(1, len(t.task) + 1):
            prefix_emb[i, k - 1] = prefix_table[episode_instruction_id(t.task[:k])]
    pol = model.policy_params()
    for step in range(c.steps):
        ep = rng.integers(0, len(trajectories), size=c.batch)
        t = (rng.random(c.batch) * lengths[ep]).astype(np.int64)
        flat = offsets[ep] + t
        if c.prefix_relabel:
            lo = stage_pos[flat] + 1
            k = lo + (rng.random(c.batch) * (K[ep] - lo + 1)).astype(np.int64)
        else:
            k = K[ep]
        e = prefix_emb[ep, k - 1]
        idx = offsets[ep][:, None] + window_index(t, c.history)
        win = build_windows(S, A, idx, empty=(t == 0))
        diff = Tensor(A[flat]) - model.policy(Tensor(model.features(S[flat], e, win)))
        loss = (diff * diff).sum(axis=1).mean()
        loss.backward()
        ad.sgd_step(pol, c.lr)
        if log is not None and step % 500 == 0:
            log("bc", step, loss.item())
    return model


def _stage_positions(traj: Trajectory) -> np.ndarray:
    """Index within the task of the stage under way at every step."""
    pos = {j: k for k, j in enumerate(traj.task)}
    return np.array([pos.get(int(g), len(traj.task) - 1) for g in traj.stages], dtype=np.int64)


def flat_bc_imitate(model: FlatBC, demos: Sequence[Demonstration], dynamics: Sequence[DynamicsConfig],
                    env: EnvConfig, rngs: Sequence[np.random.Generator]) -> List[EpisodeResult]:
    demos = list(demos)
    if not demos:
        return []
    E = np.stack([model.demo_embedding(d) for d in demos])
    H = model.config.history

    def act(s, hist, sim):
        a = model.act(s, E, hist.pair_window(H))
        return a, np.full(len(s), -1), np.full(len(s), -1)

    sim, preds, stages, codes, lengths = _simulate(act, demos, dynamics, env, rngs)
    return _results(sim, demos, dynamics, preds, stages, codes, lengths, np.full(len(demos), np.nan),
                    np.zeros(len(demos), dtype=bool))


# -- benchmark ----------------------------------------------------------------------------

@dataclass(frozen=True)
class BenchmarkSuite:
    Ks: Tuple[int, ...] = (1, 2, 4)
    levels: Tuple[str, ...] = LEVEL_ORDER
    modalities: Tuple[str, ...] = ("video",)
    n_episodes: int = 100
    seeds: Tuple[int, ...] = (0, 1, 2)
    seen_m: bool = False
    noise: Optional[Tuple[str, str]] = None


def episode_setup(held_out: Sequence[Sequence[int]], K: int, level: str, modality: str, n: int, seed: int,
                  env: EnvConfig, seen_m: bool = False, renderer: Optional[Renderer] = None,
                  noise: Optional[Tuple[str, str]] = None):
    """Demonstrations, test dynamics and env seed keys for one evaluation cell (shared by every method)."""
    tasks = evaluation_tasks(held_out, K, n)
    cond = EvalCondition(level, seen_m)
    demos, dyn, rngs = [], [], []
    for i, task in enumerate(tasks):
        r = np.random.default_rng([seed, K, LEVEL_ORDER.index(level), i, 0xD3])
        demo = make_demo(task, modality, env, r, renderer)
        if noise is not None:
            demo = corrupt_demo(demo, noise[0], noise[1], np.random.default_rng([seed, K, i, 0x401]))
        demos.append(demo)
        dyn.append(cond.draw(r))
        rngs.append((seed + 1_000_003, K * 100_000 + LEVEL_ORDER.index(level) * 10_000 + i))
    return demos, dyn, rngs


def env_rngs(keys: Sequence[Tuple[int, int]]) -> List[np.random.Generator]:
    """Fresh per-episode environment generators, so every method faces identical draws."""
    return [episode_rng(a, b) for a, b in keys]


def _run_cell(args):
    methods, held_out, suite, env, K, level, modality, seed = args
    renderer = Renderer.from_config(env)
    demos, dyn, keys = episode_setup(held_out, K, level, modality, suite.n_episodes, seed, env, suite.seen_m,
                                     renderer, suite.noise if modality == "video" else None)
    out = []
    for name, method in methods.items():
        rng_copy = env_rngs(keys)
        if isinstance(method, FlatBC):
            eps = flat_bc_imitate(method, demos, dyn, env, rng_copy)
        else:
            eps = one_shot_imitate(method, demos, dyn, env, rng_copy, renderer)
        out.append((name, eps))
    return out


def run_benchmark(methods: Dict[str, Union[ModelBundle, FlatBC]], held_out: Sequence[Sequence[int]],
                  suite: BenchmarkSuite, env: EnvConfig = EnvConfig(), episodes_out: Optional[list] = None,
                  jobs: int = 1):
    """Success and matching ratio per (K, level, modality, method), aggregated over seeds.

    Every method faces identical demonstrations, drifts and observation
    noise.  Cells are independent, so ``jobs > 1`` evaluates them in worker
    processes with unchanged results.  Returns ``(metric_rows, run_rows)``;
    per-episode results are appended to ``episodes_out`` when given.
    """
    runs: List[RunRow] = []
    if suite.n_episodes <= 0:
        return [], runs
    cells = [(K, level, modality, seed) for K in suite.Ks for level in suite.levels
             for modality in suite.modalities for seed in suite.seeds]
    tasks = [(methods, held_out, suite, env) + c for c in cells]
    if jobs > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, tasks))
    else:
        results = [_run_cell(t) for t in tasks]
    for (K, level, modality, seed), cell in zip(cells, results):
        for name, eps in cell:
            runs.append(run_rows_from_episodes(eps, K, level, modality, name, seed))
            if episodes_out is not None:
                episodes_out.append(((K, level, modality, name, seed), eps))
    return aggregate(runs), runs
