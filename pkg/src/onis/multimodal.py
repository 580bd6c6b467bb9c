"""Frozen video/language encoders sharing a 16-dim embedding space, plus prompt tuning.

The encoders play the part of a pretrained vision-language model.  They are
produced deterministically from a construction seed by a short pretraining
run on a private corpus of scripted episodes (random subtask orders, random
stationary drift).  The language side is pretrained so that it agrees with
the visual side only when a particular context vector is appended to the
instruction code; with the all-zero prompt the two sides are misaligned.
Recovering that alignment from a few annotated clips is the job of the
learnable prompt.

Nothing in this module updates the encoder weights after construction.
"""

from __future__ import annotations

import csv
import functools
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .dataset import EPISODE_ID_BASE, decode_episode_instruction, episode_rng, rollout_expert
from .world import FRAME_DIM, N_OBJECTS, DynamicsConfig, EnvConfig, Renderer

EMBED_DIM = 16
BASE_DIM = 8
SUMMARY_DIM = 3 * FRAME_DIM


@dataclass(frozen=True)
class EncoderConfig:
    seed: int = 11
    clip_len: int = 10
    hidden: int = 64
    pretrain_episodes: int = 240
    pretrain_iters: int = 400
    prompt_scale: float = 1.0


def sim(z: np.ndarray, z2: np.ndarray, alpha: float = 1.0) -> float:
    """``exp(cos(z, z')) / alpha``."""
    z, z2 = np.asarray(z, dtype=np.float64), np.asarray(z2, dtype=np.float64)
    nz, nz2 = np.linalg.norm(z), np.linalg.norm(z2)
    if nz == 0 or nz2 == 0:
        raise ValueError("sim is undefined for zero-norm vectors")
    if alpha <= 0:
        raise ValueError("temperature must be positive")
    return float(np.exp(np.dot(z, z2) / (nz * nz2)) / alpha)


def _normalize(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("cannot normalize a zero vector")
    return x / n


def clip_summaries(frames: np.ndarray, clip_len: int) -> np.ndarray:
    """Summary ``(mean, first, last)`` of every forward window ``frames[t:t+H]``.

    Windows running past the end repeat the final frame.
    """
    frames = np.asarray(frames, dtype=np.float64)
    T = len(frames)
    if T == 0:
        raise ValueError("empty clip")
    padded = np.concatenate([frames, np.repeat(frames[-1:], clip_len - 1, axis=0)], axis=0)
    csum = np.concatenate([np.zeros((1, FRAME_DIM)), np.cumsum(padded, axis=0)], axis=0)
    starts = np.arange(T)
    mean = (csum[starts + clip_len] - csum[starts]) / clip_len
    return np.concatenate([mean, padded[starts], padded[starts + clip_len - 1]], axis=1)


def clip_summary(clip: np.ndarray) -> np.ndarray:
    clip = np.asarray(clip, dtype=np.float64)
    if len(clip) == 0:
        raise ValueError("empty clip")
    return np.concatenate([clip.mean(axis=0), clip[0], clip[-1]])


def _orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


class FrozenEncoders:
    """Video encoder, instruction encoder and instruction code table."""

    def __init__(self, video: ParamSet, language: ParamSet, base_table: np.ndarray, config: EncoderConfig,
                 anchors: Optional[np.ndarray] = None):
        self.video = video
        self.language = language
        self.base_table = base_table
        self.config = config
        self.anchors = anchors
        self.video_sizes = (SUMMARY_DIM, config.hidden, EMBED_DIM)
        self.language_sizes = (2 * BASE_DIM, config.hidden, EMBED_DIM)

    @property
    def clip_len(self) -> int:
        return self.config.clip_len

    def checksum(self) -> str:
        return self.video.merged(self.language, prefixes=["v.", "l."]).checksum()

    # -- video ------------------------------------------------------------------
    def video_raw(self, summaries: np.ndarray) -> np.ndarray:
        out = ad.forward_mlp(self.video, Tensor(summaries), self.video_sizes, "tanh")
        return out.data

    def encode_summaries(self, summaries: np.ndarray) -> np.ndarray:
        return _normalize(self.video_raw(np.atleast_2d(summaries)))

    def encode_clip(self, clip: np.ndarray) -> np.ndarray:
        """Embed one clip of exactly ``clip_len`` frames (shorter clips are padded)."""
        clip = np.asarray(clip, dtype=np.float64)
        if len(clip) == 0:
            raise ValueError("empty clip")
        if len(clip) < self.clip_len:
            clip = np.concatenate([clip, np.repeat(clip[-1:], self.clip_len - len(clip), axis=0)])
        return self.encode_summaries(clip_summary(clip[:self.clip_len])[None])[0]

    def encode_windows(self, frames: np.ndarray) -> np.ndarray:
        """Embeddings of every sliding window (stride 1) over a frame sequence."""
        return self.encode_summaries(clip_summaries(frames, self.clip_len))

    def encode_video(self, frames: np.ndarray) -> np.ndarray:
        """Single embedding of a whole video (summary over all frames)."""
        return self.encode_summaries(clip_summary(frames)[None])[0]

    # -- language ---------------------------------------------------------------
    def base_code(self, l: int) -> np.ndarray:
        """Instruction code ``e_l``; episode-level ids compose their subtask codes."""
        l = int(l)
        if 0 <= l < N_OBJECTS:
            return self.base_table[l]
        if l >= EPISODE_ID_BASE:
            seq = decode_episode_instruction(l)
            if seq and all(0 <= j < N_OBJECTS for j in seq):
                v = sum((0.6 ** k) * self.base_table[j] for k, j in enumerate(seq))
                return v / np.linalg.norm(v)
        raise KeyError(f"unknown instruction id {l}")

    def language_tensor(self, codes: np.ndarray, prompt: Tensor) -> Tensor:
        n = codes.shape[0]
        ones = Tensor(np.ones((n, 1)))
        x = ad.concat([Tensor(codes), ones @ prompt])
        out = ad.forward_mlp(self.language, x, self.language_sizes, "tanh")
        return ad.l2_normalize(out)

    def encode_instructions(self, prompt_vec: np.ndarray, ids: Sequence[int]) -> np.ndarray:
        codes = np.stack([self.base_code(l) for l in ids])
        return self.language_tensor(codes, Tensor(np.asarray(prompt_vec).reshape(1, BASE_DIM))).data

    def base_embedding(self, ids: Sequence[int]) -> np.ndarray:
        """Un-prompted instruction embedding (all-zero prompt)."""
        return self.encode_instructions(np.zeros(BASE_DIM), ids)


@dataclass
class Prompt:
    params: ParamSet = field(default_factory=lambda: ParamSet({"theta_p": np.zeros((1, BASE_DIM))}))

    @property
    def tensor(self) -> Tensor:
        return self.params["theta_p"]

    @property
    def vector(self) -> np.ndarray:
        return self.params["theta_p"].data[0].copy()


def encode_clip(enc: FrozenEncoders, clip: np.ndarray) -> np.ndarray:
    return enc.encode_clip(clip)


def encode_instruction(enc: FrozenEncoders, prompt: Prompt, l: int) -> np.ndarray:
    return enc.encode_instructions(prompt.vector, [l])[0]


# -- construction -----------------------------------------------------------------

def _random_tasks(rng: np.random.Generator, n: int) -> List[Tuple[int, ...]]:
    out = []
    for _ in range(n):
        k = int(rng.integers(1, N_OBJECTS + 1))
        out.append(tuple(int(j) for j in rng.permutation(N_OBJECTS)[:k]))
    return out


def _fit(params: ParamSet, loss_fn, iters: int) -> None:
    names = params.names()
    shapes = [params[n].shape for n in names]
    sizes = [int(np.prod(s)) for s in shapes]

    def unpack(x):
        off = 0
        for n, s, k in zip(names, shapes, sizes):
            params[n].data = x[off:off + k].reshape(s).copy()
            off += k

    def fun(x):
        unpack(x)
        params.zero_grad()
        loss = loss_fn()
        loss.backward()
        g = np.concatenate([params.grads()[n].ravel() for n in names])
        return loss.item(), g

    x0 = np.concatenate([params[n].data.ravel() for n in names])
    res = minimize(fun, x0, jac=True, method="L-BFGS-B", options={"maxiter": iters})
    unpack(res.x)
    params.zero_grad()


@functools.lru_cache(maxsize=8)
def build_encoders(config: EncoderConfig = EncoderConfig(), env: EnvConfig = EnvConfig()) -> FrozenEncoders:
    """Deterministically construct (pretrain) the frozen encoders."""
    rng = np.random.default_rng([config.seed, 0xC11])
    base_table = _orthogonal(rng, BASE_DIM)[:N_OBJECTS]
    targets = _normalize(rng.standard_normal((N_OBJECTS, EMBED_DIM)))
    shifted = targets[np.roll(np.arange(N_OBJECTS), 1)]
    misaligned = _normalize(shifted + 0.6 * rng.standard_normal((N_OBJECTS, EMBED_DIM)))
    context = rng.normal(0.0, config.prompt_scale / np.sqrt(BASE_DIM), size=BASE_DIM)
    video = ad.init_mlp((SUMMARY_DIM, config.hidden, EMBED_DIM), rng, activation_tag="tanh")
    language = ad.init_mlp((2 * BASE_DIM, config.hidden, EMBED_DIM), rng, activation_tag="tanh")
    enc = FrozenEncoders(video, language, base_table, config)

    # visual corpus: windows labelled by the subtask under way at the window start
    tasks = _random_tasks(rng, config.pretrain_episodes)
    dyn = [DynamicsConfig(m=float(rng.uniform(-0.3, 0.3))) for _ in tasks]
    rngs = [episode_rng(config.seed + 7919, i) for i in range(len(tasks))]
    trajs, _ = rollout_expert(tasks, dyn, env, rngs, Renderer.from_config(env))
    X, Y = [], []
    for t in trajs:
        X.append(clip_summaries(t.frames, config.clip_len))
        Y.append(t.stages)
    X, Y = np.concatenate(X), np.concatenate(Y)
    keep = Y >= 0
    X, Y = X[keep], Y[keep]
    onehot = np.eye(N_OBJECTS)[Y]
    T_targets = Tensor(targets)

    def video_loss():
        z = ad.l2_normalize(ad.forward_mlp(video, Tensor(X), enc.video_sizes, "tanh"))
        logits = (z @ T_targets.T) * 8.0
        lse = ad.log(ad.exp(logits).sum(axis=1))
        return (lse - (logits * Tensor(onehot)).sum(axis=1)).mean()

    _fit(video, video_loss, config.pretrain_iters)

    # language: agree with the visual targets only along the context direction
    lam = np.concatenate([np.linspace(-0.25, 1.5, 15), rng.uniform(-0.25, 1.5, 25)])
    codes, goal = [], []
    for li in lam:
        for jitter in range(3):
            pv = li * context + (0.0 if jitter == 0 else 0.15) * rng.standard_normal(BASE_DIM)
            w = float(np.clip(li, 0.0, 1.0))
            for j in range(N_OBJECTS):
                codes.append(np.concatenate([base_table[j], pv]))
                goal.append((1 - w) * misaligned[j] + w * targets[j])
    codes = np.asarray(codes)
    goal = _normalize(np.asarray(goal))

    def language_loss():
        z = ad.l2_normalize(ad.forward_mlp(language, Tensor(codes), enc.language_sizes, "tanh"))
        return (1.0 - (z * Tensor(goal)).sum(axis=1)).mean()

    _fit(language, language_loss, config.pretrain_iters)
    return enc


# -- prompt tuning ----------------------------------------------------------------

def prompt_contrastive_loss(enc: FrozenEncoders, clip_embeddings: np.ndarray, labels: Sequence[int],
                            prompt: Prompt, instructions: Sequence[int], alpha: float = 1.0,
                            include_positive: bool = False) -> Tensor:
    """Mean over pairs of ``-log(sim(v, l_pos) / sum_{l != l_pos} sim(v, l))``.

    ``clip_embeddings`` are frozen video embeddings; only the prompt receives
    gradient.  ``include_positive`` adds the positive to the denominator
    (standard InfoNCE) for comparison.
    """
    instructions = list(instructions)
    if len(instructions) < 2:
        raise ValueError("contrastive loss needs at least two instructions")
    if alpha <= 0:
        raise ValueError("temperature must be positive")
    codes = np.stack([enc.base_code(l) for l in instructions])
    zl = enc.language_tensor(codes, prompt.tensor)
    zv = Tensor(_normalize(np.atleast_2d(clip_embeddings)))
    pos_index = np.array([instructions.index(int(l)) for l in labels])
    return pairwise_contrastive(zv, zl, pos_index, alpha, include_positive)


def pairwise_contrastive(zv: Tensor, zl: Tensor, pos_index: np.ndarray, alpha: float = 1.0,
                         include_positive: bool = False) -> Tensor:
    """``mean_i -log(sim(v_i, l_pos(i)) / sum_{l != l_pos(i)} sim(v_i, l))`` over row-normalized inputs."""
    cos = ad.l2_normalize(zv) @ ad.l2_normalize(zl).T
    s = ad.exp(cos) * (1.0 / alpha)
    pos_mask = np.zeros(cos.shape)
    pos_mask[np.arange(cos.shape[0]), np.asarray(pos_index)] = 1.0
    pos = (s * Tensor(pos_mask)).sum(axis=1)
    denom_mask = np.ones(cos.shape) if include_positive else 1.0 - pos_mask
    neg = (s * Tensor(denom_mask)).sum(axis=1)
    return (ad.log(neg) - ad.log(pos)).mean()


@dataclass
class PromptTrainConfig:
    lr: float = 0.5
    steps: int = 300
    batch: int = 256
    alpha: float = 1.0


def annotated_pairs(enc: FrozenEncoders, trajectories: Iterable) -> Tuple[np.ndarray, np.ndarray]:
    """Video embeddings of every window of the annotated episodes with their subtask labels."""
    X, Y = [], []
    for t in trajectories:
        if not t.annotated:
            continue
        X.append(enc.encode_windows(t.frames))
        Y.append(t.instr)
    if not X:
        raise ValueError("no subtask-level annotated episodes available")
    return np.concatenate(X), np.concatenate(Y)


def train_prompt(enc: FrozenEncoders, trajectories: Iterable, config: PromptTrainConfig = PromptTrainConfig(),
                 seed: int = 0, prompt: Optional[Prompt] = None, log=None) -> Prompt:
    prompt = prompt or Prompt()
    X, Y = annotated_pairs(enc, trajectories)
    rng = np.random.default_rng([seed, 0x9F])
    instructions = list(range(N_OBJECTS))
    for step in range(config.steps):
        idx = rng.integers(0, len(X), size=min(config.batch, len(X)))
        loss = prompt_contrastive_loss(enc, X[idx], Y[idx], prompt, instructions, config.alpha)
        loss.backward()
        ad.sgd_step(prompt.params, config.lr)
        if log is not None and step % 50 == 0:
            log(step, loss.item())
    return prompt


def retrieve(enc: FrozenEncoders, prompt: Prompt, clip_embeddings: np.ndarray,
             instructions: Sequence[int] = tuple(range(N_OBJECTS))) -> np.ndarray:
    """Index into ``instructions`` of the most similar instruction per clip embedding."""
    zl = enc.encode_instructions(prompt.vector, instructions)
    return np.asarray(instructions)[np.argmax(np.atleast_2d(clip_embeddings) @ zl.T, axis=1)]


def dump_embeddings(path, rows: Iterable[Tuple[str, int, np.ndarray]]) -> int:
    """Write ``tag, t, z0..z15`` CSV rows; returns the number written."""
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tag", "t"] + [f"z{i}" for i in range(EMBED_DIM)])
        for tag, t, z in rows:
            w.writerow([tag, int(t)] + [repr(float(x)) for x in np.asarray(z).ravel()])
            n += 1
    return n
