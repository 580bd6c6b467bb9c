"""Semantic skill sequences: S-mode retrieval, U-mode quantized skills, skill decoder.

S-mode maps every video window (or listed instruction) to one of the
prompted subtask-instruction embeddings.  U-mode learns its own discrete
skills: an instruction head ``theta_l`` quantized onto a small codebook, a
video head ``theta_v`` trained to retrieve the right code, and an action
reconstructor ``f`` that gives the codes their meaning.

The skill decoder predicts, from ``(s_t0, s_t, z_t)``, whether the current
skill is finished; it is trained on labels widened to every step within
five of a skill change.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import MLP, ParamSet, Tensor
from .multimodal import EMBED_DIM, FrozenEncoders, Prompt, retrieve
from .world import ACTION_DIM, FRAME_DIM, N_OBJECTS, STATE_DIM

SKILL_DONE_RADIUS = 5
MODES = ("S", "U")


# -- sequences ------------------------------------------------------------------

def collapse_runs(ids: Sequence[int], min_run: int = 1) -> List[Tuple[int, int]]:
    """``(id, first_index)`` of each run of equal ids.

    Runs shorter than ``min_run`` are dropped before neighbouring runs are
    merged, which filters isolated mis-retrievals.  If every run is short the
    single longest one is kept.
    """
    ids = [int(i) for i in ids]
    if not ids:
        return []
    runs: List[List[int]] = []  # [id, start, length]
    for t, i in enumerate(ids):
        if runs and runs[-1][0] == i:
            runs[-1][2] += 1
        else:
            runs.append([i, t, 1])
    kept = [r for r in runs if r[2] >= min_run]
    if not kept:
        kept = [max(runs, key=lambda r: r[2])]
    out: List[Tuple[int, int]] = []
    for i, start, _ in kept:
        if not out or out[-1][0] != i:
            out.append((i, start))
    return out


@dataclass
class SkillSequence:
    """Per-window skills of one demonstration.

    Attributes:
        embeddings: ``(n, 16)`` skill embedding per window.
        ids: ``(n,)`` discrete skill id per window (instruction id in S-mode,
            code index in U-mode).
        windows: source window (or time) index of each entry.
        mode: ``"S"`` or ``"U"``.
    """

    embeddings: np.ndarray
    ids: np.ndarray
    windows: np.ndarray
    mode: str

    def __post_init__(self):
        if len(self.ids) == 0:
            raise ValueError("a skill sequence cannot be empty")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if len(self.embeddings) != len(self.ids) or len(self.windows) != len(self.ids):
            raise ValueError("embeddings, ids and windows must have equal length")

    def __len__(self) -> int:
        return len(self.ids)

    def collapsed(self, min_run: int = 1) -> Tuple[np.ndarray, np.ndarray]:
        """Skill ids and embeddings with consecutive duplicates merged."""
        runs = collapse_runs(self.ids, min_run)
        starts = np.array([s for _, s in runs], dtype=np.int64)
        return self.ids[starts].copy(), self.embeddings[starts].copy()

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["window", "skill_id"] + [f"z{i}" for i in range(self.embeddings.shape[1])])
            for win, i, z in zip(self.windows, self.ids, self.embeddings):
                w.writerow([int(win), int(i)] + [repr(float(x)) for x in z])


def _is_video(demo) -> bool:
    arr = np.asarray(demo)
    return arr.ndim == 2 and arr.shape[1] == FRAME_DIM and arr.dtype.kind == "f"


def encode_sequence_S(enc: FrozenEncoders, prompt: Prompt, demo,
                      instructions: Sequence[int] = tuple(range(N_OBJECTS))) -> SkillSequence:
    """Translate a video (``(T, 32)`` frames) or an instruction-id list into S-mode skills."""
    instructions = list(instructions)
    table = enc.encode_instructions(prompt.vector, instructions)
    if _is_video(demo):
        frames = np.asarray(demo, dtype=np.float64)
        if len(frames) < enc.clip_len:
            emb = enc.encode_clip(frames)[None]
        else:
            emb = enc.encode_windows(frames)
        ids = retrieve(enc, prompt, emb, instructions)
        pos = np.array([instructions.index(int(i)) for i in ids], dtype=np.int64)
        return SkillSequence(table[pos], ids.astype(np.int64), np.arange(len(ids)), "S")
    ids = np.asarray(list(demo), dtype=np.int64)
    if len(ids) == 0:
        raise ValueError("empty instruction list")
    unknown = [int(i) for i in ids if int(i) not in instructions]
    if unknown:
        raise KeyError(f"instructions {unknown} are not in the retrievable set {instructions}")
    pos = np.array([instructions.index(int(i)) for i in ids], dtype=np.int64)
    return SkillSequence(table[pos], ids, np.arange(len(ids)), "S")


# -- U-mode ---------------------------------------------------------------------

def state_windows(states: np.ndarray, t_idx: np.ndarray, H: int) -> np.ndarray:
    """Flattened ``H`` states ending at each ``t`` (inclusive), front-padded with ``s_0``."""
    states = np.asarray(states, dtype=np.float64)
    t_idx = np.asarray(t_idx, dtype=np.int64)
    offsets = np.arange(-H + 1, 1)
    rows = np.clip(t_idx[:, None] + offsets[None, :], 0, None)
    return states[rows].reshape(len(t_idx), H * states.shape[1])


@dataclass(frozen=True)
class USkillConfig:
    window: int = 10
    n_codes: int = 8
    hidden: int = 128
    alpha: float = 1.0
    beta: float = 0.25
    lr: float = 0.05
    steps: int = 3000
    batch: int = 128


class USkillHeads:
    """``theta_v``, ``theta_l`` with its skill codebook, and the reconstructor ``f``."""

    def __init__(self, config: USkillConfig = USkillConfig(), rng: Optional[np.random.Generator] = None,
                 params: Optional[ParamSet] = None):
        self.config = config
        width = EMBED_DIM + config.window * STATE_DIM
        h = config.hidden
        if params is None:
            if rng is None:
                raise ValueError("need an rng to initialise fresh parameters")
            params = ParamSet()
            ad.init_mlp((width, h, h, EMBED_DIM), rng, "theta_v.", params)
            ad.init_mlp((width, h, h, EMBED_DIM), rng, "theta_l.", params)
            ad.init_mlp((STATE_DIM + EMBED_DIM, h, h, ACTION_DIM), rng, "f.", params)
            params.add("codebook", rng.uniform(-0.1, 0.1, size=(config.n_codes, EMBED_DIM)))
        self.params = params
        self.theta_v = MLP((width, h, h, EMBED_DIM), params=params, prefix="theta_v.")
        self.theta_l = MLP((width, h, h, EMBED_DIM), params=params, prefix="theta_l.")
        self.f = MLP((STATE_DIM + EMBED_DIM, h, h, ACTION_DIM), params=params, prefix="f.")

    @property
    def codebook(self) -> Tensor:
        return self.params["codebook"]

    def check_codebook(self) -> None:
        cb = self.codebook.data
        if np.allclose(cb, cb[:1]):
            raise ValueError("skill codebook is untrained (all rows equal)")

    def instruction_codes(self, base: np.ndarray, windows: np.ndarray):
        """Quantized ``theta_l`` output: ``(h, code, idx, z_e)`` with straight-through ``h``."""
        z_e = self.theta_l(ad.concat([Tensor(base), Tensor(windows)]))
        h, code, idx = ad.quantize(z_e, self.codebook)
        return h, code, idx, z_e

    def code_index(self, base: np.ndarray, windows: np.ndarray) -> np.ndarray:
        z_e = self.theta_l.numpy(np.concatenate([base, windows], axis=1))
        return ad.nearest_code(self.codebook.data, z_e)

    def video_query(self, video_emb: np.ndarray, windows: np.ndarray) -> np.ndarray:
        return self.theta_v.numpy(np.concatenate([video_emb, windows], axis=1))


def _candidate_codes(heads: USkillHeads, cand_base: np.ndarray, windows: np.ndarray) -> np.ndarray:
    """Code index of every candidate instruction at every window, ``(n, L)``."""
    n, L = len(windows), len(cand_base)
    base = np.repeat(cand_base[None], n, axis=0).reshape(n * L, -1)
    win = np.repeat(windows, L, axis=0)
    return heads.code_index(base, win).reshape(n, L)


def uskill_contrastive_loss(heads: USkillHeads, video_emb: np.ndarray, own_base: np.ndarray,
                            cand_base: np.ndarray, windows: np.ndarray, alpha: float = 1.0) -> Tensor:
    """Video-head retrieval loss against quantized instruction-head targets.

    For each sample the positive is the code of its own instruction; the
    negatives are the other distinct codes produced by the candidate
    instruction set.  Targets carry no gradient, so only ``theta_v`` learns.
    Samples whose candidates all share the positive code are skipped.
    """
    own_idx = heads.code_index(own_base, windows)
    cand_idx = _candidate_codes(heads, cand_base, windows)
    K = heads.codebook.shape[0]
    neg_mask = np.zeros((len(windows), K))
    rows = np.repeat(np.arange(len(windows)), cand_idx.shape[1])
    neg_mask[rows, cand_idx.ravel()] = 1.0
    neg_mask[np.arange(len(windows)), own_idx] = 0.0
    keep = neg_mask.sum(axis=1) > 0
    if not keep.any():
        raise ValueError("fewer than 2 distinct codebook targets among the candidate instructions")
    q = heads.theta_v(ad.concat([Tensor(video_emb[keep]), Tensor(windows[keep])]))
    S = ad.sim_matrix(q, ad.stop_gradient(heads.codebook), alpha)
    pos_mask = np.zeros((int(keep.sum()), K))
    pos_mask[np.arange(pos_mask.shape[0]), own_idx[keep]] = 1.0
    pos = (S * Tensor(pos_mask)).sum(axis=1)
    neg = (S * Tensor(neg_mask[keep])).sum(axis=1)
    return (ad.log(neg) - ad.log(pos)).mean()


def uskill_bc_loss(heads: USkillHeads, states: np.ndarray, actions: np.ndarray, own_base: np.ndarray,
                   windows: np.ndarray, with_aux: bool = False) -> Tensor:
    """Mean ``||a_t - f(s_t, z_l)||`` with ``z_l`` quantized straight-through."""
    h, code, _, z_e = heads.instruction_codes(own_base, windows)
    pred = heads.f(ad.concat([Tensor(states), h]))
    diff = Tensor(actions) - pred
    loss = ad.sqrt((diff * diff).sum(axis=1) + 1e-12).mean()
    if with_aux:
        loss = loss + ad.vq_aux_loss(z_e, code, heads.config.beta)
    return loss


def encode_sequence_U(heads: USkillHeads, enc: FrozenEncoders, demo, states: np.ndarray,
                      instructions: Sequence[int]) -> SkillSequence:
    """Per-step U-mode skills for the state history ``states``.

    ``demo`` is either a ``(T, 32)`` video or a single episode-level
    instruction id; ``instructions`` is the candidate set used for video
    retrieval.
    """
    heads.check_codebook()
    states = np.asarray(states, dtype=np.float64)
    windows = state_windows(states, np.arange(len(states)), heads.config.window)
    cb = heads.codebook.data
    if _is_video(demo):
        v = enc.encode_video(np.asarray(demo, dtype=np.float64))
        query = heads.video_query(np.repeat(v[None], len(states), axis=0), windows)
        cand = _candidate_codes(heads, enc.base_embedding(list(instructions)), windows)
        ids = select_codes(query, cb, cand)
    else:
        base = enc.base_embedding([int(demo)])
        ids = heads.code_index(np.repeat(base, len(states), axis=0), windows)
    return SkillSequence(cb[ids].copy(), ids.astype(np.int64), np.arange(len(states)), "U")


def select_codes(query: np.ndarray, codebook: np.ndarray, cand_idx: np.ndarray) -> np.ndarray:
    """Per row, the candidate code most similar (cosine) to ``query``; ties to the first candidate."""
    qn = query / np.linalg.norm(query, axis=1, keepdims=True)
    cn = codebook / np.linalg.norm(codebook, axis=1, keepdims=True)
    cos = qn @ cn.T
    scores = np.take_along_axis(cos, cand_idx, axis=1)
    return cand_idx[np.arange(len(cand_idx)), np.argmax(scores, axis=1)]


def train_uskills(heads: USkillHeads, enc: FrozenEncoders, trajectories: Sequence, instructions: Sequence[int],
                  seed: int = 0, log: Optional[Callable[[int, float, float], None]] = None) -> USkillHeads:
    """Jointly fit ``theta_l``/codebook/``f`` (action reconstruction) and ``theta_v`` (retrieval)."""
    cfg = heads.config
    rng = np.random.default_rng([seed, 0x05C1])
    lengths = np.array([len(t) for t in trajectories])
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    states = np.concatenate([t.states for t in trajectories])
    actions = np.concatenate([t.actions for t in trajectories])
    videos = np.stack([enc.encode_video(t.frames) for t in trajectories])
    instr = [t.episode_instruction for t in trajectories]
    distinct = sorted(set(instr))
    base_of = dict(zip(distinct, enc.base_embedding(distinct)))
    own = np.stack([base_of[l] for l in instr])
    cand_base = enc.base_embedding(list(instructions))
    for step in range(cfg.steps):
        ep = rng.integers(0, len(trajectories), size=cfg.batch)
        t = (rng.random(cfg.batch) * lengths[ep]).astype(np.int64)
        win = np.stack([state_windows(states[offsets[e]:offsets[e + 1]], [ti], cfg.window)[0]
                        for e, ti in zip(ep, t)])
        flat = offsets[ep] + t
        bc = uskill_bc_loss(heads, states[flat], actions[flat], own[ep], win, with_aux=True)
        try:
            con = uskill_contrastive_loss(heads, videos[ep], own[ep], cand_base, win, cfg.alpha)
        except ValueError:
            con = None  # codes still collapsed early in training; retry on later steps
        total = bc if con is None else bc + con
        total.backward()
        ad.sgd_step(heads.params, cfg.lr)
        if log is not None and step % 100 == 0:
            log(step, bc.item(), float("nan") if con is None else con.item())
    return heads


# -- skill-done labels and decoder ------------------------------------------------

def skill_done_labels(ids: Sequence[int], radius: int = SKILL_DONE_RADIUS) -> np.ndarray:
    """1 where a skill change ``z_i != z_{i+1}`` happens within ``radius`` steps, else 0."""
    ids = np.asarray(ids)
    T = len(ids)
    labels = np.zeros(T, dtype=np.int64)
    if T < 2:
        return labels
    changes = np.nonzero(ids[:-1] != ids[1:])[0]
    if len(changes) == 0:
        return labels
    diff = np.zeros(T + 1, dtype=np.int64)
    np.add.at(diff, np.clip(changes - radius, 0, T), 1)
    np.add.at(diff, np.clip(changes + radius + 1, 0, T), -1)
    return (np.cumsum(diff)[:T] > 0).astype(np.int64)


def skill_start_index(ids: Sequence[int]) -> np.ndarray:
    """For every ``t``, the first index of the run containing ``t`` (where ``s_t0`` is taken)."""
    ids = np.asarray(ids)
    start = np.zeros(len(ids), dtype=np.int64)
    for t in range(1, len(ids)):
        start[t] = start[t - 1] if ids[t] == ids[t - 1] else t
    return start


@dataclass(frozen=True)
class DecoderConfig:
    hidden: int = 128
    layers: int = 4
    lr: float = 0.05
    steps: int = 3000
    batch: int = 256
    threshold: float = 0.5


class SkillDecoder:
    """``Phi_dec``: logit that the current skill is done, from ``(s_t0, s_t, z_t)``."""

    def __init__(self, config: DecoderConfig = DecoderConfig(), rng: Optional[np.random.Generator] = None,
                 params: Optional[ParamSet] = None, embed_dim: int = EMBED_DIM):
        self.config = config
        sizes = (2 * STATE_DIM + embed_dim,) + (config.hidden,) * (config.layers - 1) + (1,)
        self.net = MLP(sizes, rng, params=params, prefix="dec.")
        self.params = self.net.params

    def logits(self, s0, s, z) -> Tensor:
        return self.net(ad.concat([Tensor(s0), Tensor(s), Tensor(z)]))

    def prob(self, s0, s, z) -> np.ndarray:
        x = self.logits(s0, s, z).data[:, 0]
        return 1.0 / (1.0 + np.exp(-x))

    def predict(self, s0, s, z) -> np.ndarray:
        return (self.prob(s0, s, z) >= self.config.threshold).astype(np.int64)


def decode_step(model: SkillDecoder, s0, s, z) -> int:
    """Binary skill-done decision for a single step (``sigma(logit) >= 0.5`` gives 1)."""
    return int(model.predict(np.atleast_2d(s0), np.atleast_2d(s), np.atleast_2d(z))[0])


def bce_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross entropy in the stable ``softplus(x) - y x`` form."""
    y = Tensor(np.asarray(labels, dtype=np.float64).reshape(-1, 1))
    return (ad.softplus(logits) - y * logits).mean()


def decoder_loss(model: SkillDecoder, s0, s, z, labels) -> Tensor:
    return bce_loss(model.logits(s0, s, z), labels)


def decoder_examples(trajectories: Sequence, skill_ids: Sequence[np.ndarray], table: np.ndarray):
    """``(s_t0, s_t, z_t, label)`` arrays over all steps of ``trajectories``.

    ``skill_ids[i]`` gives per-step skill ids of trajectory ``i`` and
    ``table`` maps an id to its embedding.
    """
    S0, S, Z, Y = [], [], [], []
    for traj, ids in zip(trajectories, skill_ids):
        ids = np.asarray(ids, dtype=np.int64)
        start = skill_start_index(ids)
        S0.append(traj.states[start])
        S.append(traj.states)
        Z.append(table[ids])
        Y.append(skill_done_labels(ids))
    return np.concatenate(S0), np.concatenate(S), np.concatenate(Z), np.concatenate(Y)


def train_skill_decoder(model: SkillDecoder, s0: np.ndarray, s: np.ndarray, z: np.ndarray, labels: np.ndarray,
                        seed: int = 0, log: Optional[Callable[[int, float], None]] = None) -> SkillDecoder:
    """Minimize BCE on skill-done labels with minibatch SGD."""
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"degenerate skill-done labels: {n_neg} negatives, {n_pos} positives")
    cfg = model.config
    rng = np.random.default_rng([seed, 0xDEC])
    for step in range(cfg.steps):
        idx = rng.integers(0, len(labels), size=min(cfg.batch, len(labels)))
        loss = decoder_loss(model, s0[idx], s[idx], z[idx], labels[idx])
        loss.backward()
        ad.sgd_step(model.params, cfg.lr)
        if log is not None and step % 100 == 0:
            log(step, loss.item())
    return model
