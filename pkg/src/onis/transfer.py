"""Skill transfer policy and the joint training loop.

The policy maps ``(s_t, z_t, h_t)`` to an action.  Training sums three
losses: behaviour cloning (policy and dynamics encoder), temporal
contrast (dynamics encoder) and inverse-dynamics reconstruction (encoder
and decoder).  Because each network only appears in the losses that are
meant to update it, one backward pass over the weighted sum yields the
intended per-network updates.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import MLP, ParamSet, Tensor
from .dynamics import (DynamicsModel, DynamicsModelConfig, build_windows, canonical_sampler, codebook_usage,
                       grouped_contrastive, reconstruction_from_codes, sample_positive_pair, usage_entropy,
                       window_index)
from .multimodal import EMBED_DIM
from .world import ACTION_DIM, STATE_DIM

LOG_FIELDS = ("step", "loss_bc", "loss_con", "loss_rec", "codebook_usage_entropy")


class TransferPolicy:
    """``pi_tr``: dense net over ``s || z || h`` with leaky-ReLU hidden layers."""

    def __init__(self, rng: Optional[np.random.Generator] = None, hidden: int = 128, layers: int = 5,
                 code_dim: int = 10, params: Optional[ParamSet] = None, skill_dim: int = EMBED_DIM):
        self.sizes = (STATE_DIM + skill_dim + code_dim,) + (hidden,) * layers + (ACTION_DIM,)
        self.net = MLP(self.sizes, rng, params=params, prefix="pi.")
        self.params = self.net.params

    def __call__(self, s, z, h) -> Tensor:
        h = h if isinstance(h, Tensor) else Tensor(h)
        return self.net(ad.concat([Tensor(s), Tensor(z), h]))


def policy_action(policy: TransferPolicy, s, z, h, clip: bool = True) -> np.ndarray:
    """Deterministic action(s); clipped to ``[-1, 1]`` unless ``clip`` is False."""
    s, z, h = (np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in (s, z, h))
    width = s.shape[1] + z.shape[1] + h.shape[1]
    if width != policy.sizes[0] or not (len(s) == len(z) == len(h)):
        raise ValueError(f"policy expects inputs totalling {policy.sizes[0]} columns with equal rows; "
                         f"got s{s.shape}, z{z.shape}, h{h.shape}")
    a = policy(s, z, h).data
    return np.clip(a, -1.0, 1.0) if clip else a


def bc_loss(policy: TransferPolicy, model: DynamicsModel, s: np.ndarray, a: np.ndarray, z: np.ndarray,
            windows: np.ndarray, use_vq: Optional[bool] = None) -> Tensor:
    """Mean ``||a_t - pi_tr(s_t, z_t, psi_enc(tau_t))||^2``; gradients reach the policy and the encoder."""
    h, *_ = model.encode(windows, use_vq)
    diff = Tensor(a) - policy(s, z, h)
    return (diff * diff).sum(axis=1).mean()


# -- data -----------------------------------------------------------------------

@dataclass
class TransferData:
    """Flattened training arrays with per-step cached skills."""

    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    skills: np.ndarray
    skill_ids: np.ndarray
    offsets: np.ndarray
    lengths: np.ndarray
    m: np.ndarray

    @classmethod
    def from_trajectories(cls, trajectories: Sequence, skill_ids: Sequence[np.ndarray],
                          table: np.ndarray) -> "TransferData":
        ids = [np.asarray(i, dtype=np.int64) for i in skill_ids]
        lengths = np.array([len(t) for t in trajectories], dtype=np.int64)
        return cls(states=np.concatenate([t.states for t in trajectories]),
                   actions=np.concatenate([t.actions for t in trajectories]),
                   next_states=np.concatenate([t.next_states() for t in trajectories]),
                   skills=np.concatenate([table[i] for i in ids]),
                   skill_ids=np.concatenate(ids),
                   offsets=np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64),
                   lengths=lengths,
                   m=np.array([t.dynamics.m for t in trajectories], dtype=np.float64))

    @property
    def n_episodes(self) -> int:
        return len(self.lengths)

    def sample_times(self, ep: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Uniform ``t`` in ``[1, T-1]`` per episode."""
        return 1 + (rng.random(len(ep)) * (self.lengths[ep] - 1)).astype(np.int64)

    def windows(self, ep: np.ndarray, t: np.ndarray, h0: int):
        """``(windows, pair_states, pair_actions, pair_next)`` for ``tau_t`` of each ``(ep, t)``."""
        idx = self.offsets[ep][:, None] + window_index(t, h0)
        return (build_windows(self.states, self.actions, idx), self.states[idx], self.actions[idx],
                self.next_states[idx])


# -- training -------------------------------------------------------------------------

@dataclass(frozen=True)
class TransferConfig:
    steps: int = 6000
    batch: int = 256
    lr_policy: float = 0.05
    lr_encoder: float = 0.05
    lr_decoder: float = 0.05
    w_bc: float = 1.0
    w_con: float = 1.0
    w_rec: float = 1.0
    w_vq: float = 1.0
    use_contrastive: bool = True
    use_vq: bool = True
    use_reconstruction: bool = True
    sampler: str = "Random±T"
    groups: int = 8
    group_size: int = 16
    alpha: float = 1.0
    include_positive: bool = True
    early_stop: bool = True
    plateau_window: int = 1000
    plateau_tol: float = 1e-3
    log_every: int = 100
    hidden: int = 128
    layers: int = 5
    grad_clip: float = 0.0
    dynamics: DynamicsModelConfig = field(default_factory=DynamicsModelConfig)


ABLATION_ARMS = {
    "w/ Contra, w/ VQ": dict(use_contrastive=True, use_vq=True),
    "w/ Contra, wo/ VQ": dict(use_contrastive=True, use_vq=False),
    "wo/ Contra, w/ VQ": dict(use_contrastive=False, use_vq=True),
    "wo/ Contra, wo/ VQ": dict(use_contrastive=False, use_vq=False),
    "wo/ Recon": dict(use_reconstruction=False),
}


def ablation_config(base: TransferConfig, arm: str) -> TransferConfig:
    if arm not in ABLATION_ARMS:
        raise ValueError(f"unknown ablation arm {arm!r}; expected one of {list(ABLATION_ARMS)}")
    cfg = replace(base, **ABLATION_ARMS[arm])
    return replace(cfg, dynamics=replace(cfg.dynamics, use_vq=cfg.use_vq))


@dataclass
class TransferResult:
    policy: TransferPolicy
    model: DynamicsModel
    log: List[dict]
    steps_run: int


def _contrastive_batch(data: TransferData, cfg: TransferConfig, rng: np.random.Generator):
    """Episode/time indices for ``groups`` groups; rows 0 and 1 of each group are the positive pair."""
    n = cfg.group_size
    if n < 3:
        raise ValueError("contrastive groups need at least 3 members")
    ep_all, t_all = [], []
    for _ in range(cfg.groups):
        e = int(rng.integers(0, data.n_episodes))
        others = np.nonzero(data.m != data.m[e])[0]
        if len(others) == 0:
            raise ValueError("contrastive batches need episodes with at least two different dynamics")
        tj, tk = sample_positive_pair(int(data.lengths[e]), cfg.sampler, rng, cfg.dynamics.h0)
        neg = others[rng.integers(0, len(others), size=n - 2)]
        ep_all.append(np.concatenate([[e, e], neg]))
        t_all.append(np.concatenate([[tj, tk], data.sample_times(neg, rng)]))
    return np.concatenate(ep_all), np.concatenate(t_all)


def _plateaued(history: List[float], window: int, tol: float) -> bool:
    if len(history) < 2 * window:
        return False
    prev = float(np.mean(history[-2 * window:-window]))
    cur = float(np.mean(history[-window:]))
    return (prev - cur) < tol * abs(prev)


def train_skill_transfer(data: TransferData, config: TransferConfig = TransferConfig(), seed: int = 0,
                         policy: Optional[TransferPolicy] = None, model: Optional[DynamicsModel] = None,
                         log_path=None, progress: Optional[Callable[[dict], None]] = None) -> TransferResult:
    """Joint training of ``pi_tr``, ``psi_enc`` and ``psi_dec`` on cached skills."""
    cfg = config
    canonical_sampler(cfg.sampler)
    dyn_cfg = replace(cfg.dynamics, use_vq=cfg.use_vq)
    rng = np.random.default_rng([seed, 0x7A])
    init_rng = np.random.default_rng([seed, 0x1717])
    if model is None:
        model = DynamicsModel(dyn_cfg, init_rng)
    if policy is None:
        policy = TransferPolicy(init_rng, cfg.hidden, cfg.layers, dyn_cfg.code_dim)
    enc_params, dec_params = model.encoder_params(), model.decoder_params()
    h0 = dyn_cfg.h0
    use_con = cfg.use_contrastive and cfg.w_con != 0
    use_rec = cfg.use_reconstruction and cfg.w_rec != 0
    log: List[dict] = []
    history: List[float] = []
    usage = np.zeros(dyn_cfg.n_codes, dtype=np.int64)
    sums = np.zeros(3)
    count = 0
    step = 0
    for step in range(1, cfg.steps + 1):
        ep = rng.integers(0, data.n_episodes, size=cfg.batch)
        t = data.sample_times(ep, rng)
        flat = data.offsets[ep] + t
        windows, ps, pa, pn = data.windows(ep, t, h0)
        h, code, idx, z_e = model.encode(windows, cfg.use_vq)
        diff = Tensor(data.actions[flat]) - policy(data.states[flat], data.skills[flat], h)
        l_bc = (diff * diff).sum(axis=1).mean()
        total = l_bc * cfg.w_bc
        if cfg.use_vq:
            total = total + ad.vq_aux_loss(z_e, code, dyn_cfg.beta) * cfg.w_vq
            usage += codebook_usage(idx, dyn_cfg.n_codes)
        l_rec = l_con = None
        if use_rec:
            l_rec = reconstruction_from_codes(model, h, ps, pa, pn)
            total = total + l_rec * cfg.w_rec
        if use_con:
            cep, ct = _contrastive_batch(data, cfg, rng)
            cw, *_ = data.windows(cep, ct, h0)
            ch, ccode, _, cz = model.encode(cw, cfg.use_vq)
            l_con = grouped_contrastive(ch, cfg.group_size, cfg.alpha, cfg.include_positive)
            total = total + l_con * cfg.w_con
            if cfg.use_vq:
                total = total + ad.vq_aux_loss(cz, ccode, dyn_cfg.beta) * cfg.w_vq
        value = total.item()
        if not np.isfinite(value):
            raise FloatingPointError(f"training loss diverged at step {step}")
        total.backward()
        if cfg.grad_clip > 0:
            for ps_ in (policy.params, enc_params, dec_params):
                ad.clip_grad_norm(ps_, cfg.grad_clip)
        ad.sgd_step(policy.params, cfg.lr_policy)
        ad.sgd_step(enc_params, cfg.lr_encoder)
        ad.sgd_step(dec_params, cfg.lr_decoder)
        history.append(value)
        sums += [l_bc.item(), 0.0 if l_con is None else l_con.item(), 0.0 if l_rec is None else l_rec.item()]
        count += 1
        if step % cfg.log_every == 0 or step == cfg.steps:
            row = {"step": step, "loss_bc": sums[0] / count,
                   "loss_con": sums[1] / count if use_con else float("nan"),
                   "loss_rec": sums[2] / count if use_rec else float("nan"),
                   "codebook_usage_entropy": usage_entropy(usage) if cfg.use_vq else float("nan")}
            log.append(row)
            if progress is not None:
                progress(row)
            sums[:] = 0.0
            count = 0
            usage[:] = 0
        at_check = cfg.early_stop and step % cfg.plateau_window == 0
        if at_check and _plateaued(history, cfg.plateau_window, cfg.plateau_tol):
            break
    if log_path is not None:
        write_training_log(log_path, log)
    return TransferResult(policy=policy, model=model, log=log, steps_run=step)


def write_training_log(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(LOG_FIELDS))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if k != "step" else int(r[k])) for k in LOG_FIELDS})
