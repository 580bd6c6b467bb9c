"""Quantized dynamics embedding, inverse-dynamics decoder and temporal contrast.

A sub-trajectory ``tau_t`` is the ``H0`` most recent ``(s, a)`` pairs before
``t``.  The encoder maps it to a continuous vector that is snapped onto a
learnable codebook; the decoder reconstructs each action of the window from
its state transition and the code, which forces the code to carry the drift.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import MLP, ParamSet, Tensor
from .world import ACTION_DIM, STATE_DIM

PAIR_DIM = STATE_DIM + ACTION_DIM
SAMPLERS = ("Fixed±1", "Fixed±10", "Random±10", "Random±T")
_SAMPLER_ALIASES = {s.replace("±", "+-").lower(): s for s in SAMPLERS}
_SAMPLER_ALIASES.update({s.replace("±", "").lower(): s for s in SAMPLERS})


def canonical_sampler(name: str) -> str:
    if name in SAMPLERS:
        return name
    key = name.lower()
    if key in _SAMPLER_ALIASES:
        return _SAMPLER_ALIASES[key]
    raise ValueError(f"unknown positive-pair sampler {name!r}; expected one of {SAMPLERS}")


# -- quantizer ------------------------------------------------------------------

def quantize(codebook: np.ndarray, x: np.ndarray) -> Tuple[np.ndarray, int]:
    """Nearest codebook row to a single vector ``x`` and its index (ties to the lowest)."""
    codebook = np.asarray(codebook, dtype=np.float64)
    if codebook.ndim != 2 or codebook.shape[0] == 0:
        raise ValueError("codebook must be a non-empty 2-D array")
    idx = int(ad.nearest_code(codebook, np.asarray(x, dtype=np.float64).reshape(1, -1))[0])
    return codebook[idx].copy(), idx


# -- windows --------------------------------------------------------------------

def window_index(t: np.ndarray, h0: int) -> np.ndarray:
    """Local indices of the pairs making up ``tau_t``: ``t-h0 .. t-1``, clamped at 0."""
    t = np.asarray(t, dtype=np.int64).reshape(-1)
    return np.clip(t[:, None] + np.arange(-h0, 0)[None, :], 0, None)


def build_windows(states: np.ndarray, actions: np.ndarray, idx: np.ndarray,
                  empty: Optional[np.ndarray] = None) -> np.ndarray:
    """Flatten ``(s_i, a_i)`` pairs at ``idx`` into ``(n, h0 * 16)`` windows.

    Rows flagged ``empty`` (no action taken yet) use a zero action next to
    the first state.
    """
    s = states[idx]
    a = actions[idx].copy()
    if empty is not None:
        a[np.asarray(empty, dtype=bool)] = 0.0
    return np.concatenate([s, a], axis=2).reshape(len(idx), -1)


def trajectory_window(states: np.ndarray, actions: np.ndarray, t: int, h0: int = 3) -> np.ndarray:
    """``tau_t`` of one episode as a flat vector (first pair repeated early on)."""
    if t == 0:
        return build_windows(states, np.zeros_like(np.asarray(actions, dtype=np.float64)),
                             np.zeros((1, h0), dtype=np.int64))[0]
    return build_windows(states, actions, window_index([t], h0))[0]


# -- model ------------------------------------------------------------------------

@dataclass(frozen=True)
class DynamicsModelConfig:
    h0: int = 3
    n_codes: int = 20
    code_dim: int = 10
    enc_hidden: int = 64
    enc_layers: int = 3
    dec_hidden: int = 128
    dec_layers: int = 5
    beta: float = 0.25
    delta: float = 0.05
    use_vq: bool = True
    delta_features: bool = True


class DynamicsModel:
    """``psi_enc = q o psi^c_enc`` with its codebook, and the inverse-dynamics decoder ``psi_dec``.

    With ``delta_features`` both nets additionally receive position
    increments divided by the step size (a fixed, parameter-free expansion
    of their literal inputs), which makes drift a linear read-out.
    """

    def __init__(self, config: DynamicsModelConfig = DynamicsModelConfig(),
                 rng: Optional[np.random.Generator] = None, params: Optional[ParamSet] = None):
        self.config = config
        c = config
        enc_sizes = (self.encoder_width,) + (c.enc_hidden,) * (c.enc_layers - 1) + (c.code_dim,)
        dec_sizes = (self.decoder_width,) + (c.dec_hidden,) * (c.dec_layers - 1) + (ACTION_DIM,)
        if params is None:
            if rng is None:
                raise ValueError("need an rng to initialise fresh parameters")
            params = ParamSet()
            ad.init_mlp(enc_sizes, rng, "enc.", params)
            ad.init_mlp(dec_sizes, rng, "dec.", params)
            params.add("codebook", rng.uniform(-0.1, 0.1, size=(c.n_codes, c.code_dim)))
        self.params = params
        self.encoder = MLP(enc_sizes, params=params, prefix="enc.")
        self.decoder = MLP(dec_sizes, params=params, prefix="dec.")

    @property
    def encoder_width(self) -> int:
        extra = 2 * (self.config.h0 - 1) if self.config.delta_features else 0
        return self.config.h0 * PAIR_DIM + extra

    @property
    def decoder_width(self) -> int:
        extra = 2 if self.config.delta_features else 0
        return 2 * STATE_DIM + extra + self.config.code_dim

    @property
    def codebook(self) -> Tensor:
        return self.params["codebook"]

    def encoder_params(self) -> ParamSet:
        names = [n for n in self.params.names() if n.startswith("enc.") or n == "codebook"]
        return ParamSet({n: self.params[n] for n in names})

    def decoder_params(self) -> ParamSet:
        return ParamSet({n: self.params[n] for n in self.params.names() if n.startswith("dec.")})

    # -- features -------------------------------------------------------------
    def encoder_features(self, windows: np.ndarray) -> np.ndarray:
        w = np.asarray(windows, dtype=np.float64).reshape(len(windows), self.config.h0, PAIR_DIM)
        if not self.config.delta_features:
            return w.reshape(len(windows), -1)
        dp = (w[:, 1:, :2] - w[:, :-1, :2]) / self.config.delta
        return np.concatenate([w.reshape(len(windows), -1), dp.reshape(len(windows), -1)], axis=1)

    def decoder_features(self, s: np.ndarray, s_next: np.ndarray) -> np.ndarray:
        if not self.config.delta_features:
            return np.concatenate([s, s_next], axis=1)
        return np.concatenate([s, s_next, (s_next[:, :2] - s[:, :2]) / self.config.delta], axis=1)

    # -- forward --------------------------------------------------------------
    def pre_quant(self, windows: np.ndarray) -> Tensor:
        return self.encoder(Tensor(self.encoder_features(windows)))

    def encode(self, windows: np.ndarray, use_vq: Optional[bool] = None):
        """``(h, code, idx, z_e)``; with VQ off, ``h = z_e`` and ``code``/``idx`` are ``None``."""
        use_vq = self.config.use_vq if use_vq is None else use_vq
        z_e = self.pre_quant(windows)
        if not use_vq:
            return z_e, None, None, z_e
        h, code, idx = ad.quantize(z_e, self.codebook)
        return h, code, idx, z_e

    def encode_numpy(self, windows: np.ndarray,
                     use_vq: Optional[bool] = None) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        use_vq = self.config.use_vq if use_vq is None else use_vq
        z_e = self.encoder.numpy(self.encoder_features(windows))
        if not use_vq:
            return z_e, None
        idx = ad.nearest_code(self.codebook.data, z_e)
        return self.codebook.data[idx].copy(), idx

    def decode(self, s: np.ndarray, s_next: np.ndarray, h: Tensor) -> Tensor:
        return self.decoder(ad.concat([Tensor(self.decoder_features(s, s_next)), h]))


def encode_dynamics(model: DynamicsModel, window: np.ndarray) -> np.ndarray:
    """``h^q`` for a single flattened sub-trajectory."""
    h, _ = model.encode_numpy(np.asarray(window, dtype=np.float64).reshape(1, -1))
    return h[0]


# -- temporal contrast ------------------------------------------------------------------

def sample_positive_pair(length: int, strategy: str, rng: np.random.Generator, h0: int = 3,
                         t_j: Optional[int] = None) -> Tuple[int, int]:
    """Two distinct window end-times from one episode of ``length`` steps.

    Valid times are ``1 .. length-1`` (every window holds at least one real
    pair).  ``Fixed±N`` puts the partner exactly ``N`` away (random side,
    flipped if it would leave the episode); ``Random±N`` draws it uniformly
    within ``N``; ``Random±T`` draws it uniformly over the whole episode.
    """
    strategy = canonical_sampler(strategy)
    if length < 2 * h0:
        raise ValueError(f"episode of length {length} is shorter than 2*H0 = {2 * h0}")
    lo, hi = 1, length - 1
    if strategy.startswith("Fixed"):
        n = int(strategy.split("±")[1])
        if hi - lo < n:
            raise ValueError(f"episode of length {length} too short for {strategy}")
        while True:
            tj = int(rng.integers(lo, hi + 1)) if t_j is None else int(t_j)
            sign = 1 if rng.random() < 0.5 else -1
            for tk in (tj + sign * n, tj - sign * n):
                if lo <= tk <= hi:
                    return tj, tk
            if t_j is not None:
                raise ValueError(f"no partner at distance {n} from t={t_j}")
    tj = int(rng.integers(lo, hi + 1)) if t_j is None else int(t_j)
    if strategy == "Random±T":
        a, b = lo, hi
    else:
        n = int(strategy.split("±")[1])
        a, b = max(lo, tj - n), min(hi, tj + n)
    tk = int(rng.integers(a, b))  # one fewer slot; skip over t_j
    if tk >= tj:
        tk += 1
    return tj, tk


def contrastive_from_embeddings(h: Tensor, alpha: float = 1.0, include_positive: bool = True) -> Tensor:
    """Literal group loss with rows 0 and 1 as the positive pair.

    ``-log(sim(h_0, h_1) / sum_{i != i'} sim(h_i, h_i'))`` with the sum over
    all ordered distinct pairs; ``include_positive=False`` drops both orders
    of the positive pair from the denominator.
    """
    n = h.shape[0]
    if n < 3:
        raise ValueError(f"contrastive group needs at least 3 members, got {n}")
    S = ad.sim_matrix(h, h, alpha)
    mask = 1.0 - np.eye(n)
    if not include_positive:
        mask[0, 1] = mask[1, 0] = 0.0
    denom = (S * Tensor(mask)).sum()
    return ad.log(denom) - ad.log(S[0:1, 1:2])


def dynamics_contrastive_loss(model: DynamicsModel, windows: np.ndarray, group_size: int,
                              alpha: float = 1.0, include_positive: bool = True,
                              use_vq: Optional[bool] = None) -> Tensor:
    """Mean group loss over consecutive groups of ``group_size`` windows (positive pair first)."""
    if len(windows) % group_size:
        raise ValueError(f"{len(windows)} windows do not split into groups of {group_size}")
    h, *_ = model.encode(windows, use_vq)
    return grouped_contrastive(h, group_size, alpha, include_positive)


def grouped_contrastive(h: Tensor, group_size: int, alpha: float = 1.0, include_positive: bool = True) -> Tensor:
    n_groups = h.shape[0] // group_size
    losses = [contrastive_from_embeddings(h[g * group_size:(g + 1) * group_size], alpha, include_positive)
              for g in range(n_groups)]
    total = losses[0]
    for l in losses[1:]:
        total = total + l
    return total * (1.0 / n_groups)


def reconstruction_from_codes(model: DynamicsModel, h: Tensor, pair_s: np.ndarray, pair_a: np.ndarray,
                              pair_next: np.ndarray) -> Tensor:
    """Mean over windows and window positions of ``||a_i - psi_dec(s_i, s_{i+1}, h)||^2``."""
    n, h0 = pair_a.shape[:2]
    rows = np.repeat(np.arange(n), h0)
    hh = ad.take_rows(h, rows)
    pred = model.decode(pair_s.reshape(n * h0, -1), pair_next.reshape(n * h0, -1), hh)
    diff = Tensor(pair_a.reshape(n * h0, -1)) - pred
    return (diff * diff).sum(axis=1).mean()


def reconstruction_loss(model: DynamicsModel, states: np.ndarray, actions: np.ndarray, t: int,
                        use_vq: Optional[bool] = None) -> Tensor:
    """Reconstruction loss of ``tau_t`` within a single episode (``states`` must include ``s_t``)."""
    idx = window_index([t], model.config.h0)
    windows = build_windows(states, actions, idx)
    h, *_ = model.encode(windows, use_vq)
    return reconstruction_from_codes(model, h, states[idx], actions[idx], states[idx + 1])


# -- diagnostics ---------------------------------------------------------------------

def codebook_usage(idx: Iterable[int], n_codes: int) -> np.ndarray:
    return np.bincount(np.asarray(list(idx), dtype=np.int64), minlength=n_codes)


def usage_entropy(counts: np.ndarray) -> float:
    """Entropy (nats) of the code-usage distribution."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


def write_codebook_usage(path, rows: Sequence[Tuple[int, np.ndarray]]) -> None:
    """CSV with one row per ``(epoch, counts)``: ``epoch, code_0 .. code_{M-1}, entropy``."""
    rows = list(rows)
    n_codes = len(rows[0][1]) if rows else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch"] + [f"code_{j}" for j in range(n_codes)] + ["entropy"])
        for epoch, counts in rows:
            w.writerow([int(epoch)] + [int(c) for c in counts] + [f"{usage_entropy(counts):.6f}"])


def max_entropy(n_codes: int) -> float:
    return math.log(n_codes)
