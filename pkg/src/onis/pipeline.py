"""Staged training of the full system and bundle persistence.

Training runs in four phases: the skill encoder (prompt or U-mode heads),
caching one skill per training step, the skill decoder (S-mode), and the
joint transfer stage.  ``stage_log`` records the order for auditing.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import ParamSet
from .config import RunConfig, from_dict, to_dict
from .dataset import Dataset, Trajectory
from .deploy import FlatBC, ModelBundle, flat_bc_baseline
from .dynamics import DynamicsModel
from .multimodal import EMBED_DIM, FrozenEncoders, Prompt, build_encoders, train_prompt
from .skillseq import (SkillDecoder, USkillHeads, decoder_examples, encode_sequence_S, state_windows,
                       train_skill_decoder, train_uskills)
from .transfer import TransferConfig, TransferData, TransferPolicy, TransferResult, train_skill_transfer
from .world import N_OBJECTS

BUNDLE_FORMAT = "onis-bundle-v1"
TRAIN_MODES = ("s-onis", "u-onis", "flat-bc")


@dataclass
class TrainOutput:
    """A trained model plus the artefacts of its training run."""

    model: Union[ModelBundle, FlatBC]
    stage_log: List[str] = field(default_factory=list)
    transfer_log: List[dict] = field(default_factory=list)
    skill_ids: Optional[List[np.ndarray]] = None


def _note(stage_log: List[str], progress: Optional[Callable[[str], None]], name: str) -> None:
    stage_log.append(name)
    if progress is not None:
        progress(name)


def cache_skills_S(enc: FrozenEncoders, prompt: Prompt, trajectories: Sequence[Trajectory]) -> List[np.ndarray]:
    """Retrieved subtask id for every step of every trajectory."""
    out = []
    for t in trajectories:
        ids = encode_sequence_S(enc, prompt, t.frames).ids
        if len(ids) != len(t):
            raise RuntimeError(f"retrieval produced {len(ids)} ids for an episode of {len(t)} steps")
        out.append(ids)
    return out


def cache_skills_U(heads: USkillHeads, enc: FrozenEncoders, trajectories: Sequence[Trajectory]) -> List[np.ndarray]:
    """Code index of ``theta_l`` for every step, conditioned on each episode's own instruction."""
    out = []
    for t in trajectories:
        win = state_windows(t.states, np.arange(len(t)), heads.config.window)
        base = np.repeat(enc.base_embedding([t.episode_instruction]), len(t), axis=0)
        out.append(heads.code_index(base, win))
    return out


def code_stage_map(skill_ids: Sequence[np.ndarray], trajectories: Sequence[Trajectory], n_codes: int) -> np.ndarray:
    """Majority ground-truth subtask per code (``-1`` for unused codes); reporting only."""
    counts = np.zeros((n_codes, N_OBJECTS), dtype=np.int64)
    for ids, t in zip(skill_ids, trajectories):
        keep = t.stages >= 0
        np.add.at(counts, (np.asarray(ids)[keep], t.stages[keep]), 1)
    out = np.argmax(counts, axis=1)
    out[counts.sum(axis=1) == 0] = -1
    return out


def train_s_onis(dataset: Dataset, cfg: RunConfig, progress: Optional[Callable[[str], None]] = None,
                 transfer_progress=None) -> TrainOutput:
    """Prompt, skill caching, skill decoder, then joint transfer training."""
    stages: List[str] = []
    trajs = list(dataset.trajectories)
    if not any(t.annotated for t in trajs):
        raise ValueError("s-onis training needs subtask-annotated episodes (annotation budget is 0)")
    enc = build_encoders(cfg.encoders, cfg.env)
    prompt = train_prompt(enc, trajs, cfg.prompt, seed=cfg.seed)
    _note(stages, progress, "skill-encoder")
    instructions = tuple(range(N_OBJECTS))
    table = enc.encode_instructions(prompt.vector, instructions)
    ids = cache_skills_S(enc, prompt, trajs)
    _note(stages, progress, "skill-cache")
    decoder = SkillDecoder(cfg.decoder, np.random.default_rng([cfg.seed, 0xDE]))
    train_skill_decoder(decoder, *decoder_examples(trajs, ids, table), seed=cfg.seed)
    _note(stages, progress, "skill-decoder")
    result = train_skill_transfer(TransferData.from_trajectories(trajs, ids, table), cfg.transfer, seed=cfg.seed,
                                  progress=transfer_progress)
    _note(stages, progress, "transfer")
    bundle = ModelBundle("s-onis", enc, result.policy, result.model, decoder=decoder, prompt=prompt,
                         instructions=instructions, deploy=cfg.deploy)
    return TrainOutput(bundle, stages, result.log, ids)


def train_u_onis(dataset: Dataset, cfg: RunConfig, progress: Optional[Callable[[str], None]] = None,
                 transfer_progress=None) -> TrainOutput:
    """U-mode heads on episode-level instructions, then the same transfer stage (no annotation needed)."""
    stages: List[str] = []
    trajs = list(dataset.trajectories)
    enc = build_encoders(cfg.encoders, cfg.env)
    instructions = tuple(sorted({t.episode_instruction for t in trajs}))
    heads = USkillHeads(cfg.uskill, np.random.default_rng([cfg.seed, 0x0C]))
    train_uskills(heads, enc, trajs, instructions, seed=cfg.seed)
    heads.check_codebook()
    _note(stages, progress, "skill-encoder")
    ids = cache_skills_U(heads, enc, trajs)
    _note(stages, progress, "skill-cache")
    table = heads.codebook.data.copy()
    result = train_skill_transfer(TransferData.from_trajectories(trajs, ids, table), cfg.transfer, seed=cfg.seed,
                                  progress=transfer_progress)
    _note(stages, progress, "transfer")
    bundle = ModelBundle("u-onis", enc, result.policy, result.model, uheads=heads, instructions=instructions,
                         code_to_stage=code_stage_map(ids, trajs, cfg.uskill.n_codes), deploy=cfg.deploy)
    return TrainOutput(bundle, stages, result.log, ids)


def train_flat_bc(dataset: Dataset, cfg: RunConfig, progress: Optional[Callable[[str], None]] = None,
                  transfer_progress=None) -> TrainOutput:
    stages: List[str] = []
    enc = build_encoders(cfg.encoders, cfg.env)
    model = flat_bc_baseline(dataset.trajectories, enc, cfg.flat_bc, seed=cfg.seed)
    _note(stages, progress, "flat-bc")
    return TrainOutput(model, stages)


def train(dataset: Dataset, cfg: RunConfig, mode: str, progress=None, transfer_progress=None) -> TrainOutput:
    trainers = {"s-onis": train_s_onis, "u-onis": train_u_onis, "flat-bc": train_flat_bc}
    if mode not in trainers:
        raise ValueError(f"unknown training mode {mode!r}; expected one of {TRAIN_MODES}")
    return trainers[mode](dataset, cfg, progress, transfer_progress)


def continue_transfer(bundle: ModelBundle, dataset: Dataset, cfg: RunConfig, skill_ids: Sequence[np.ndarray],
                      seed: Optional[int] = None) -> TransferResult:
    """Resume the transfer stage from a bundle's current policy and dynamics model (in place)."""
    if bundle.mode == "s-onis":
        table = bundle.encoders.encode_instructions(bundle.prompt.vector, bundle.instructions)
    else:
        table = bundle.uheads.codebook.data.copy()
    data = TransferData.from_trajectories(list(dataset.trajectories), skill_ids, table)
    return train_skill_transfer(data, cfg.transfer, seed=cfg.seed if seed is None else seed,
                                policy=bundle.policy, model=bundle.dynamics)


def retrain_transfer(base: TrainOutput, dataset: Dataset, cfg: RunConfig, transfer: TransferConfig,
                     progress=None) -> TrainOutput:
    """Fresh transfer stage under ``transfer`` on top of ``base``'s skill encoder, cache and decoder.

    Ablation arms differ only in the transfer stage, so they share the rest.
    """
    bundle = base.model
    if not isinstance(bundle, ModelBundle) or base.skill_ids is None:
        raise ValueError("retraining the transfer stage needs an s-onis or u-onis training output")
    if bundle.mode == "s-onis":
        table = bundle.encoders.encode_instructions(bundle.prompt.vector, bundle.instructions)
    else:
        table = bundle.uheads.codebook.data.copy()
    data = TransferData.from_trajectories(list(dataset.trajectories), base.skill_ids, table)
    result = train_skill_transfer(data, transfer, seed=cfg.seed, progress=progress)
    arm = dataclasses.replace(bundle, policy=result.policy, dynamics=result.model)
    return TrainOutput(arm, base.stage_log[:-1] + ["transfer"], result.log, base.skill_ids)


# -- persistence ------------------------------------------------------------------------

def save_model(model: Union[ModelBundle, FlatBC], cfg: RunConfig, out_dir) -> str:
    """Write ``bundle.json`` (metadata + resolved config) and ``params.json``; returns the checksum."""
    os.makedirs(out_dir, exist_ok=True)
    if isinstance(model, FlatBC):
        meta = {"mode": "flat-bc"}
        params = model.params
    else:
        meta = {"mode": model.mode, "instructions": list(model.instructions),
                "code_to_stage": None if model.code_to_stage is None else [int(c) for c in model.code_to_stage]}
        params = model.all_params()
    meta.update(format=BUNDLE_FORMAT, config=to_dict(cfg), checksum=params.checksum(),
                encoder_checksum=model.encoders.checksum())
    params.save(os.path.join(out_dir, "params.json"))
    with open(os.path.join(out_dir, "bundle.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return meta["checksum"]


def _split(params: ParamSet, prefix: str) -> Optional[ParamSet]:
    names = [n for n in params.names() if n.startswith(prefix)]
    if not names:
        return None
    return ParamSet({n[len(prefix):]: params[n].data.copy() for n in names})


def load_model(out_dir) -> Tuple[Union[ModelBundle, FlatBC], RunConfig]:
    with open(os.path.join(out_dir, "bundle.json")) as fh:
        meta = json.load(fh)
    if meta.get("format") != BUNDLE_FORMAT:
        raise ValueError(f"bundle format mismatch: expected {BUNDLE_FORMAT!r}, got {meta.get('format')!r}")
    cfg = from_dict(meta["config"])
    params = ParamSet.load(os.path.join(out_dir, "params.json"))
    if params.checksum() != meta["checksum"]:
        raise ValueError("bundle parameters do not match the recorded checksum")
    enc = build_encoders(cfg.encoders, cfg.env)
    if enc.checksum() != meta["encoder_checksum"]:
        raise ValueError("rebuilt frozen encoders differ from the ones used in training")
    if meta["mode"] == "flat-bc":
        return FlatBC(enc, cfg.flat_bc, params=params), cfg
    t = cfg.transfer
    dyn_cfg = dataclasses.replace(t.dynamics, use_vq=t.use_vq)
    policy = TransferPolicy(hidden=t.hidden, layers=t.layers, code_dim=dyn_cfg.code_dim,
                            params=_split(params, "pi/"), skill_dim=EMBED_DIM)
    dynamics = DynamicsModel(dyn_cfg, params=_split(params, "psi/"))
    dec = _split(params, "dec/")
    prompt = _split(params, "prompt/")
    uheads = _split(params, "u/")
    bundle = ModelBundle(
        meta["mode"], enc, policy, dynamics,
        decoder=None if dec is None else SkillDecoder(cfg.decoder, params=dec),
        prompt=None if prompt is None else Prompt(prompt),
        uheads=None if uheads is None else USkillHeads(cfg.uskill, params=uheads),
        instructions=tuple(meta["instructions"]),
        code_to_stage=None if meta["code_to_stage"] is None else np.asarray(meta["code_to_stage"]),
        deploy=cfg.deploy)
    return bundle, cfg
