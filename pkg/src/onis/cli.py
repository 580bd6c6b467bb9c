"""Command-line entry point: ``onis {gen-data,train,eval,ablate,dump-embeddings}``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import List, Optional, Sequence

import numpy as np

from .config import ConfigError, RunConfig, load_config, save_config
from .dataset import generate_dataset, load_dataset, save_dataset
from .deploy import run_benchmark
from .multimodal import build_encoders, dump_embeddings
from .pipeline import TRAIN_MODES, load_model, save_model, train
from .reporting import write_csv, write_json
from .studies import STUDIES, run_study
from .transfer import write_training_log

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
METHOD_NAMES = {"s-onis": "S-OnIS", "u-onis": "U-OnIS", "flat-bc": "Flat-BC"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="onis", description="Desk-scale one-shot imitation under non-stationary dynamics.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON run config (defaults for anything missing)")
        sp.add_argument("--quiet", action="store_true")

    g = sub.add_parser("gen-data", help="generate the offline dataset")
    common(g)
    g.add_argument("--out", required=True, help="dataset path (.jsonl or .npz)")

    t = sub.add_parser("train", help="train a model bundle")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--mode", choices=TRAIN_MODES, default="s-onis")
    t.add_argument("--out", required=True, help="bundle directory")

    e = sub.add_parser("eval", help="evaluate one or more bundles on the benchmark suite")
    common(e)
    e.add_argument("--bundle", action="append", required=True,
                   help="bundle directory, optionally NAME=DIR; repeat for several methods")
    e.add_argument("--data", help="dataset whose held-out tasks to use (default: the standard split)")
    e.add_argument("--out", required=True, help="report directory")
    e.add_argument("--jobs", type=int, default=1)
    e.add_argument("--episodes", action="store_true", help="also dump per-episode diagnostics (JSON lines)")

    a = sub.add_parser("ablate", help="train and evaluate every arm of an ablation study")
    common(a)
    a.add_argument("--data", required=True)
    a.add_argument("--study", required=True, help=f"one of: {', '.join(STUDIES)}")
    a.add_argument("--out", required=True)
    a.add_argument("--jobs", type=int, default=1)

    d = sub.add_parser("dump-embeddings", help="write video/instruction embeddings of a dataset as CSV")
    common(d)
    d.add_argument("--data", required=True)
    d.add_argument("--bundle", help="s-onis bundle whose prompt to apply to instruction embeddings")
    d.add_argument("--out", required=True)
    d.add_argument("--limit", type=int, default=20, help="number of episodes to dump")
    return p


def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg, flush=True)


def _resolved_path(out: str) -> str:
    """Where the resolved config lives for an output path (file or directory)."""
    if os.path.isdir(out) or not os.path.splitext(out)[1]:
        return os.path.join(out, "config.json")
    return os.path.splitext(out)[0] + ".config.json"


def _write_config(cfg: RunConfig, out: str) -> None:
    path = _resolved_path(out)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    save_config(cfg, path)


def _held_out(args, cfg: RunConfig):
    if getattr(args, "data", None):
        return load_dataset(args.data).eval_tasks
    return cfg.dataset.tasks()[1]


def cmd_gen_data(args, cfg: RunConfig) -> int:
    ds = generate_dataset(cfg.seed, cfg.dataset, cfg.env)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    checksum = save_dataset(ds, args.out)
    _write_config(cfg, args.out)
    print(f"{len(ds)} trajectories, {len(ds.annotated)} annotated")
    print(f"checksum {checksum}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    ds = load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "stages.log"), "w") as stage_fh:
        def stage(name):
            stage_fh.write(name + "\n")
            stage_fh.flush()
            _say(args, f"stage done: {name}")

        def step(row):
            if row["step"] % 1000 == 0:
                _say(args, f"  step {row['step']}: bc={row['loss_bc']:.4f} con={row['loss_con']:.4f} "
                           f"rec={row['loss_rec']:.4f}")

        out = train(ds, cfg, args.mode, progress=stage, transfer_progress=step)
    if out.transfer_log:
        write_training_log(os.path.join(args.out, "transfer_log.csv"), out.transfer_log)
    checksum = save_model(out.model, cfg, args.out)
    _write_config(cfg, args.out)
    print(f"trained {args.mode} bundle, parameter checksum {checksum}")
    return EXIT_OK


def _episode_lines(episodes) -> List[str]:
    lines = []
    for (K, level, modality, method, seed), eps in episodes:
        for i, e in enumerate(eps):
            rec = {"K": K, "level": level, "modality": modality, "method": method, "seed": seed, "episode": i}
            rec.update(e.to_record())
            lines.append(json.dumps(rec, sort_keys=True))
    return lines


def cmd_eval(args, cfg: RunConfig) -> int:
    methods = {}
    for spec in args.bundle:
        name, _, path = spec.rpartition("=")
        model, _ = load_model(path)
        mode = getattr(model, "mode", "flat-bc")
        methods[name or METHOD_NAMES.get(mode, mode)] = model
    os.makedirs(args.out, exist_ok=True)
    episodes = [] if args.episodes else None
    rows, _ = run_benchmark(methods, _held_out(args, cfg), cfg.eval, cfg.env, episodes, jobs=args.jobs)
    write_csv(os.path.join(args.out, "report.csv"), rows)
    write_json(os.path.join(args.out, "report.json"), rows, {"methods": sorted(methods)})
    if episodes is not None:
        with open(os.path.join(args.out, "episodes.jsonl"), "w") as fh:
            fh.write("\n".join(_episode_lines(episodes)) + "\n")
    _write_config(cfg, args.out)
    for r in rows:
        _say(args, f"K={r.K:<3} {r.level:<10} {r.modality:<8} {r.method:<20} success={r.success_rate:.3f} "
                   f"matching={r.matching_ratio:.3f} n={r.n}")
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    if args.study not in STUDIES:
        print(f"unknown study {args.study!r}; options: {', '.join(STUDIES)}", file=sys.stderr)
        return EXIT_CONFIG
    ds = load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    rows, outputs = run_study(args.study, ds, cfg, jobs=args.jobs, progress=lambda m: _say(args, m))
    for arm, out in outputs.items():
        if out.transfer_log:
            safe = "".join(c if c.isalnum() else "_" for c in arm).strip("_")
            write_training_log(os.path.join(args.out, f"transfer_log_{safe}.csv"), out.transfer_log)
    write_csv(os.path.join(args.out, "report.csv"), rows)
    write_json(os.path.join(args.out, "report.json"), rows, {"study": args.study, "arms": list(outputs)})
    _write_config(cfg, args.out)
    for r in rows:
        _say(args, f"{r.method:<20} K={r.K:<3} {r.level:<10} success={r.success_rate:.3f}")
    return EXIT_OK


def cmd_dump_embeddings(args, cfg: RunConfig) -> int:
    ds = load_dataset(args.data)
    enc = build_encoders(cfg.encoders, cfg.env)
    prompt_vec = np.zeros(8)
    if args.bundle:
        model, _ = load_model(args.bundle)
        if getattr(model, "prompt", None) is None:
            raise ValueError("dump-embeddings --bundle needs an s-onis bundle")
        prompt_vec = model.prompt.vector

    def rows():
        for i, traj in enumerate(ds.trajectories[:args.limit]):
            for t, z in enumerate(enc.encode_windows(traj.frames)):
                yield f"video:{i}", t, z
        for l, z in zip(range(4), enc.encode_instructions(prompt_vec, range(4))):
            yield f"instruction:{l}", 0, z

    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    n = dump_embeddings(args.out, rows())
    _write_config(cfg, args.out)
    print(f"wrote {n} embeddings to {args.out}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "dump-embeddings": cmd_dump_embeddings}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI; unrecognised ``--key.path=value`` arguments are config overrides."""
    parser = _parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    bad = [x for x in extra if not (x.startswith("--") and "=" in x and "." in x.split("=", 1)[0] or
                                    x.startswith("--seed="))]
    if bad:
        print(f"onis: error: unrecognized arguments: {' '.join(bad)}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, extra)
    except ConfigError as exc:
        print(f"onis: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"onis: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, RuntimeError, OSError, FloatingPointError) as exc:
        print(f"onis: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
