import csv
import dataclasses
import json

import pytest

from onis.cli import main
from onis.config import ConfigError, RunConfig, apply_overrides, from_dict, load_config, save_config, to_dict
from onis.deploy import BenchmarkSuite

from conftest import TINY

CLI_CFG = dataclasses.replace(
    TINY,
    dataset=dataclasses.replace(TINY.dataset, m_grid=(0.0, 0.1), annotation_budget=8),
    eval=BenchmarkSuite(Ks=(1,), levels=("stationary",), modalities=("video", "language"), n_episodes=2,
                        seeds=(0,)),
)


def test_defaults_match_documented_values():
    cfg = RunConfig()
    assert cfg.dataset.episodes_per_cell * len(cfg.dataset.m_grid) * cfg.dataset.n_train_tasks == 3120
    assert cfg.dataset.annotation_budget == 24
    assert cfg.transfer.dynamics.h0 == 3 and cfg.transfer.dynamics.code_dim == 10
    assert cfg.transfer.sampler == "Random±T" and cfg.uskill.n_codes == 8


def test_roundtrip_and_unknown_keys(tmp_path):
    assert from_dict(to_dict(CLI_CFG)) == CLI_CFG
    save_config(CLI_CFG, tmp_path / "c.json")
    assert load_config(str(tmp_path / "c.json"), environ={}) == CLI_CFG
    with pytest.raises(ConfigError, match="bogus"):
        from_dict({"transfer": {"bogus": 1}})
    with pytest.raises(ConfigError):
        from_dict({"transfer": {"steps": "many"}})


def test_overrides():
    cfg = apply_overrides(RunConfig(), ["--transfer.steps=12", "transfer.sampler=Fixed±1",
                                        "--eval.Ks=[1,10]", "--transfer.dynamics.use_vq=false"])
    assert cfg.transfer.steps == 12 and cfg.transfer.sampler == "Fixed±1"
    assert cfg.eval.Ks == (1, 10) and cfg.transfer.dynamics.use_vq is False
    with pytest.raises(ConfigError, match="unknown config key"):
        apply_overrides(RunConfig(), ["--transfer.nope=1"])
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), ["transfer.steps"])


def test_seed_environment_variable():
    assert load_config(environ={"ONIS_SEED": "42"}).seed == 42
    with pytest.raises(ConfigError):
        load_config(environ={"ONIS_SEED": "x"})


def test_config_file_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(str(bad))
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.json"))


# -- CLI ------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    save_config(CLI_CFG, root / "cfg.json")
    assert main(["gen-data", "--config", str(root / "cfg.json"), "--out", str(root / "data.jsonl")]) == 0
    return root


def _args(workdir, *rest):
    return ["--config", str(workdir / "cfg.json"), "--quiet", *rest]


def test_gen_data_counts_and_checksum(workdir, capsys):
    out = workdir / "again.jsonl"
    assert main(["gen-data", "--config", str(workdir / "cfg.json"), "--out", str(out)]) == 0
    printed = capsys.readouterr().out.splitlines()
    assert printed[0] == "32 trajectories, 8 annotated"
    assert main(["gen-data", "--config", str(workdir / "cfg.json"), "--out", str(workdir / "third.jsonl")]) == 0
    assert capsys.readouterr().out.splitlines()[1] == printed[1]
    assert (workdir / "again.config.json").exists()


@pytest.fixture(scope="module")
def s_bundle(workdir):
    out = workdir / "s"
    assert main(["train", *_args(workdir, "--data", str(workdir / "data.jsonl"), "--mode", "s-onis",
                                 "--out", str(out))]) == 0
    return out


def test_train_writes_bundle_logs_and_stage_order(s_bundle):
    assert (s_bundle / "stages.log").read_text().split() == ["skill-encoder", "skill-cache", "skill-decoder",
                                                             "transfer"]
    for name in ("bundle.json", "params.json", "config.json", "transfer_log.csv"):
        assert (s_bundle / name).exists()
    header = (s_bundle / "transfer_log.csv").read_text().splitlines()[0]
    assert header == "step,loss_bc,loss_con,loss_rec,codebook_usage_entropy"


def test_eval_report_and_bit_exact_rerun(workdir, s_bundle):
    first = workdir / "eval1"
    assert main(["eval", *_args(workdir, "--bundle", f"mine={s_bundle}", "--data", str(workdir / "data.jsonl"),
                                "--out", str(first), "--episodes")]) == 0
    with open(first / "report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["method"] for r in rows] == ["mine", "mine"]
    assert {r["modality"] for r in rows} == {"video", "language"}
    assert len((first / "episodes.jsonl").read_text().splitlines()) == 4
    second = workdir / "eval2"
    assert main(["eval", "--config", str(first / "config.json"), "--quiet", "--bundle", f"mine={s_bundle}",
                 "--data", str(workdir / "data.jsonl"), "--out", str(second)]) == 0
    assert (first / "report.csv").read_bytes() == (second / "report.csv").read_bytes()


def test_u_onis_trains_without_annotation(workdir, tmp_path):
    data = tmp_path / "noanno.jsonl"
    assert main(["gen-data", *_args(workdir, "--out", str(data), "--dataset.annotation_budget=0")]) == 0
    assert main(["train", *_args(workdir, "--data", str(data), "--mode", "s-onis", "--out",
                                 str(tmp_path / "s"))]) == 3
    assert main(["train", *_args(workdir, "--data", str(data), "--mode", "u-onis", "--out",
                                 str(tmp_path / "u"))]) == 0
    assert (tmp_path / "u" / "stages.log").read_text().split() == ["skill-encoder", "skill-cache", "transfer"]
    meta = json.loads((tmp_path / "u" / "bundle.json").read_text())
    assert meta["mode"] == "u-onis"


def test_flat_bc_train_and_eval(workdir, tmp_path):
    assert main(["train", *_args(workdir, "--data", str(workdir / "data.jsonl"), "--mode", "flat-bc", "--out",
                                 str(tmp_path / "bc"))]) == 0
    assert main(["eval", *_args(workdir, "--bundle", str(tmp_path / "bc"), "--out", str(tmp_path / "ev"))]) == 0
    with open(tmp_path / "ev" / "report.csv") as fh:
        assert {r["method"] for r in csv.DictReader(fh)} == {"Flat-BC"}


def test_ablate_temporal_rows(workdir, tmp_path):
    out = tmp_path / "abl"
    assert main(["ablate", *_args(workdir, "--data", str(workdir / "data.jsonl"), "--study", "temporal",
                                  "--out", str(out), "--eval.modalities=[\"language\"]")]) == 0
    with open(out / "report.csv") as fh:
        methods = [r["method"] for r in csv.DictReader(fh)]
    assert methods == ["Fixed±1", "Fixed±10", "Random±10", "Random±T"]
    assert json.loads((out / "config.json").read_text())["eval"]["modalities"] == ["language"]


def test_ablate_unknown_study_lists_options(workdir, capsys):
    assert main(["ablate", *_args(workdir, "--data", str(workdir / "data.jsonl"), "--study", "vibes",
                                  "--out", "unused")]) == 2
    assert "contrast-vq, temporal, annotation" in capsys.readouterr().err


def test_dump_embeddings(workdir, s_bundle):
    out = workdir / "emb.csv"
    assert main(["dump-embeddings", *_args(workdir, "--data", str(workdir / "data.jsonl"), "--bundle",
                                           str(s_bundle), "--out", str(out), "--limit", "2")]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("tag,t,z0") and lines[-1].startswith("instruction:3")


@pytest.mark.parametrize("argv, code", [
    ([], 2),
    (["train", "--data", "x"], 2),
    (["gen-data", "--out", "x.jsonl", "--transfer.nope=1"], 2),
    (["gen-data", "--out", "x.jsonl", "--frobnicate"], 2),
    (["eval", "--bundle", "/nonexistent/bundle", "--out", "/tmp/unused-onis-eval"], 3),
    (["train", "--data", "/nonexistent/data.jsonl", "--out", "/tmp/unused-onis-train"], 3),
])
def test_exit_codes(argv, code, capsys):
    assert main(argv) == code


def test_resolved_config_records_seed_override(workdir, monkeypatch):
    monkeypatch.setenv("ONIS_SEED", "7")
    out = workdir / "seeded.jsonl"
    assert main(["gen-data", *_args(workdir, "--out", str(out))]) == 0
    assert json.loads((workdir / "seeded.config.json").read_text())["seed"] == 7
