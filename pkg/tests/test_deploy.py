import dataclasses

import numpy as np
import pytest

from onis.dataset import DEFAULT_M_GRID
from onis.deploy import (EVAL_M_RANGE, LEVEL_AMPLITUDE, NOISE_LEVELS, BenchmarkSuite, Demonstration,
                         EvalCondition, _History, corrupt_demo, env_rngs, episode_setup, evaluation_tasks,
                         flat_bc_baseline, flat_bc_imitate, make_demo, one_shot_imitate, run_benchmark, run_expert)
from onis.multimodal import retrieve
from onis.reporting import matching_ratio
from onis.world import FRAME_DIM, STATE_DIM, DynamicsConfig, EnvConfig, Renderer

ENV = EnvConfig()


@pytest.fixture(scope="module")
def video_demo():
    return make_demo((2, 0, 3), "video", ENV, np.random.default_rng(5))


def test_levels_are_monotone():
    assert [LEVEL_AMPLITUDE[k] for k in ("stationary", "low", "medium", "high")] == [0.0, 0.5, 1.0, 2.0]


def test_eval_condition_draws():
    rng = np.random.default_rng(0)
    stat = [EvalCondition("stationary").draw(rng) for _ in range(200)]
    assert all(d.b == 0.0 and abs(d.m) <= EVAL_M_RANGE for d in stat)
    assert max(abs(d.m) for d in stat) > 0.3
    seen = [EvalCondition("high", seen_m=True).draw(rng) for _ in range(50)]
    assert all(d.m in DEFAULT_M_GRID and d.b == 2.0 for d in seen)
    with pytest.raises(ValueError):
        EvalCondition("extreme")


def test_evaluation_tasks_prefixes_and_long_chains(small_dataset):
    held = small_dataset.eval_tasks
    k2 = evaluation_tasks(held, 2, 10)
    assert k2[:len(held)] == [t[:2] for t in held] and k2[len(held)] == held[0][:2]
    k10 = evaluation_tasks(held, 10, 5)
    for t in k10:
        assert len(t) == 10 and all(a != b for a, b in zip(t, t[1:]))


def test_language_demo_and_validation():
    d = make_demo((1, 2), "language", ENV, np.random.default_rng(0))
    assert d.payload == (1, 2) and d.stages is None
    with pytest.raises(ValueError):
        Demonstration("audio", (1,), (1,))
    with pytest.raises(ValueError):
        corrupt_demo(d, "gaussian", "low", np.random.default_rng(0))


def test_video_demo_is_a_successful_expert_rollout(video_demo):
    assert video_demo.payload.shape[1] == FRAME_DIM
    assert len(video_demo.stages) == len(video_demo.payload)
    assert [s for i, s in enumerate(video_demo.stages) if i == 0 or s != video_demo.stages[i - 1]] == [2, 0, 3]


def test_zero_level_corruption_is_identity(video_demo):
    assert corrupt_demo(video_demo, "jitter", None, np.random.default_rng(0)) is video_demo
    with pytest.raises(ValueError):
        corrupt_demo(video_demo, "blur", "low", np.random.default_rng(0))
    with pytest.raises(ValueError):
        corrupt_demo(video_demo, "gaussian", "extreme", np.random.default_rng(0))


def test_gaussian_noise_scale(video_demo):
    for level, sigma in NOISE_LEVELS["gaussian"].items():
        out = corrupt_demo(video_demo, "gaussian", level, np.random.default_rng(1))
        resid = out.payload - video_demo.payload
        assert np.std(resid) == pytest.approx(sigma, rel=0.05)


def test_jitter_is_bounded_affine(video_demo):
    v = video_demo.payload
    for level, u in NOISE_LEVELS["jitter"].items():
        out = corrupt_demo(video_demo, "jitter", level, np.random.default_rng(2)).payload
        assert np.all(np.abs(out - v) <= u * np.abs(v) + u + 1e-12)


def test_cutout_blocks_are_contiguous_and_nested(video_demo):
    masks = {}
    for level, width in NOISE_LEVELS["cutout"].items():
        out = corrupt_demo(video_demo, "cutout", level, np.random.default_rng(3)).payload
        zero = (out == 0.0) & (video_demo.payload != 0.0)
        for row in zero:
            cols = np.nonzero(row)[0]
            assert len(cols) <= width and (len(cols) == 0 or cols[-1] - cols[0] < width)
        masks[level] = zero
    assert np.all(masks["high"] | ~masks["medium"]) and np.all(masks["medium"] | ~masks["low"])


@pytest.mark.parametrize("noise", ["gaussian", "cutout", "jitter"])
def test_matching_ratio_degrades_monotonically_with_noise(encoders, prompt, small_dataset, noise):
    demos = [make_demo(t, "video", ENV, np.random.default_rng(i)) for i, t in enumerate(small_dataset.eval_tasks)]
    means = []
    for level in (None, "low", "medium", "high"):
        ratios = []
        for i, d in enumerate(demos):
            v = corrupt_demo(d, noise, level, np.random.default_rng(100 + i)).payload
            ratios.append(matching_ratio(retrieve(encoders, prompt, encoders.encode_windows(v)), d.stages))
        means.append(np.mean(ratios))
    assert all(a >= b - 1e-9 for a, b in zip(means, means[1:])), means


def test_expert_reference_succeeds_without_drift():
    demos = [make_demo(t, "language", ENV, None) for t in [(0,), (1, 3), (2, 0, 1, 3)]]
    dyn = [DynamicsConfig(m=0.0)] * 3
    res = run_expert(demos, dyn, ENV, env_rngs([(0, i) for i in range(3)]))
    assert all(r.success and r.score == 1.0 for r in res)
    assert all(r.step_matching == 1.0 for r in res)


def test_history_windows_have_no_lookahead():
    rng = np.random.default_rng(0)
    S, A = rng.standard_normal((12, 1, STATE_DIM)), rng.standard_normal((12, 1, 2))
    h = _History(1, 20)
    h.push_state(S[0])
    first = h.pair_window(3).reshape(3, -1)
    assert np.array_equal(first[:, :STATE_DIM], np.repeat(S[0], 3, axis=0))
    assert np.all(first[:, STATE_DIM:] == 0)
    windows = []
    for t in range(12):
        h.push_state(S[t])
        windows.append(h.pair_window(3))
        h.push_action(A[t])
    # the window at time t depends only on pairs t-3..t-1
    w = windows[7].reshape(3, -1)
    assert np.array_equal(w[:, :STATE_DIM], S[4:7, 0]) and np.array_equal(w[:, STATE_DIM:], A[4:7, 0])
    shifted = _History(1, 20)
    for t in range(4, 12):
        shifted.push_state(S[t])
        if t == 10:
            assert np.array_equal(shifted.pair_window(3), windows[10])
        shifted.push_action(A[t])


def test_deployment_keeps_parameters_frozen(s_output, small_dataset):
    bundle = s_output.model
    before = bundle.checksum()
    demos, dyn, keys = episode_setup(small_dataset.eval_tasks, 2, "high", "video", 3, 0, ENV)
    res = one_shot_imitate(bundle, demos, dyn, ENV, env_rngs(keys))
    assert bundle.checksum() == before
    for r in res:
        assert len(r.skill_pred) == len(r.stages) == r.steps == len(r.codes)
        assert 0.0 <= r.step_matching <= 1.0 and 0.0 <= r.demo_matching <= 1.0


def test_evaluation_is_deterministic(s_output, small_dataset):
    demos, dyn, keys = episode_setup(small_dataset.eval_tasks, 1, "low", "language", 4, 1, ENV)
    a = one_shot_imitate(s_output.model, demos, dyn, ENV, env_rngs(keys))
    b = one_shot_imitate(s_output.model, demos, dyn, ENV, env_rngs(keys))
    assert [r.to_record() for r in a] == [r.to_record() for r in b]


def test_unretrievable_demo_is_flagged_failure(s_output):
    bundle = dataclasses.replace(s_output.model, instructions=(0, 1, 2))
    demos = [Demonstration("language", (3,), (3,)), Demonstration("language", (1,), (1,))]
    res = one_shot_imitate(bundle, demos, [DynamicsConfig(m=0.0)] * 2, ENV, env_rngs([(0, 0), (0, 1)]))
    assert res[0].flagged and not res[0].success and res[0].score == 0.0
    assert not res[1].flagged


def test_empty_inputs():
    assert run_expert([], [], ENV, []) == []
    rows, runs = run_benchmark({}, [(0, 1, 2, 3)], BenchmarkSuite(n_episodes=0))
    assert rows == [] and runs == []


def test_benchmark_rows_and_parallel_agreement(s_output, small_dataset):
    suite = BenchmarkSuite(Ks=(1, 10), levels=("stationary", "high"), modalities=("language",), n_episodes=2,
                           seeds=(0, 1))
    rows, runs = run_benchmark({"s-onis": s_output.model}, small_dataset.eval_tasks, suite)
    assert [(r.K, r.level) for r in rows] == [(1, "stationary"), (1, "high"), (10, "stationary"), (10, "high")]
    assert all(r.n == 4 and r.seeds == [0, 1] for r in rows)
    rows2, _ = run_benchmark({"s-onis": s_output.model}, small_dataset.eval_tasks, suite, jobs=2)
    assert [r.as_record() for r in rows] == [r.as_record() for r in rows2]


def test_methods_face_identical_conditions(small_dataset):
    renderer = Renderer.from_config(ENV)
    a = episode_setup(small_dataset.eval_tasks, 2, "medium", "video", 3, 4, ENV, renderer=renderer)
    b = episode_setup(small_dataset.eval_tasks, 2, "medium", "video", 3, 4, ENV, renderer=renderer)
    assert all(np.array_equal(x.payload, y.payload) for x, y in zip(a[0], b[0]))
    assert a[1] == b[1] and a[2] == b[2]


def test_flat_bc_is_reproducible_and_runs(small_dataset, encoders, tiny_cfg):
    trajs = small_dataset.trajectories[::8]
    m1 = flat_bc_baseline(trajs, encoders, tiny_cfg.flat_bc, seed=2)
    m2 = flat_bc_baseline(trajs, encoders, tiny_cfg.flat_bc, seed=2)
    assert m1.checksum() == m2.checksum()
    demos, dyn, keys = episode_setup(small_dataset.eval_tasks, 1, "stationary", "video", 2, 0, ENV)
    res = flat_bc_imitate(m1, demos, dyn, ENV, env_rngs(keys))
    assert len(res) == 2 and all(r.steps > 0 for r in res)
