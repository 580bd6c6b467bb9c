# %% [markdown]
# # Training the framework and imitating a held-out task
#
# S-mode trains a prompt so that instruction embeddings retrieve subtasks from
# video clips, caches one skill per training step, fits the skill decoder that
# decides when a skill is done, and finally trains the policy jointly with the
# dynamics encoder.  A reduced config keeps the run to a couple of minutes.

# %%
import numpy as np

from onis.config import RunConfig
from onis.dataset import DatasetConfig, generate_dataset
from onis.deploy import BenchmarkSuite, episode_setup, env_rngs, make_demo, one_shot_imitate, run_benchmark
from onis.pipeline import train_s_onis
from onis.reporting import matching_ratio
from onis.skillseq import encode_sequence_S
from onis.transfer import TransferConfig

cfg = RunConfig(dataset=DatasetConfig(episodes_per_cell=1), transfer=TransferConfig(steps=2000))
ds = generate_dataset(cfg.seed, cfg.dataset, cfg.env)
out = train_s_onis(ds, cfg, progress=lambda stage: print("finished", stage))
bundle = out.model

# %% [markdown]
# ## Skill retrieval on an unseen task
# The retrieved per-step subtask ids match the hidden ground truth.

# %%
demo = make_demo(ds.eval_tasks[0], "video", cfg.env, np.random.default_rng(3))
seq = encode_sequence_S(bundle.encoders, bundle.prompt, demo.payload)
print("task", demo.task, "skills", seq.collapsed(3)[0], "matching", matching_ratio(seq.ids, demo.stages))

# %% [markdown]
# ## One-shot imitation
# Every condition is evaluated on identical demonstrations and drift draws.

# %%
suite = BenchmarkSuite(Ks=(1, 2), levels=("stationary", "high"), n_episodes=40, seeds=(0,))
rows, _ = run_benchmark({"S-OnIS": bundle}, ds.eval_tasks, suite, cfg.env)
for r in rows:
    print(f"K={r.K} {r.level:<10} success {r.success_rate:.2f} matching {r.matching_ratio:.2f}")

# %% [markdown]
# ## Looking inside one episode
# The predicted skill switches shortly after each subtask completes.

# %%
demos, dyn, keys = episode_setup(ds.eval_tasks, 2, "stationary", "video", 1, 0, cfg.env)
ep = one_shot_imitate(bundle, demos, dyn, cfg.env, env_rngs(keys))[0]
switch = np.nonzero(np.diff(ep.skill_pred))[0]
done = np.nonzero(np.diff(ep.stages))[0]
print("task", ep.task, "success", ep.success, "skill switches at", switch, "subtask changes at", done)
