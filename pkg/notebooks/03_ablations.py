# %% [markdown]
# # Ablations of the transfer stage
#
# Arms share the skill encoder, cache and decoder and retrain only the policy
# and dynamics encoder.  This small version trains three arms and compares them
# under strong non-stationarity; the acceptance suite runs the full-size study.

# %%
import dataclasses

from onis.config import RunConfig
from onis.dataset import DatasetConfig, generate_dataset
from onis.deploy import BenchmarkSuite, run_benchmark
from onis.pipeline import retrain_transfer, train_s_onis
from onis.transfer import TransferConfig, ablation_config

cfg = RunConfig(dataset=DatasetConfig(episodes_per_cell=1), transfer=TransferConfig(steps=2000))
ds = generate_dataset(cfg.seed, cfg.dataset, cfg.env)
base = train_s_onis(ds, cfg)
arms = {
    "w/ Contra, w/ VQ": base.model,
    "wo/ Contra, w/ VQ": retrain_transfer(base, ds, cfg, ablation_config(cfg.transfer, "wo/ Contra, w/ VQ")).model,
    "Fixed±1": retrain_transfer(base, ds, cfg, dataclasses.replace(cfg.transfer, sampler="Fixed±1")).model,
}

# %%
suite = BenchmarkSuite(Ks=(2,), levels=("stationary", "high"), n_episodes=50, seeds=(0,))
rows, _ = run_benchmark(arms, ds.eval_tasks, suite, cfg.env)
for r in rows:
    print(f"{r.method:<20} {r.level:<10} success {r.success_rate:.2f}")
