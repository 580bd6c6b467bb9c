# %% [markdown]
# # The point world and its offline dataset
#
# A 2-D agent visits four objects in a prescribed order.  Every action is
# shifted by a drift ``w_t`` that is constant (``b = 0``) in the training
# data and oscillates at test time.  Run with ``python3 notebooks/01_world_and_dataset.py``.

# %%
import numpy as np

from onis.dataset import DatasetConfig, generate_dataset
from onis.world import (DynamicsConfig, EnvConfig, TaskSpec, drift_sequence, env_step, evaluate_success,
                        expert_action, initial_drift, reset)

env = EnvConfig()

# %% [markdown]
# ## Drift
# With ``b = 0`` the drift equals its mean exactly; larger ``b`` adds a bounded oscillation.

# %%
z = np.random.default_rng(0).standard_normal(200)
for b in (0.0, 0.5, 1.0, 2.0):
    w = drift_sequence(DynamicsConfig(m=0.1, b=b), z)
    print(f"b={b:.1f}  mean {w.mean():+.3f}  range [{w.min():+.3f}, {w.max():+.3f}]")

# %% [markdown]
# ## One expert episode
# The scripted expert compensates the known drift mean and completes the task in order.

# %%
task = TaskSpec((2, 0, 3))
s = reset(task, env, np.random.default_rng(1))
drift = initial_drift(DynamicsConfig(m=0.2))
while not s.success and s.t < 600:
    s = env_step(s, expert_action(s, task, s.stage, 0.2, env), drift, env)
print("events", s.events, "steps", s.t, "score", evaluate_success(s, task))

# %% [markdown]
# ## Dataset
# One episode per (drift mean, training task) cell keeps this quick; the default config uses fifteen.

# %%
ds = generate_dataset(0, DatasetConfig(episodes_per_cell=1))
lengths = [len(t) for t in ds.trajectories]
print(f"{len(ds.trajectories)} episodes, {sum(t.annotated for t in ds.trajectories)} annotated, "
      f"length {min(lengths)}-{max(lengths)}, checksum {ds.checksum()[:12]}")
print("held-out tasks:", ds.eval_tasks)
