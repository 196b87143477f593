"""Codeword diversity under plain contrastive training, with and without the regularizer.

Run: python3 demos/03_degeneration.py   (about one minute)
"""

# %%
from coqmem.analysis import degeneration_experiment
from coqmem.synthetic import make_clusters
from coqmem.trainer import TrainConfig

data = make_clusters(seed=0)
cfg = TrainConfig(loss_mode="vanilla", epochs=12)

# %% [markdown]
# With gamma = 0 nothing keeps codewords apart, and their mean cosine
# climbs as training proceeds. A positive gamma holds it down.

# %%
res = degeneration_experiment(data.train, data.query, data.database, cfg, gammas=(0.1, 1.0))
for run in (res.baseline, *res.sweep):
    traj = " ".join(f"{row['omega_c']:.3f}" for row in run.trajectory[::3])
    print(f"{run.name:>10}: omega_c by epoch [{traj}]  final MAP {run.final_map:.4f}")
print("picked:", res.best.name)
res.write_csv("degeneration.csv")
print("trajectories written to degeneration.csv")
