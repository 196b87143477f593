"""How much do raw, soft-quantized and hard-quantized features move during training?

Run: python3 demos/04_feature_drift.py   (about 20 seconds)
"""

# %%
import numpy as np

from coqmem.analysis import DriftProbe, drift_comparison
from coqmem.synthetic import make_clusters
from coqmem.trainer import TrainConfig

data = make_clusters(seed=0)
probe = DriftProbe(data.query.vectors[:512], interval=100)
res = drift_comparison(data.train, TrainConfig(), probe)

# %% [markdown]
# Cached memory codes are only useful if the features they stand for do not
# move much between iterations. Soft reconstructions should drift less than
# raw embeddings once training settles.

# %%
its, orig = res.trajectory("original")
_, soft = res.trajectory("soft_quantized")
_, hard = res.trajectory("hard_quantized")
print(" iter   original      soft      hard")
for row in zip(its, orig, soft, hard):
    print("{:5d}  {:9.3e} {:9.3e} {:9.3e}".format(*row))
print(f"after warm-up (iteration {res.warmup_iteration}): soft < original in "
      f"{res.soft_below_original:.0%}, hard > soft in {res.hard_above_soft:.0%} of intervals")
print("early vs late original drift:", np.round([orig[0], orig[-1]], 4))
