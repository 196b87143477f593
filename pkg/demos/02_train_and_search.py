"""Train 16-bit codes on Gaussian clusters, then search with lookup tables.

Run: python3 demos/02_train_and_search.py   (about 15 seconds)
"""

# %%
import time

import numpy as np

from coqmem.retrieval import encode_database, evaluate, search_topn
from coqmem.synthetic import make_clusters
from coqmem.trainer import TrainConfig, train

data = make_clusters(n_clusters=10, dim=64, seed=0)
print(f"train {data.train.count}, query {data.query.count}, database {data.database.count}")

# %% [markdown]
# Defaults: 16 bits as two codebooks of 256 codewords, debiased contrastive
# loss, and a 384-slot code memory that joins the loss after epoch 5.

# %%
cfg = TrainConfig()
t0 = time.perf_counter()
res = train(data.train, cfg)
print(f"trained {len(res.log)} steps in {time.perf_counter() - t0:.1f}s; "
      f"final loss {res.log[-1]['loss']:.3f}, omega_c {res.log[-1]['omega_c']:.4f}")

# %%
index = encode_database(data.database.vectors, res.layer, res.books)
print("database codes:", index.codes.shape, index.codes.dtype)
hit = search_topn(index, res.layer, data.query.vectors[0], 5)
print("query 0 label", data.query.labels[0], "-> top-5 labels", data.database.labels[hit.ids])

# %% [markdown]
# Two MAP conventions: "standard" divides by min(n, |R_q|); "paper" divides
# by all relevant items, which caps MAP@100 near 100/500 on this data.

# %%
for conv in ("standard", "paper"):
    print(f"MAP@100 ({conv}): {evaluate(res.layer, res.books, data.query, data.database, 100, conv):.4f}")
