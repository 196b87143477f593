"""A short walk through the quantizer: soft codes, hard codes, and diversity.

Run: python3 demos/01_quantizer_tour.py
"""

# %%
import numpy as np

from coqmem.quantizer import (
    Codebooks,
    QuantizerConfig,
    omega_c,
    quantize_hard,
    quantize_soft,
    reconstruct_hard,
)

rng = np.random.default_rng(0)
books = Codebooks.random(M=2, K=8, d=4, rng=rng)
print(books, f"-> {books.bits:.0f}-bit codes")

# %% [markdown]
# An embedding is cut into M segments. Each segment attends over its
# codebook with a sharpened softmax; the reconstruction is the weighted sum
# of codewords. Larger alpha pushes the weights toward a one-hot choice.

# %%
z = rng.standard_normal(8)
hard = quantize_hard(z, books)
target = reconstruct_hard(hard, books)
print("hard code:", hard)
for alpha in (1, 10, 100):
    p, z_hat = quantize_soft(z, books, QuantizerConfig(alpha))
    top = p.reshape(2, 8).max(axis=1)
    print(f"alpha={alpha:>3}: top weights {np.round(top, 3)}, "
          f"|soft - hard| = {np.linalg.norm(z_hat - target):.4f}")

# %% [markdown]
# Codeword diversity is the mean cosine between codewords of the same
# book. Random unit codewords sit near zero; collapsed books approach one.

# %%
print(f"random books:    omega_c = {omega_c(books):.4f}")
collapsed = Codebooks(books.weights[:, :1].repeat(8, axis=1) + 0.05 * rng.standard_normal((2, 8, 4)))
print(f"collapsed books: omega_c = {omega_c(collapsed):.4f}")
