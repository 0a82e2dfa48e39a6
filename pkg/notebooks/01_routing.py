# %% [markdown]
# # Routing positions between a main and a side path
#
# A multi-path block sends each spatial position through exactly one MLP.
# The mask comes from a small score predictor and a target ratio.

# %%
import numpy as np

from mpacodec.engine import ParameterStore
from mpacodec.mpa import (Path, binarize_mask_infer, dense_aggregate, mpa_apply, ratio_decoder,
                          ratio_from_quality)

rng = np.random.default_rng(0)

# %% [markdown]
# The encoder ratio grows with quality; the decoder ratio is just `1 - alpha`.

# %%
for q in (1, 2, 4.5, 6, 8):
    print(f"q={q:<4} rho_enc={ratio_from_quality(q):.4f}")
print("alpha=3/7 -> rho_dec", ratio_decoder(3 / 7))

# %% [markdown]
# Top-k masks are nested: raising the ratio only ever adds positions.

# %%
scores = rng.normal(size=(6, 6))
prev = np.zeros((6, 6), bool)
for rho in np.linspace(0, 1, 6):
    m = binarize_mask_infer(scores, rho)
    assert (m >= prev).all()
    prev = m
    print(f"rho={rho:.1f} kept={m.sum():2d}")

# %% [markdown]
# Gather/scatter routing gives the same numbers as evaluating both paths
# everywhere and blending with the mask.

# %%
store = ParameterStore()
main = Path(store, "main", "inverted_bottleneck", 8, rng)
side = Path(store, "side", "bottleneck", 8, rng)
x = rng.normal(size=(1, 6, 6, 8)).astype(np.float32)
mask = binarize_mask_infer(scores[None, ..., None], 0.4)
sparse = mpa_apply(x, mask, main, side).data
print("positions through main:", main.evaluations, "through side:", side.evaluations)
dense = dense_aggregate(x, mask.astype(np.float32), main, side).data
print("max |sparse - dense| =", np.abs(sparse - dense).max())
print("params main/side:", main.param_count(), side.param_count())
