# %% [markdown]
# # Two-stage training in miniature
#
# Stage 1 trains the whole codec; stage 2 clones it, adds a side path for one
# task and trains only that. The step counts here are tiny so the script runs
# in about a minute; the acceptance suite uses 20000 and 2000.

# %%
import tempfile
from pathlib import Path

import numpy as np

from mpacodec.data import synthetic_textures
from mpacodec.engine import no_grad
from mpacodec.training import TrainRun, train_stage1, train_stage2

work = Path(tempfile.mkdtemp())
base = work / "stage1.ckpt"

# %%
s1 = train_stage1(TrainRun(stage=1, steps=200, eval_every=50, output=str(base)),
                  progress=lambda step, row: print("stage1", row))

# %%
s2 = train_stage2(TrainRun(stage=2, task="mse", steps=100, eval_every=50, init=str(base)),
                  progress=lambda step, row: print("stage2", row))
print("frozen parameters unchanged:", s2.frozen_digest_before == s2.frozen_digest_after)
print(f"trainable share of the decoder: {s2.trainable}/{s2.decoder_total} = {s2.fraction:.3f}")

# %% [markdown]
# With alpha = 0 the new model decodes exactly like the stage-1 model.

# %%
held = synthetic_textures(16, 32, seed=12345)
with no_grad():
    yhat = s1.model.hyper_rates(s1.model.encode_analysis(held.images, 4)).yhat
    before = s1.model.decode_synthesis(yhat, 4).data
    after = s2.model.decode_synthesis(yhat, 4, alpha=0.0, task="mse").data
    side = s2.model.decode_synthesis(yhat, 4, alpha=1.0, task="mse").data
print("alpha=0 identical:", np.array_equal(before, after))
for name, rec in (("alpha=0", after), ("alpha=1", side)):
    print(name, "mse", float(np.mean((rec - held.images) ** 2)))
