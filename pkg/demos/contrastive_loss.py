"""
Symmetric contrastive loss and the temperature bound
====================================================

The loss compares every image with every caption in the batch. Identical
rows give ln N; matched orthonormal pairs give almost nothing.
"""

import math

import numpy as np

from twostage_clip.contrastive import (BatchEmbeddings, clamp_temperature, contrastive_loss,
                                       gather_global_batch)
from twostage_clip.tensor import Tensor

scale = Tensor(math.log(1 / 0.07))

same = np.tile(np.eye(1, 8), (4, 1))
print("identical rows:", contrastive_loss(BatchEmbeddings(same, same), scale).item(),
      "ln 4 =", math.log(4))

pairs = np.eye(4, 8)
print("orthonormal pairs at temperature 100:",
      contrastive_loss(BatchEmbeddings(pairs, pairs), Tensor(math.log(100))).item())

###############################################################################
# The temperature never exceeds 100, however large the raw parameter gets.

for t in (50, 100, 120, 1e6):
    print(f"exp(scale)={t:g} -> {math.exp(clamp_temperature(math.log(t))):.6f}")

###############################################################################
# Four simulated workers each embed 8 pairs; gathering gives the 32-row loss.

rng = np.random.default_rng(0)
img = rng.normal(size=(32, 16))
txt = img + 0.3 * rng.normal(size=(32, 16))
img /= np.linalg.norm(img, axis=1, keepdims=True)
txt /= np.linalg.norm(txt, axis=1, keepdims=True)
shards = [BatchEmbeddings(img[i:i + 8], txt[i:i + 8]) for i in range(0, 32, 8)]
print("gathered:", contrastive_loss(gather_global_batch(shards), scale).item())
print("one batch:", contrastive_loss(BatchEmbeddings(img, txt), scale).item())
