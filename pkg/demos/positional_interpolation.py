"""
Moving a patch transformer to a larger input resolution
=======================================================

A 224-pixel, patch-14 tower has a 16x16 grid plus a class row: 257
positions. At 336 pixels the grid is 24x24, so the table is resampled.
"""

import numpy as np

from twostage_clip import encoders as E

rng = np.random.default_rng(0)
table = rng.normal(size=(16 * 16 + 1, 8))
bigger = E.interpolate_positional_embeddings(table, 24)
print(table.shape, "->", bigger.shape)
print("class row kept:", np.array_equal(table[0], bigger[0]))

###############################################################################
# Loading a checkpoint at the new resolution resamples the table on the fly.

import tempfile
from pathlib import Path

from twostage_clip.checkpoint import save_bundle

small = E.default_image_config(patch_size=14, resolution=224, layers=1, width=16, heads=2)
large = E.default_image_config(patch_size=14, resolution=336, layers=1, width=16, heads=2)
text = E.default_text_config(layers=1, width=16, heads=2)
with tempfile.TemporaryDirectory() as tmp:
    save_bundle(Path(tmp) / "ck", E.init_model(small, text, seed=0))
    model = E.init_model(large, text, seed=1, checkpoint=Path(tmp) / "ck")
print("positional rows after load:", model["image.positional_embedding"].shape[0])
