# %% [markdown]
# # Segment ellipses and look at attention
#
# Fits the UNETR-style decoder on 16 synthetic ellipse images, scores it
# with Dice/IoU/HD95 and draws class-token attention rollout for one image.

# %%
import tempfile
from pathlib import Path

import numpy as np

from sscxr.data import load_samples, synth_dataset
from sscxr.heatmap import class_token_heatmap, contour_overlay, overlay, save_rgb
from sscxr.metrics import segmentation_report
from sscxr.segment import SegDecoderConfig, SegFinetuneConfig, binarize, build_segmenter, finetune_seg, seg_forward
from sscxr.segment import stage_schedule
from sscxr.vit import EncoderConfig

OUT = Path(__file__).with_name("out")
OUT.mkdir(exist_ok=True)
work = Path(tempfile.mkdtemp())
enc = EncoderConfig(image_size=64, patch_size=8, embed_dim=64, depth=4, num_heads=4)
seg_cfg = SegDecoderConfig(tap_layers=(1, 2, 3, 4), feature_size=16)

# %% [markdown]
# The decoder schedule: each stage's resolution and width.

# %%
for stage in stage_schedule(enc, seg_cfg):
    print(stage)

# %%
samples = load_samples(synth_dataset("seg-shapes", 16, work / "shapes", seed=0), 64)
result = finetune_seg(samples, build_segmenter(enc, seg_cfg, seed=0),
                      SegFinetuneConfig(epochs=500, stop_at_train_dice=0.95))
print(f"{len(result.loss_history)} steps, train Dice {result.dice_history[-1]:.4f}")

# %%
images = np.stack([s.pixels for s in samples])
preds = binarize(seg_forward(result.model, images))
print(segmentation_report(preds, [s.mask for s in samples], cohort="train").to_json())
save_rgb(contour_overlay(images[0], preds[0], samples[0].mask), OUT / "segmentation_overlay.png")

# %% [markdown]
# Attention rollout of the fine-tuned encoder for the first image.

# %%
heat = class_token_heatmap(result.model.encoder, images[0])
save_rgb(overlay(images[0], heat), OUT / "rollout.png")
print("wrote", OUT / "segmentation_overlay.png", "and", OUT / "rollout.png")
