"""Miniature end-to-end run: train both stages on a small synthetic dataset,
then interpolate a held-out pair. A desk-size version of the full protocol
(the real one lives in tests/test_acceptance.py and the CLI).

Run from the repo root:  python3 demos/05_end_to_end.py   (~2 minutes)
"""

import os

import numpy as np
from PIL import Image

from midflow import training as TR
from midflow.dataset import SceneDistribution, load_triplet_folder, write_dataset
from midflow.losses import psnr

os.makedirs("demo_out", exist_ok=True)
data_dir = "demo_out/mini_ds"
if not os.path.isdir(data_dir):
    write_dataset(60, SceneDistribution(size=32, max_shapes=3), data_dir, seed=77)
dataset = TR.CachedDataset(load_triplet_folder(data_dir))

cfg = TR.TrainConfig(
    seed=3, crop_size=32, levels=2, synth_base_channels=16,
    motion=TR.MotionUNetConfig(base_channels=32, blocks_per_level=1),
    val_interval=100, val_samples=6,
    synthesis=TR.PhaseConfig(epochs=200, lr=2e-4, weight_decay=1e-4,
                             batch_size=8, ema_decay=0.99, steps_override=120),
    motion_phase=TR.PhaseConfig(epochs=500, lr=2e-4, weight_decay=1e-8,
                                batch_size=8, ema_decay=0.99, steps_override=200),
)

print("stage 1: synthesis network against oracle flows")
teacher = TR.OracleTeacher()
synth = TR.train_stage1_synthesis(dataset, teacher, cfg)
print("  best validation PSNR: %.2f dB" % synth.best_metric)

print("stage 2: flow-generating diffusion model against the frozen teacher")
motion = TR.train_stage2_motion(dataset, teacher, cfg)
print("  best validation flow EPE: %.3f px" % motion.best_metric)

# interpolate a validation sample from pure noise
_, val_idx = TR.split_train_val(len(dataset))
t = dataset.load(val_idx[0])
frame, flows = TR.interpolate(t.frame0, t.frame1, motion.checkpoint, synth.checkpoint,
                              num_steps=8, seed=1)
overlay = 0.5 * (t.frame0 + t.frame1)
print("interpolated PSNR %.2f dB vs overlay baseline %.2f dB"
      % (psnr(frame.transpose(1, 2, 0), t.frame_mid.transpose(1, 2, 0)),
         psnr(overlay.transpose(1, 2, 0), t.frame_mid.transpose(1, 2, 0))))
Image.fromarray((np.clip(frame, 0, 1).transpose(1, 2, 0) * 255).astype(np.uint8)).save(
    "demo_out/interpolated.png")
print("wrote demo_out/interpolated.png")
