"""midflow: frame interpolation via diffusion-generated bi-directional flows.

A small numpy autodiff core (`tensor`, `nn`, `optim`, `rng`), optical-flow
operators (`flow`), a DDPM-style diffusion toolbox (`diffusion`), the
flow-generating U-Net (`motion_model`), the recurrent synthesis network
(`synthesis`), perceptual losses and image metrics (`losses`), a synthetic
moving-shapes dataset (`dataset`), checkpointing (`checkpoint`), the
two-stage training pipeline (`training`), and a CLI (`cli`).
"""

from . import tensor  # noqa: F401

__version__ = "0.1.0"
