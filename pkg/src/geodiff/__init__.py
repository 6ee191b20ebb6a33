"""geodiff: geometry-driven image editing on a small latent-diffusion engine.

The pieces, bottom to top:

- :mod:`geodiff.geometry` builds per-pixel edit fields from 2D/3D transforms
  and forward-splats signals and masks through them;
- :mod:`geodiff.diffnet` is a small hookable denoising UNet with a noise
  schedule and attention primitives;
- :mod:`geodiff.sampler` does DDIM stepping, inversion, and exact
  reconstruction by trajectory re-injection;
- :mod:`geodiff.guidance` warps reference attention queries by the edit
  field and blends reference/edit attention;
- :mod:`geodiff.losses` scores the edit and optimizes latents and the null
  embedding;
- :mod:`geodiff.pipeline` orchestrates whole edits, the naive-warp baseline,
  and the warp-error metric;
- :mod:`geodiff.service` exposes the pipeline over HTTP for the browser UI;
- :mod:`geodiff.cli` is the ``geodiff`` command.
"""

from .geometry import (
    CameraIntrinsics,
    EditField,
    EditTransform,
    build_field,
    build_field_2d,
    build_field_3d,
    mask_algebra,
    splat,
    transform_mask,
)
from .diffnet import (
    DenoiseUNet,
    ModelConfig,
    NoiseSchedule,
    attention,
    attention_map,
    cfg_eps,
    eps_theta,
    forward_noise,
    load_model,
    save_model,
)
from .sampler import Trajectory, ddim_step, invert, invert_ddim_step, reference_step
from .losses import LossWeights, adapt_remove_weight, lr_schedule
from .pipeline import EditConfig, naive_warp_baseline, run_edit, warp_error

__version__ = "0.1.0"
