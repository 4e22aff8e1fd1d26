from .schedule import NoiseSchedule, build_schedule, forward_diffuse, posterior_mean
from .vae import Vae
from .unet import UNet
from .sampler import (
    apply_null_dropout,
    cfg_combine,
    diffusion_loss,
    predict_clean,
    sample,
)

__all__ = [
    "NoiseSchedule",
    "build_schedule",
    "forward_diffuse",
    "posterior_mean",
    "Vae",
    "UNet",
    "apply_null_dropout",
    "cfg_combine",
    "diffusion_loss",
    "predict_clean",
    "sample",
]
