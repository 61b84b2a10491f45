"""Desk-scale presets for the synthetic experiments.

The synthetic augmentation is Gaussian noise at ``sigma_aug`` on every view and
nothing else: flips and rotations would permute the quadrant factor.
"""

from __future__ import annotations

from .augment import ImageAugmentConfig
from .evaluation import ProbeConfig
from .losses import LossConfig, LossFamily
from .models import BranchTopology, EncoderSpec, ProjectorSpec
from .training import TrainRunConfig

SIGMA_AUG = 0.3
PROJECTOR = (512, 512, 128)
EPOCHS = 100
PROBE_EPOCHS = EPOCHS  # probes train as long as the encoder did


def synthetic_augment(sigma: float = SIGMA_AUG) -> ImageAugmentConfig:
    return ImageAugmentConfig(
        flip_prob=0.0,
        crop_prob=0.0,
        gaussian_noise_prob=1.0,
        gaussian_noise_std=sigma,
        rotation_prob=0.0,
        solarize_prob=0.0,
        color_jitter_prob=0.0,
    )


def loss_config(family: LossFamily | str = LossFamily.VICREG, **kw) -> LossConfig:
    return LossConfig(family=family, invariance_per_dim=True, **kw)


def run_config(topology: str = "trident", family: LossFamily | str = LossFamily.VICREG, seed: int = 0, epochs: int = EPOCHS, **kw) -> TrainRunConfig:
    aug = synthetic_augment()
    return TrainRunConfig(
        topology=BranchTopology.named(topology),
        loss=kw.pop("loss", None) or loss_config(family),
        encoder=EncoderSpec(seed=seed),
        projector=ProjectorSpec(PROJECTOR),
        primary_aug=aug,
        privileged_aug=aug,
        epochs=epochs,
        seed=seed,
        **kw,
    )


def probe_config(seed: int = 0, fraction: float = 1.0, epochs: int = PROBE_EPOCHS) -> ProbeConfig:
    return ProbeConfig(epochs=epochs, fraction=fraction, seed=seed, aug=synthetic_augment())
