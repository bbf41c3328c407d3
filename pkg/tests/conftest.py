"""Shared desk-scale fixtures and config factories."""

import pytest

from protoalign.data import SynthConfig, synth_generate
from protoalign.encoders import EncoderConfig
from protoalign.objectives import ObjectiveConfig
from protoalign.training import Stage1Config, Stage2Config, TrainConfig


def make_synth_pair(seed=0, **overrides):
    defaults = dict(
        n_base_classes=6,
        n_val_classes=2,
        n_novel_classes=2,
        examples_per_class=12,
        image_shape=(8, 8, 1),
        latent_dim=6,
        semantic_dim=24,
        descriptions_per_class=3,
        sigma_between=2.0,
        sigma_within=0.2,
        informativeness=0.9,
    )
    defaults.update(overrides)
    return synth_generate(SynthConfig(**defaults), seed=seed)


def make_mlp_config(seed=0, **overrides):
    """Tiny MLP-backed config that trains in well under a second."""
    cfg = TrainConfig(
        stage1=Stage1Config(epochs=3, batch_size=32, lr=0.05, decay_epochs=()),
        stage2=Stage2Config(
            epochs=5,
            tasks_per_batch=2,
            n_way=3,
            k_shot=1,
            q_per_class=5,
            objective=ObjectiveConfig(lambda_vs=2.5, tau_cls=10.0, tau_vs=0.1),
        ),
        encoder=EncoderConfig(
            architecture="mlp-tiny", input_shape=(8, 8, 1), mlp_hidden=24, output_dim=16
        ),
        seed=seed,
    )
    for key, value in overrides.items():
        section, _, name = key.partition(".")
        if name:
            setattr(getattr(cfg, section), name, value)
        else:
            setattr(cfg, section, value)
    return cfg


@pytest.fixture(scope="session")
def synth_pair():
    return make_synth_pair()
