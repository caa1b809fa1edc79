"""Shared test configs: a reduced model that trains in seconds on CPU."""

from echomil.model import ModelConfig
from echomil.training import TrainConfig


def toy_model_config(**overrides) -> ModelConfig:
    base = dict(
        num_frames=8,
        input_size=64,
        spatial_feature_dim=128,
        attention_hidden_dim=64,
        temporal_feature_dim=128,
        backbone_depth="toy",
    )
    base.update(overrides)
    return ModelConfig(**base)


def toy_train_config(**overrides) -> TrainConfig:
    base = dict(
        learning_rate=0.05,
        optimizer="sgd_momentum",
        batch_size=8,
        epochs=5,
        seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base)
