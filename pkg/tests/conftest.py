import numpy as np
import pytest
import torch

from weakshot.model import ModelConfig, SegModel
from weakshot.synthdata import GenerationConfig, generate_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def default_corpus(tmp_path_factory):
    """The full default corpus (12 classes, 3:1 split, 500/100, seed 0)."""
    root = tmp_path_factory.mktemp("corpus_default")
    return generate_dataset(GenerationConfig(), seed=0, root=str(root))


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """A small, fast corpus for training-path tests."""
    root = tmp_path_factory.mktemp("corpus_tiny")
    cfg = GenerationConfig(image_size=32, num_classes=6, num_background=2,
                           train_samples=40, test_samples=8,
                           shapes_min=1, shapes_max=2, min_pair_images=0)
    return generate_dataset(cfg, seed=0, root=str(root))


def tiny_model_config(num_classes=2, **overrides) -> ModelConfig:
    cfg = ModelConfig(embed_dim=8, num_queries=2, num_classes=num_classes,
                      backbone_channels=(4, 8, 8), decoder_layers=1,
                      decoder_heads=2, decoder_ffn_dim=16,
                      simnet_hidden=8, simnet_layers=3)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


def tiny_model(seed=0, dtype=torch.float64, **overrides) -> SegModel:
    torch.manual_seed(seed)
    return SegModel(tiny_model_config(**overrides)).to(dtype)
