import numpy as np
import pytest
import torch

from stormadapt.config import DataConfig, ExperimentConfig, ModelConfig, TrainConfig
from stormadapt.detcore import DomainAdaptiveDetector, build_model
from stormadapt.toyscenes import SceneSpec, build_triplet, gen_scene, synthesize_splits
from stormadapt.weathergen import Weather


@pytest.fixture
def tiny_spec():
    """48 px scenes with one to three objects."""
    return SceneSpec(width=48, height=48, object_count=(1, 3), object_size=(10, 20))


@pytest.fixture
def clear_scene(tiny_spec):
    return gen_scene(np.random.default_rng(0), tiny_spec)


@pytest.fixture
def triplet(clear_scene):
    return build_triplet(clear_scene, Weather.FOG, seed=3, sample_id="t0")


@pytest.fixture
def triplets(tiny_spec):
    rng = np.random.default_rng(11)
    return [
        build_triplet(gen_scene(rng, tiny_spec), Weather.FOG, seed=i, sample_id=f"s{i}")
        for i in range(4)
    ]


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(
        backbone_channels=(8, 8, 16, 16),
        anchor_sizes=(12.0, 24.0),
        rpn_pre_nms_top_n=100,
        rpn_post_nms_top_n=16,
        rpn_test_post_nms_top_n=16,
        rpn_batch_size=32,
        roi_hidden=32,
        roi_batch_size=16,
        img_head_hidden=16,
        obj_head_hidden=16,
        da_proposals=4,
    )


@pytest.fixture
def make_experiment(tiny_model_cfg, tmp_path):
    """Factory for small experiment configs: ``make_experiment("full", gamma=0.0)``."""

    def make(preset="full", **train_overrides):
        train = dict(
            preset=preset, iters_stage1=2, iters_stage2=1, checkpoint_every=0, log_every=0,
        )
        train.update(train_overrides)
        return ExperimentConfig(
            data=DataConfig(root=str(tmp_path / "data"), width=48, height=48),
            model=tiny_model_cfg,
            train=TrainConfig(**train),
        )

    return make


@pytest.fixture
def make_model():
    def make(cfg, seed=0):
        torch.manual_seed(seed)
        return build_model(cfg)

    return make


@pytest.fixture
def tiny_model(make_experiment, make_model) -> DomainAdaptiveDetector:
    return make_model(make_experiment("full"))


@pytest.fixture
def dataset_dir(tmp_path, tiny_spec):
    """A synthesized dataset with 4 training and 2 validation triplets."""
    root = tmp_path / "data"
    synthesize_splits(root, n_train=4, n_val=2, scene_spec=tiny_spec, seed=0)
    return root


@pytest.fixture
def double_model(make_experiment):
    def make(preset="full", **overrides):
        cfg = make_experiment(preset, **overrides)
        torch.manual_seed(0)
        return build_model(cfg).double(), cfg

    return make
