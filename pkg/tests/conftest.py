import pytest

from maskground.synthgen import SceneConfig, generate_dataset
from maskground.training import TrainConfig

TINY_TRAIN = dict(steps=10, batch_size=4, partition_size=4, learning_rate=0.02,
                  warmup_steps=0, num_proposals=8, embed_dim=32, num_blocks=2,
                  fused_dim=32, log_every=5, val_every=5, checkpoint_every=0,
                  seed=0)


def tiny_train_config(**overrides) -> TrainConfig:
    merged = {**TINY_TRAIN, **overrides}
    return TrainConfig(**merged)


@pytest.fixture(scope="session")
def scene_dataset_dir(tmp_path_factory):
    """A small deterministic shapes dataset shared across training tests."""
    root = tmp_path_factory.mktemp("shapes") / "train"
    generate_dataset(SceneConfig(seed=123, objects_per_scene=(1, 2)), 32, root)
    return root


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory, scene_dataset_dir):
    """A freshly initialized (untrained) checkpoint for contract tests."""
    from maskground.data import load_dataset
    from maskground.text import collect_caption_vocabulary
    from maskground.training import Trainer

    ds = load_dataset(scene_dataset_dir)
    vocab = collect_caption_vocabulary(s.caption for s in ds if s.caption)
    trainer = Trainer(tiny_train_config(), vocab)
    return trainer.save(tmp_path_factory.mktemp("ckpt") / "model.ckpt")
