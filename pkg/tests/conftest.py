"""Shared fixtures: the expensive trained-model run is session scoped so the
end-to-end criteria and the training examples reuse one training."""

import numpy as np
import pytest
import torch

from tightbox.dataset import SampleConfig
from tightbox.geometry import EdgeErrorModel
from tightbox.model import LossConfig
from tightbox.synth import synth_generate
from tightbox.training import TrainConfig, train

torch.set_num_threads(1)

# Error statistics measured on detector pre-labels: vertical edges sigma
# 0.08 of width, horizontal 0.14 of height, zero mean.
MEASURED_ERRORS = EdgeErrorModel(0.0, 0.08, 0.0, 0.14)

PATCH = 128

SAMPLE_CFG = SampleConfig(expand_ratio=0.15, error_model=MEASURED_ERRORS,
                          patch_size=PATCH)

# The desk-scale reference run: 2000 instances, 10 epochs. lr/batch are
# deliberately explicit (the defaults are tuned for larger budgets).
REFERENCE_CFG = TrainConfig(
    epochs=10, batch_size=16, learning_rate=1e-3, optimizer="adam", seed=0,
    sample=SAMPLE_CFG, loss=LossConfig(), backbone="tiny")

TRAIN_SEED = 11
EVAL_SEED = 99
IMAGE_SIZE = 144


def as_dataset(items, prefix=""):
    """(image, instance) pairs -> (instances, images dict), optionally re-keyed."""
    instances, images = [], {}
    for image, inst in items:
        if prefix:
            inst.image_id = prefix + inst.image_id
        images[inst.image_id] = image
        instances.append(inst)
    return instances, images


@pytest.fixture(scope="session")
def train_data():
    return as_dataset(synth_generate(2000, seed=TRAIN_SEED, image_size=IMAGE_SIZE))


@pytest.fixture(scope="session")
def heldout_data():
    return as_dataset(synth_generate(500, seed=EVAL_SEED, image_size=IMAGE_SIZE), prefix="ho_")


@pytest.fixture(scope="session")
def reference_run(train_data):
    """The trained reference model and its history."""
    instances, images = train_data
    net, history = train(instances, images, REFERENCE_CFG)
    return net, history


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
