import os

# Deterministic, and faster at these sizes than threaded BLAS.
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np
import pytest

from hfmca import data, network, training


@pytest.fixture(scope="session")
def desk_ingredients():
    """Shared desk-scale setup: spec, datasets and protocol (untrained)."""
    spec = network.desk_network_spec(views=4, final_pool=6)
    train_set = data.generate_synthetic(256, 4, (12, 12), seed=training.derive_seed(0, 5))
    test_set = data.generate_synthetic(64, 4, (12, 12), seed=training.derive_seed(0, 6))
    protocol = data.AugmentProtocol(0.5, 0.3, 0.1, seed=training.derive_seed(0, training.STREAM_AUG))
    return spec, train_set, test_set, protocol


@pytest.fixture(scope="session")
def desk_run(desk_ingredients):
    """The canonical desk-scale self-supervised run (2000 steps); shared by
    the acceptance criteria that inspect the same trained model."""
    spec, train_set, test_set, protocol = desk_ingredients
    net = network.build_network(spec, training.substream(0, training.STREAM_INIT))
    cfg = training.TrainConfig(
        mode="self_supervised", views=4, steps=2000, batch_size=32, seed=0
    )
    trainer = training.Trainer(net, train_set, cfg, protocol)
    trainer.run(2000)
    return trainer, train_set, test_set, protocol
