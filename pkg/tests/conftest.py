import logging

import numpy as np
import pytest

from conmatformer.data import write_synthetic_blobs

logging.getLogger("conmatformer").setLevel(logging.WARNING)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def blob_root(tmp_path_factory):
    """Four-class colour-blob dataset, 10 images per class at 32x32."""
    root = tmp_path_factory.mktemp("blobs")
    write_synthetic_blobs(root, per_class=10, size=32, seed=0)
    return root
