import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from rangeseg.toy_data import make_toy_dataset  # noqa: E402


@pytest.fixture(scope="session")
def small_toy_dataset(tmp_path_factory):
    """8 train / 2 val / 2 test scans, 4 classes; shared across tests."""
    root = tmp_path_factory.mktemp("toy_small")
    return make_toy_dataset(root, n_scans=8, n_classes=4, seed=7,
                            val_scans=2, test_scans=2)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def random_cloud(rng, n, labels=False, num_classes=4):
    from rangeseg.scan_io import PointCloud
    xyz = rng.uniform(-40.0, 40.0, (n, 3)).astype(np.float32)
    xyz[:, 2] = rng.uniform(-4.0, 4.0, n)
    remission = rng.uniform(0.0, 1.0, n).astype(np.float32)
    lab = rng.integers(0, num_classes, n).astype(np.int32) if labels else None
    return PointCloud(xyz, remission, lab)
