import numpy as np
import pytest
import torch

from dualmodseg import ModalitySample, SegMask, Volume


def make_sample(sid="s0", shape=(8, 8, 8), seed=0, labeled=True, spacing=(1.0, 1.0, 1.0)):
    rng = np.random.default_rng(seed)
    vol_a = Volume(rng.random(shape), spacing)
    vol_b = Volume(rng.random(shape), spacing)
    mask = None
    if labeled:
        labels = (rng.random(shape) > 0.7).astype(np.int64)
        mask = SegMask(labels, num_classes=2)
    return ModalitySample(id=sid, vol_a=vol_a, vol_b=vol_b, mask=mask)


def make_samples(n, shape=(8, 8, 8), seed=0, labeled=True):
    return [make_sample(f"s{i}", shape, seed + i, labeled) for i in range(n)]


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)
