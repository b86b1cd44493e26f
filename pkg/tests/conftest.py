import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def set_identity_1x1(conv):
    """Make a square 1x1 conv the identity map."""
    c = conv.in_c
    assert conv.out_c == c and conv.kernel == 1
    conv.weight.data = np.eye(c, dtype=conv.weight.dtype).reshape(c, c, 1, 1)
    if conv.bias is not None:
        conv.bias.data = np.zeros(c, dtype=conv.bias.dtype)


def zero_params(module):
    for p in module.parameters():
        p.data = np.zeros_like(p.data)
