import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from dpfine import nn


def _jitter_biases(model, rng):
    # keep pre-activations off exact relu kinks, where finite differences
    # and the subgradient legitimately disagree
    for layer in model.layers:
        for pname in ("bias", "shift"):
            if pname in layer.params:
                p = layer.params[pname]
                layer.params[pname] = p + rng.uniform(0.05, 0.3, p.shape)
    return model


def random_small_model(rng, max_params=500):
    """A random architecture mixing the supported layer kinds, <= max_params."""
    kind = rng.integers(0, 3)
    if kind == 0:
        f_in = int(rng.integers(3, 9))
        hidden = int(rng.integers(3, 8))
        classes = int(rng.integers(2, 5))
        layers = [
            nn.dense("d1", f_in, hidden, rng, weight_standardize=bool(rng.integers(0, 2))),
            nn.relu("r1"),
            nn.dense("d2", hidden, classes, rng),
        ]
        model = nn.Model(layers, (f_in,))
    elif kind == 1:
        c = int(rng.integers(1, 3))
        width = int(rng.integers(2, 5))
        classes = int(rng.integers(2, 5))
        dim = 4
        layers = [
            nn.conv2d("c1", c, width, 3, rng, weight_standardize=bool(rng.integers(0, 2))),
            nn.groupnorm("g1", 1 if width % 2 else 2, width),
            nn.relu("r1"),
            nn.meanpool("p1", 2),
            nn.flatten("f1"),
            nn.dense("head", width * 4, classes, rng),
        ]
        model = nn.Model(layers, (c, dim, dim))
    else:
        c = int(rng.integers(1, 3))
        classes = int(rng.integers(2, 5))
        dim = 4
        layers = [
            nn.conv2d("c1", c, 2, 2, rng, padding=0),
            nn.relu("r1"),
            nn.flatten("f1"),
            nn.dense("mid", 2 * 3 * 3, 5, rng),
            nn.relu("r2"),
            nn.dense("head", 5, classes, rng),
        ]
        model = nn.Model(layers, (c, dim, dim))
    assert model.num_params <= max_params, model.num_params
    return _jitter_biases(model, rng)


def random_batch_for(model, rng, batch=3):
    x = rng.random((batch, *model.input_shape))
    classes = model.parameterized_layers[-1].params["bias"].shape[0]
    labels = rng.integers(0, classes, size=batch)
    return x, labels


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
