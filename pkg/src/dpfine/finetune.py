"""Layer-selection strategies for private fine-tuning.

A strategy picks which layers stay trainable under DP-SGD: the whole
model, only the classification head, the first parameterized layer plus
the head, or an explicit list. "First layer" means the first layer in
forward order that owns parameters (the stem convolution, including its
bias); normalization parameters adjacent to it are not included. Masks
respect layer boundaries: a layer is either fully trainable or fully
frozen.

Shrinking the trainable set shrinks the dimension of the noise vector a
DP-SGD step injects, and with it the expected noise norm, which scales
with the square root of the trainable parameter count.
"""

from dataclasses import dataclass, field

import numpy as np

from dpfine import nn
from dpfine.errors import ConfigError

STRATEGY_KINDS = ("whole_model", "last_layer", "first_last_layers", "custom")

_CLI_ALIASES = {
    "whole": "whole_model",
    "whole_model": "whole_model",
    "last": "last_layer",
    "last_layer": "last_layer",
    "first-last": "first_last_layers",
    "first_last": "first_last_layers",
    "first_last_layers": "first_last_layers",
}


@dataclass(frozen=True)
class FineTuneStrategy:
    kind: str
    custom_layers: tuple = ()

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ConfigError(f"unknown strategy kind {self.kind!r}; valid: {STRATEGY_KINDS}")
        if self.kind == "custom" and not self.custom_layers:
            raise ConfigError("custom strategy requires a non-empty layer list")

    @property
    def label(self):
        if self.kind == "custom":
            return "custom:" + ",".join(self.custom_layers)
        return self.kind


def parse_strategy(text):
    """Parse the CLI form: whole | last | first-last | custom:<name,...>."""
    text = text.strip()
    if text.startswith("custom:"):
        names = tuple(n for n in text[len("custom:") :].split(",") if n)
        return FineTuneStrategy("custom", names)
    if text in _CLI_ALIASES:
        return FineTuneStrategy(_CLI_ALIASES[text])
    raise ConfigError(
        f"unknown strategy {text!r}; expected whole | last | first-last | custom:<name,...>"
    )


@dataclass(frozen=True)
class TrainableMask:
    """Per-parameter trainability, consistent with layer boundaries."""

    flat: np.ndarray
    per_layer: dict = field(default_factory=dict)

    def __post_init__(self):
        self.flat.setflags(write=False)

    @property
    def trainable_layers(self):
        return {name for name, on in self.per_layer.items() if on}


def _mask_from_layers(model, trainable_names):
    layout, total = nn.param_layout(model)
    flat = np.zeros(total, dtype=bool)
    for lname, _, off, shape in layout:
        if lname in trainable_names:
            flat[off : off + int(np.prod(shape))] = True
    per_layer = {l.name: l.name in trainable_names for l in model.parameterized_layers}
    return TrainableMask(flat, per_layer)


def select_trainable(model, strategy):
    """Build the trainable mask for a strategy.

    Parameter-free layers (relu, pool, flatten) never appear in masks.
    """
    plist = model.parameterized_layers
    if not plist:
        raise ConfigError("model has no parameterized layers")
    if strategy.kind == "whole_model":
        names = {l.name for l in plist}
    elif strategy.kind == "last_layer":
        names = {plist[-1].name}
    elif strategy.kind == "first_last_layers":
        names = {plist[0].name, plist[-1].name}
    else:
        valid = [l.name for l in plist]
        unknown = [n for n in strategy.custom_layers if n not in valid]
        if unknown:
            raise ConfigError(
                f"unknown layer name(s) {unknown} in custom strategy; valid names: {valid}"
            )
        names = set(strategy.custom_layers)
    return _mask_from_layers(model, names)


def effective_dimension(mask):
    """Number of trainable scalar parameters under the mask."""
    return int(mask.flat.sum())


def reinit_head(model, rng, scheme="zeros"):
    """Replace the classification head's parameters; other layers untouched.

    Schemes: ``zeros`` or ``normal`` (std 0.01 weights, zero bias).
    """
    head = model.parameterized_layers[-1]
    if head.kind != "dense":
        raise ConfigError(f"head layer {head.name!r} is {head.kind}, expected dense")
    if scheme == "zeros":
        weight = np.zeros_like(head.params["weight"])
    elif scheme == "normal":
        weight = rng.standard_normal(head.params["weight"].shape) * 0.01
    else:
        raise ConfigError(f"unknown head reinit scheme {scheme!r}; use zeros | normal")
    new_head = nn.Layer(
        head.name,
        head.kind,
        {"weight": weight, "bias": np.zeros_like(head.params["bias"])},
        dict(head.hyper),
        head.weight_standardize,
    )
    layers = [new_head if l.name == head.name else l for l in model.layers]
    return nn.Model(layers, model.input_shape)


def resize_head(model, classes, rng, scheme="zeros"):
    """New head with a different class count, reinitialized per scheme."""
    head = model.parameterized_layers[-1]
    if head.kind != "dense":
        raise ConfigError(f"head layer {head.name!r} is {head.kind}, expected dense")
    resized = nn.dense(head.name, head.hyper["in_features"], classes)
    layers = [resized if l.name == head.name else l for l in model.layers]
    return reinit_head(nn.Model(layers, model.input_shape), rng, scheme)
