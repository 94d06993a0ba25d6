"""Minimal neural-network substrate with exact per-example backpropagation.

Everything is float64. Models are ordered lists of named layers; the
supported kinds are dense, conv2d, groupnorm, relu, flatten and meanpool.
Per-example gradients are exact: every op treats batch rows independently,
so one batched backward pass yields the gradient of each example's own
loss. Conv and dense layers optionally standardize their weight matrix
(zero mean, unit variance per output row) before use; the gradient is
propagated through the standardization.
"""

from dataclasses import dataclass, field

import numpy as np

from dpfine import backend
from dpfine.errors import NumericFailure, ShapeError

GROUPNORM_EPS = 1e-5
WEIGHT_STD_EPS = 1e-10

PARAM_ORDER = {
    "dense": ("weight", "bias"),
    "conv2d": ("weight", "bias"),
    "groupnorm": ("scale", "shift"),
}

LAYER_KINDS = ("dense", "conv2d", "groupnorm", "relu", "flatten", "meanpool")


def as_tensor(data, shape=None):
    """Coerce to a finite, C-contiguous float64 array."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise NumericFailure("tensor contains non-finite values")
    return arr


@dataclass
class Layer:
    """One model layer: a kind tag, named parameters and integer hypers."""

    name: str
    kind: str
    params: dict = field(default_factory=dict)
    hyper: dict = field(default_factory=dict)
    weight_standardize: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ShapeError(f"layer {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "groupnorm":
            g, c = self.hyper["num_groups"], self.hyper["num_channels"]
            if c % g != 0:
                raise ShapeError(
                    f"layer {self.name!r}: {g} groups do not divide {c} channels"
                )

    @property
    def param_names(self):
        return PARAM_ORDER.get(self.kind, ())

    @property
    def param_count(self):
        return sum(self.params[p].size for p in self.param_names)

    def copy(self):
        return Layer(
            self.name,
            self.kind,
            {k: v.copy() for k, v in self.params.items()},
            dict(self.hyper),
            self.weight_standardize,
        )


@dataclass
class Model:
    """Ordered layer stack; input_shape excludes the batch dimension."""

    layers: list
    input_shape: tuple

    def __post_init__(self):
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ShapeError(f"duplicate layer names: {names}")

    @property
    def num_params(self):
        return sum(l.param_count for l in self.layers)

    @property
    def parameterized_layers(self):
        return [l for l in self.layers if l.param_names]

    def layer(self, name):
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def copy(self):
        return Model([l.copy() for l in self.layers], self.input_shape)


def param_layout(model, trainable=None):
    """Flattening order of parameters: [(layer, param_name, offset, shape)].

    ``trainable`` restricts the layout to the named layers; the order is
    always forward layer order, then the kind's fixed parameter order.
    """
    layout = []
    offset = 0
    for layer in model.layers:
        if trainable is not None and layer.name not in trainable:
            continue
        for pname in layer.param_names:
            shape = layer.params[pname].shape
            size = int(np.prod(shape))
            layout.append((layer.name, pname, offset, shape))
            offset += size
    return layout, offset


def flatten_params(model, trainable=None):
    layout, total = param_layout(model, trainable)
    vec = np.empty(total)
    for lname, pname, off, shape in layout:
        p = model.layer(lname).params[pname]
        vec[off : off + p.size] = p.ravel()
    return vec


def set_params(model, vec, trainable=None):
    """Write a flat parameter vector back into a copy of the model.

    Layers outside ``trainable`` keep their existing arrays untouched, so
    frozen parameters stay bitwise identical.
    """
    out = Model(list(model.layers), model.input_shape)
    names = trainable if trainable is not None else {l.name for l in model.layers}
    layout, total = param_layout(model, names)
    if vec.shape != (total,):
        raise ShapeError(f"parameter vector length {vec.shape} != {total}")
    updated = {}
    for lname, pname, off, shape in layout:
        updated.setdefault(lname, {})[pname] = vec[off : off + int(np.prod(shape))].reshape(shape).copy()
    out.layers = [
        Layer(l.name, l.kind, {**l.params, **updated[l.name]}, dict(l.hyper), l.weight_standardize)
        if l.name in updated
        else l
        for l in model.layers
    ]
    return out


def weight_standardize(w):
    """Standardize each output row of a 2-D weight view to mean 0, unit std.

    Degenerate rows (zero variance) map to zero via the epsilon guard.
    """
    if w.ndim != 2:
        raise ShapeError(f"weight_standardize expects 2-D [out, fan_in], got {w.shape}")
    if w.shape[1] < 2:
        raise ShapeError(f"weight_standardize needs fan_in >= 2, got {w.shape[1]}")
    mean = w.mean(axis=1, keepdims=True)
    var = w.var(axis=1, keepdims=True)
    return (w - mean) / np.sqrt(var + WEIGHT_STD_EPS)


def _weight_standardize_with_ctx(w2d):
    mean = w2d.mean(axis=1, keepdims=True)
    var = w2d.var(axis=1, keepdims=True)
    s = np.sqrt(var + WEIGHT_STD_EPS)
    w_hat = (w2d - mean) / s
    return w_hat, s


def _weight_standardize_grad(dw_hat, w_hat, s):
    """Chain per-example grads through the standardization.

    dw_hat: [B, out, fan_in]; w_hat, s broadcast over the batch.
    """
    m1 = dw_hat.mean(axis=2, keepdims=True)
    m2 = (dw_hat * w_hat[None]).mean(axis=2, keepdims=True)
    return (dw_hat - m1 - w_hat[None] * m2) / s[None]


def _check_finite(arr, layer_name, stage):
    # One-pass sum screen; a finite array always has a finite sum here
    # (training-scale magnitudes), and any NaN/Inf poisons the sum.
    if not np.isfinite(arr.sum()):
        raise NumericFailure(f"non-finite values in {stage} of layer {layer_name!r}")


def _effective_weight(layer):
    """Weight actually used in forward, plus standardization context."""
    w = layer.params["weight"]
    if not layer.weight_standardize:
        return w, None
    w2d = w.reshape(w.shape[0], -1)
    w_hat, s = _weight_standardize_with_ctx(w2d)
    return w_hat.reshape(w.shape), (w_hat, s)


def _forward_layer(layer, x):
    """Returns (y, cache). Cache holds what the backward pass needs."""
    k = backend.kernels()
    kind = layer.kind
    if kind == "dense":
        if x.ndim != 2 or x.shape[1] != layer.hyper["in_features"]:
            raise ShapeError(
                f"layer {layer.name!r}: expected input [B, {layer.hyper['in_features']}],"
                f" got {x.shape}"
            )
        w_used, ws_ctx = _effective_weight(layer)
        y = k.dense_forward(x, w_used, layer.params["bias"])
        return y, (x, w_used, ws_ctx)
    if kind == "conv2d":
        h = layer.hyper
        if x.ndim != 4 or x.shape[1] != h["in_channels"]:
            raise ShapeError(
                f"layer {layer.name!r}: expected input [B, {h['in_channels']}, H, W],"
                f" got {x.shape}"
            )
        if x.shape[2] + 2 * h["padding"] < h["kernel_size"]:
            raise ShapeError(f"layer {layer.name!r}: input smaller than kernel")
        w_used, ws_ctx = _effective_weight(layer)
        y, conv_ctx = k.conv2d_forward(x, w_used, layer.params["bias"], h["stride"], h["padding"])
        return y, (x, w_used, ws_ctx, conv_ctx)
    if kind == "groupnorm":
        h = layer.hyper
        if x.ndim != 4 or x.shape[1] != h["num_channels"]:
            raise ShapeError(
                f"layer {layer.name!r}: expected [B, {h['num_channels']}, H, W], got {x.shape}"
            )
        y, mean, rstd, gn_ctx = k.groupnorm_forward(
            x, h["num_groups"], layer.params["scale"], layer.params["shift"], GROUPNORM_EPS
        )
        return y, (x, mean, rstd, gn_ctx)
    if kind == "relu":
        return k.relu_forward(x), (x,)
    if kind == "flatten":
        return x.reshape(x.shape[0], -1), (x.shape,)
    if kind == "meanpool":
        p = layer.hyper["pool_size"]
        if x.ndim != 4 or x.shape[2] % p or x.shape[3] % p:
            raise ShapeError(
                f"layer {layer.name!r}: spatial dims {x.shape[2:]} not divisible by {p}"
            )
        return k.meanpool_forward(x, p), (x.shape,)
    raise ShapeError(f"layer {layer.name!r}: unknown kind {kind!r}")


def _backward_layer(layer, dy, cache, need_dx, need_wgrad, aug_k=1):
    """Returns (dx, param_grads); param grads have one row per example,
    already averaged over each example's aug_k augmented copies."""
    k = backend.kernels()
    kind = layer.kind
    if kind == "dense":
        x, w_used, ws_ctx = cache
        dx, dw, db = k.dense_backward(x, w_used, dy, need_dx, need_wgrad, aug_k)
        if need_wgrad and ws_ctx is not None:
            dw = _weight_standardize_grad(dw, *ws_ctx)
        grads = {"weight": dw, "bias": db} if need_wgrad else None
        return dx, grads
    if kind == "conv2d":
        x, w_used, ws_ctx, conv_ctx = cache
        h = layer.hyper
        dx, dw, db = k.conv2d_backward(
            x, w_used, dy, h["stride"], h["padding"], need_dx, need_wgrad, aug_k, conv_ctx
        )
        if need_wgrad and ws_ctx is not None:
            b = dw.shape[0]
            dw2d = _weight_standardize_grad(dw.reshape(b, dw.shape[1], -1), *ws_ctx)
            dw = dw2d.reshape(dw.shape)
        grads = {"weight": dw, "bias": db} if need_wgrad else None
        return dx, grads
    if kind == "groupnorm":
        x, mean, rstd, gn_ctx = cache
        dx, dgamma, dbeta = k.groupnorm_backward(
            x, layer.params["scale"], mean, rstd, dy, layer.hyper["num_groups"],
            need_wgrad, aug_k, gn_ctx
        )
        grads = {"scale": dgamma, "shift": dbeta} if need_wgrad else None
        return dx if need_dx else None, grads
    if kind == "relu":
        return (k.relu_backward(cache[0], dy) if need_dx else None), None
    if kind == "flatten":
        return (dy.reshape(cache[0]) if need_dx else None), None
    if kind == "meanpool":
        return (k.meanpool_backward(dy, layer.hyper["pool_size"]) if need_dx else None), None
    raise ShapeError(f"layer {layer.name!r}: unknown kind {kind!r}")


def _forward_with_caches(model, x, keep_caches=True, check_finite=True):
    if x.ndim < 2 or x.shape[1:] != tuple(model.input_shape):
        raise ShapeError(
            f"model expects input [B, {', '.join(map(str, model.input_shape))}], got {x.shape}"
        )
    caches = []
    out = x
    for layer in model.layers:
        out, cache = _forward_layer(layer, out)
        if check_finite:
            _check_finite(out, layer.name, "forward")
        caches.append(cache if keep_caches else None)
    return out, caches


def forward(model, x):
    """Run the model on a batch; returns logits [B, classes]. Pure."""
    x = np.asarray(x, dtype=np.float64)
    logits, _ = _forward_with_caches(model, x, keep_caches=False)
    return logits


def cross_entropy(logits, labels):
    """Per-example cross-entropy losses [B]; stabilized by max subtraction."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n_classes = logits.shape[1]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ShapeError(f"labels out of range [0, {n_classes})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    return lse - shifted[np.arange(len(labels)), labels]


def cross_entropy_grad(logits, labels):
    """d(per-example loss)/d(logits): softmax minus one-hot, row by row."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    p[np.arange(len(labels)), labels] -= 1.0
    return p


def per_example_gradients(model, x, labels, trainable=None, return_losses=False, aug_k=1):
    """Per-example loss gradients as rows [B/aug_k, d_selected].

    Each row is the gradient of that example's own (unreduced) loss with
    respect to the parameters of the ``trainable`` layers (all
    parameterized layers when None), flattened in layout order. Backprop
    stops below the earliest trainable layer. With aug_k > 1 each group
    of aug_k consecutive batch entries holds augmented copies of one
    example and each row is the mean gradient over the group (the
    averaging that precedes clipping in DP-SGD). With ``return_losses``
    the per-example (per-copy) losses come back as a second value.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    names = (
        {l.name for l in model.parameterized_layers} if trainable is None else set(trainable)
    )
    layout, total = param_layout(model, names)
    batch = x.shape[0]
    if batch % aug_k:
        raise ShapeError(f"batch {batch} not divisible by aug_k={aug_k}")
    out_rows = batch // aug_k
    rows = np.zeros((out_rows, total))
    if batch == 0:
        return (rows, np.empty(0)) if return_losses else rows

    logits, caches = _forward_with_caches(model, x)
    dy = cross_entropy_grad(logits, labels)

    first_idx = min(
        (i for i, l in enumerate(model.layers) if l.name in names and l.param_names),
        default=len(model.layers),
    )
    offsets = {(lname, pname): off for lname, pname, off, _ in layout}
    for i in range(len(model.layers) - 1, first_idx - 1, -1):
        layer = model.layers[i]
        need_wgrad = layer.name in names and bool(layer.param_names)
        need_dx = i > first_idx
        dy_next, grads = _backward_layer(layer, dy, caches[i], need_dx, need_wgrad, aug_k)
        if need_wgrad:
            for pname in layer.param_names:
                g = grads[pname]
                _check_finite(g, layer.name, "backward")
                off = offsets[(layer.name, pname)]
                rows[:, off : off + g[0].size] = g.reshape(out_rows, -1)
        if need_dx:
            _check_finite(dy_next, layer.name, "backward")
        dy = dy_next
    if return_losses:
        return rows, cross_entropy(logits, labels)
    return rows


def backward_per_example(model, x, labels):
    """Full per-example gradient rows [B, d] over every model parameter."""
    return per_example_gradients(model, x, labels, trainable=None)


def predict(model, x, batch_size=256):
    """Class predictions, evaluated in batches."""
    outs = []
    for i in range(0, len(x), batch_size):
        outs.append(np.argmax(forward(model, x[i : i + batch_size]), axis=1))
    return np.concatenate(outs) if outs else np.empty(0, dtype=int)


def accuracy(model, images, labels, batch_size=256):
    return float(np.mean(predict(model, images, batch_size) == labels))


def group_norm_forward(x, groups, scale, shift):
    """Functional group normalization (forward only)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] % groups != 0:
        raise ShapeError(f"{groups} groups do not divide {x.shape[1]} channels")
    y, _, _, _ = backend.kernels().groupnorm_forward(x, groups, scale, shift, GROUPNORM_EPS)
    return y


def _he_normal(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def dense(name, in_features, out_features, rng=None, weight_standardize=False):
    rng = rng if rng is not None else np.random.default_rng(0)
    return Layer(
        name,
        "dense",
        {
            "weight": _he_normal(rng, (out_features, in_features), in_features),
            "bias": np.zeros(out_features),
        },
        {"in_features": in_features, "out_features": out_features},
        weight_standardize,
    )


def conv2d(name, in_channels, out_channels, kernel_size, rng=None, stride=1, padding=1,
           weight_standardize=False):
    rng = rng if rng is not None else np.random.default_rng(0)
    fan_in = in_channels * kernel_size * kernel_size
    return Layer(
        name,
        "conv2d",
        {
            "weight": _he_normal(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in),
            "bias": np.zeros(out_channels),
        },
        {
            "in_channels": in_channels,
            "out_channels": out_channels,
            "kernel_size": kernel_size,
            "stride": stride,
            "padding": padding,
        },
        weight_standardize,
    )


def groupnorm(name, num_groups, num_channels):
    return Layer(
        name,
        "groupnorm",
        {"scale": np.ones(num_channels), "shift": np.zeros(num_channels)},
        {"num_groups": num_groups, "num_channels": num_channels},
    )


def relu(name):
    return Layer(name, "relu")


def flatten(name):
    return Layer(name, "flatten")


def meanpool(name, pool_size):
    return Layer(name, "meanpool", hyper={"pool_size": pool_size})


def build_small_cnn(input_shape=(1, 8, 8), classes=10, width=8, hidden=48, seed=0,
                    weight_standardize=False):
    """Reference architecture: conv, groupnorm, relu, conv, groupnorm, relu,
    meanpool, flatten, dense, relu, dense head."""
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    w2 = 2 * width
    feat = w2 * (h // 2) * (w // 2)
    layers = [
        conv2d("conv1", c, width, 3, rng, weight_standardize=weight_standardize),
        groupnorm("gn1", max(1, width // 2), width),
        relu("act1"),
        conv2d("conv2", width, w2, 3, rng, weight_standardize=weight_standardize),
        groupnorm("gn2", max(1, w2 // 2), w2),
        relu("act2"),
        meanpool("pool", 2),
        flatten("flat"),
        dense("fc1", feat, hidden, rng, weight_standardize=weight_standardize),
        relu("act3"),
        dense("head", hidden, classes, rng),
    ]
    return Model(layers, tuple(input_shape))
