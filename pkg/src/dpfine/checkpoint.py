"""Model checkpoint format.

A checkpoint is a single file: a UTF-8 text manifest (key=value lines,
terminated by an ``end_manifest`` line) followed by the raw parameter
blobs, little-endian float64, concatenated in manifest order. The
round trip is bit-exact.
"""

import numpy as np

from dpfine import nn
from dpfine.errors import ConfigError

FORMAT_VERSION = 1
_SEP = b"end_manifest\n"


def _shape_str(shape):
    return "x".join(str(s) for s in shape) if shape else "1"


def _parse_shape(text):
    return tuple(int(s) for s in text.split("x"))


def _layer_line(layer):
    hyper = ",".join(f"{k}:{v}" for k, v in sorted(layer.hyper.items()))
    params = ",".join(
        f"{p}:{_shape_str(layer.params[p].shape)}" for p in layer.param_names
    )
    return (
        f"layer={layer.name} kind={layer.kind} hyper={hyper or '-'}"
        f" params={params or '-'} ws={int(layer.weight_standardize)}"
    )


def save(model, path, meta=None):
    """Write a model checkpoint; ``meta`` is an optional str->str mapping."""
    lines = [
        f"format_version={FORMAT_VERSION}",
        f"input_shape={_shape_str(model.input_shape)}",
        f"num_layers={len(model.layers)}",
    ]
    lines += [_layer_line(l) for l in model.layers]
    for key in sorted(meta or {}):
        lines.append(f"meta.{key}={meta[key]}")
    blob = bytearray()
    for layer in model.layers:
        for pname in layer.param_names:
            blob += layer.params[pname].astype("<f8", copy=False).tobytes()
    with open(path, "wb") as f:
        f.write("\n".join(lines).encode() + b"\n")
        f.write(_SEP)
        f.write(bytes(blob))


def _split_kv(line, offset):
    if "=" not in line:
        raise ConfigError(f"checkpoint: malformed manifest line at byte {offset}: {line!r}")
    return line.split("=", 1)


def load(path):
    """Read a checkpoint; returns (model, meta)."""
    with open(path, "rb") as f:
        raw = f.read()
    sep_at = raw.find(_SEP)
    if sep_at < 0:
        raise ConfigError(f"checkpoint {path}: missing manifest terminator")
    manifest = raw[:sep_at].decode()
    blob = raw[sep_at + len(_SEP) :]

    layers = []
    meta = {}
    input_shape = None
    offset = 0
    for line in manifest.splitlines():
        key, value = _split_kv(line, offset)
        offset += len(line) + 1
        if key == "format_version":
            if int(value) != FORMAT_VERSION:
                raise ConfigError(f"checkpoint {path}: unsupported format version {value}")
        elif key == "input_shape":
            input_shape = _parse_shape(value)
        elif key == "num_layers":
            pass
        elif key == "layer":
            layers.append(_parse_layer_line(value, line))
        elif key.startswith("meta."):
            meta[key[5:]] = value
        else:
            raise ConfigError(f"checkpoint {path}: unknown manifest key {key!r}")
    if input_shape is None:
        raise ConfigError(f"checkpoint {path}: manifest missing input_shape")

    pos = 0
    built = []
    for name, kind, hyper, pshapes, ws in layers:
        params = {}
        for pname, shape in pshapes:
            nbytes = int(np.prod(shape)) * 8
            if pos + nbytes > len(blob):
                raise ConfigError(
                    f"checkpoint {path}: truncated at byte {sep_at + len(_SEP) + pos}:"
                    f" need {nbytes} bytes for {name}.{pname}, have {len(blob) - pos}"
                )
            params[pname] = (
                np.frombuffer(blob, dtype="<f8", count=int(np.prod(shape)), offset=pos)
                .reshape(shape)
                .copy()
            )
            pos += nbytes
        built.append(nn.Layer(name, kind, params, hyper, ws))
    if pos != len(blob):
        raise ConfigError(
            f"checkpoint {path}: {len(blob) - pos} trailing bytes after parameters"
        )
    return nn.Model(built, input_shape), meta


def _parse_layer_line(first_field, line):
    fields = {}
    for tok in line.split():
        k, v = tok.split("=", 1)
        fields[k] = v
    kind = fields["kind"]
    hyper = {}
    if fields["hyper"] != "-":
        for item in fields["hyper"].split(","):
            k, v = item.split(":")
            hyper[k] = int(v)
    pshapes = []
    if fields["params"] != "-":
        for item in fields["params"].split(","):
            pname, shape = item.split(":")
            pshapes.append((pname, _parse_shape(shape)))
    return fields["layer"], kind, hyper, pshapes, fields["ws"] == "1"
