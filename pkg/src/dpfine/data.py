"""Dataset loading, splits, augmentation, and synthetic transfer tasks.

Images are float64 arrays [N, C, H, W] with values in [0, 1]. Ingestion
formats are IDX (big-endian, magic 0x00000803 for images and 0x00000801
for labels) and a flat CSV with header ``label,p0,p1,...`` whose pixel
values are bytes (scaled by 1/255 on load). Loading is bit-deterministic
across platforms; endianness is explicit.

Augmentation produces K deterministic copies per example, keyed by
(example index, step index, copy index, seed) through a stateless integer
mix, so a training run never depends on generator call order.
"""

import struct
from dataclasses import dataclass

import numpy as np

from dpfine.errors import ConfigError

SPLIT_TAGS = ("public_pretrain", "private_finetune", "test")

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801

AUGMENT_OPS = ("horizontal_flip", "pad_and_crop")


@dataclass
class Dataset:
    """An image classification split."""

    images: np.ndarray
    labels: np.ndarray
    name: str
    split_tag: str
    num_classes: int

    def __post_init__(self):
        if self.split_tag not in SPLIT_TAGS:
            raise ConfigError(f"split_tag must be one of {SPLIT_TAGS}, got {self.split_tag!r}")
        if self.images.ndim != 4:
            raise ConfigError(f"images must be [N, C, H, W], got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ConfigError(
                f"{len(self.images)} images but {len(self.labels)} labels in {self.name!r}"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError(f"labels outside [0, {self.num_classes}) in {self.name!r}")
        lo, hi = (self.images.min(), self.images.max()) if self.images.size else (0.0, 0.0)
        if lo < 0.0 or hi > 1.0:
            raise ConfigError(f"pixel values outside [0, 1] in {self.name!r}: [{lo}, {hi}]")

    def __len__(self):
        return len(self.images)


@dataclass(frozen=True)
class AugmentSpec:
    """K copies per example; ops drawn from AUGMENT_OPS."""

    multiplicity: int = 1
    ops: tuple = ()
    pad: int = 1

    def __post_init__(self):
        if self.multiplicity < 1:
            raise ConfigError(f"augment multiplicity must be >= 1, got {self.multiplicity}")
        bad = [op for op in self.ops if op not in AUGMENT_OPS]
        if bad:
            raise ConfigError(f"unknown augment op(s) {bad}; valid: {AUGMENT_OPS}")
        if self.pad < 0:
            raise ConfigError("pad must be non-negative")


def _read_exact(f, n, offset, path):
    buf = f.read(n)
    if len(buf) != n:
        raise ConfigError(
            f"{path}: truncated at byte {offset + len(buf)}: expected {n} more bytes"
        )
    return buf


def _read_idx(path, expect_magic, expect_dims):
    with open(path, "rb") as f:
        header = _read_exact(f, 4, 0, path)
        (magic,) = struct.unpack(">i", header)
        if magic != expect_magic:
            raise ConfigError(
                f"{path}: bad magic 0x{magic:08x} at byte 0, expected 0x{expect_magic:08x}"
            )
        dims = []
        for i in range(expect_dims):
            dims.append(struct.unpack(">i", _read_exact(f, 4, 4 + 4 * i, path))[0])
        offset = 4 + 4 * expect_dims
        count = int(np.prod(dims))
        raw = _read_exact(f, count, offset, path)
    return np.frombuffer(raw, dtype=np.uint8).reshape(dims)


def load_idx_images(path):
    """IDX image file -> float64 [N, 1, H, W] scaled to [0, 1]."""
    arr = _read_idx(path, IDX_MAGIC_IMAGES, 3)
    return (arr.astype(np.float64) / 255.0)[:, None, :, :]


def load_idx_labels(path):
    arr = _read_idx(path, IDX_MAGIC_LABELS, 1)
    return arr.astype(np.int64)


def load_idx(images_path, labels_path, name="idx", split_tag="private_finetune",
             num_classes=None):
    """Load a paired IDX image/label file set into a Dataset."""
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) else 1
    return Dataset(images, labels, name, split_tag, num_classes)


def save_idx_images(path, images):
    """Inverse of load_idx_images, for fixtures; values quantized to bytes."""
    arr = np.round(np.asarray(images)[:, 0] * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">i", IDX_MAGIC_IMAGES))
        for d in arr.shape:
            f.write(struct.pack(">i", d))
        f.write(arr.tobytes())


def save_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">i", IDX_MAGIC_LABELS))
        f.write(struct.pack(">i", len(labels)))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def load_csv(path, image_shape=None, name="csv", split_tag="private_finetune",
             num_classes=None):
    """CSV with header ``label,p0,...``; pixels are byte values (0..255)."""
    with open(path) as f:
        header = f.readline().strip()
        if not header.startswith("label,p0"):
            raise ConfigError(f"{path}: expected header 'label,p0,p1,...', got {header!r}")
        rows = [line.strip() for line in f if line.strip()]
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    table = np.array([[float(v) for v in r.split(",")] for r in rows])
    labels = table[:, 0].astype(np.int64)
    pixels = table[:, 1:]
    if pixels.min() < 0 or pixels.max() > 255:
        raise ConfigError(f"{path}: pixel values outside [0, 255]")
    if image_shape is None:
        side = int(round(np.sqrt(pixels.shape[1])))
        if side * side != pixels.shape[1]:
            raise ConfigError(
                f"{path}: {pixels.shape[1]} pixels is not square; pass image_shape"
            )
        image_shape = (1, side, side)
    images = (pixels / 255.0).reshape(len(labels), *image_shape)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    return Dataset(np.ascontiguousarray(images), labels, name, split_tag, num_classes)


def _smooth_prototype(rng, dim, coarse=4):
    """Low-frequency random pattern in [0.15, 0.85]."""
    grid = rng.random((coarse, coarse))
    reps = int(np.ceil(dim / coarse))
    up = np.kron(grid, np.ones((reps, reps)))[:dim, :dim]
    return 0.15 + 0.7 * up


def _blob_split(rng, prototypes, n, noise, name, split_tag, num_classes):
    labels = np.arange(n) % num_classes
    images = prototypes[labels][:, None] + noise * rng.standard_normal(
        (n, 1) + prototypes.shape[1:]
    )
    return Dataset(np.clip(images, 0.0, 1.0), labels, name, split_tag, num_classes)


def make_synthetic_transfer_task(seed, n_public, n_private, classes, dim, n_test=None,
                                 noise=0.12):
    """Class-conditional Gaussian-blob tasks sharing low-level structure.

    The public task draws around per-class smooth prototypes; the private
    task uses shifted and mirrored variants of the same prototypes, so a
    model pretrained on the public split transfers to the private one.
    Returns (public_pretrain, private_finetune, test) datasets; the test
    split is drawn from the private distribution. Deterministic in seed.
    """
    if min(n_public, n_private) < classes:
        raise ConfigError("split sizes must be at least the class count")
    n_test = n_test if n_test is not None else n_private
    root = np.random.SeedSequence(seed)
    proto_rng, pub_rng, priv_rng, test_rng = (
        np.random.default_rng(s) for s in root.spawn(4)
    )
    protos = np.stack([_smooth_prototype(proto_rng, dim) for _ in range(classes)])
    # Same prototypes cyclically shifted one pixel: enough shared structure
    # that a probe on the public prototypes transfers, but a genuinely
    # different input distribution.
    protos_private = np.ascontiguousarray(np.roll(protos, shift=(1, 1), axis=(1, 2)))

    public = _blob_split(pub_rng, protos, n_public, noise, "synthetic-public",
                         "public_pretrain", classes)
    private = _blob_split(priv_rng, protos_private, n_private, noise, "synthetic-private",
                          "private_finetune", classes)
    test = _blob_split(test_rng, protos_private, n_test, noise, "synthetic-test",
                       "test", classes)
    return public, private, test


def _mix64(*values):
    """Stateless splitmix64-style hash of integer identifiers."""
    mask = 0xFFFFFFFFFFFFFFFF
    h = 0x9E3779B97F4A7C15
    for v in values:
        h ^= v & mask
        h = (h * 0xBF58476D1CE4E5B9) & mask
        h ^= h >> 27
        h = (h * 0x94D049BB133111EB) & mask
        h ^= h >> 31
    return h


def horizontal_flip(image):
    return np.ascontiguousarray(image[..., ::-1])


def pad_and_crop(image, pad, off_h, off_w):
    """Zero-pad by ``pad`` then crop back at the given offsets."""
    c, h, w = image.shape
    if pad >= h or pad >= w:
        raise ConfigError(f"pad {pad} too large for image {h}x{w}")
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)))
    return np.ascontiguousarray(padded[:, off_h : off_h + h, off_w : off_w + w])


def augment(example, spec, ids, seed):
    """K deterministic augmented copies of one example.

    ``ids`` is (example_index, step_index); copy 0 is always the identity
    transform and every copy is a pure function of (ids, copy index, seed).
    """
    example_id, step = ids
    copies = [np.array(example, copy=True)]
    for copy_idx in range(1, spec.multiplicity):
        img = example
        bits = _mix64(seed, example_id, step, copy_idx)
        if "horizontal_flip" in spec.ops and bits & 1:
            img = horizontal_flip(img)
        if "pad_and_crop" in spec.ops and spec.pad > 0:
            span = 2 * spec.pad + 1
            off_h = (bits >> 1) % span
            off_w = (bits >> 17) % span
            img = pad_and_crop(img, spec.pad, off_h, off_w)
        copies.append(np.array(img, copy=True))
    return copies


def augment_batch(images, spec, example_ids, step, seed):
    """Vectorized augment() over a batch: [B, ...] -> [B, K, ...].

    Produces exactly the copies augment() would, using the same
    (example, step, copy, seed) keying.
    """
    b = len(images)
    out = np.empty((b, spec.multiplicity) + images.shape[1:])
    out[:, 0] = images
    if spec.multiplicity == 1 or b == 0:
        return out
    do_flip = "horizontal_flip" in spec.ops
    do_crop = "pad_and_crop" in spec.ops and spec.pad > 0
    span = 2 * spec.pad + 1
    pad = spec.pad
    h, w = images.shape[2], images.shape[3]
    for copy_idx in range(1, spec.multiplicity):
        bits = np.array(
            [_mix64(seed, int(e), step, copy_idx) for e in example_ids], dtype=np.uint64
        )
        imgs = images
        if do_flip:
            flip_mask = (bits & np.uint64(1)).astype(bool)
            imgs = images.copy()
            imgs[flip_mask] = imgs[flip_mask][..., ::-1]
        if do_crop:
            if pad >= h or pad >= w:
                raise ConfigError(f"pad {pad} too large for image {h}x{w}")
            padded = np.pad(imgs, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
            off_h = ((bits >> np.uint64(1)) % np.uint64(span)).astype(np.intp)
            off_w = ((bits >> np.uint64(17)) % np.uint64(span)).astype(np.intp)
            for dh in range(span):
                for dw in range(span):
                    sel = (off_h == dh) & (off_w == dw)
                    if sel.any():
                        out[sel, copy_idx] = padded[sel, :, dh : dh + h, dw : dw + w]
        else:
            out[:, copy_idx] = imgs
    return out
