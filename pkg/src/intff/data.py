"""MNIST IDX ingestion, label-overlay encoding, negative-label sampling, the
four-type corruption suite, and deterministic batching.

Positive data is an image with its true label written into the first ten
pixels; negative data is the same image with a deliberately wrong label.
Corruption only ever applies to a training split; evaluation always runs on
authentic data.
"""

import gzip
import hashlib
import os
import struct
import urllib.request
from dataclasses import dataclass

import numpy as np

from . import seeding
from .errors import DataError

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
N_CLASSES = 10
OVERLAY_WIDTH = 10
NEUTRAL_LEVEL = 0.1

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte.gz",
    "train_labels": "train-labels-idx1-ubyte.gz",
    "test_images": "t10k-images-idx3-ubyte.gz",
    "test_labels": "t10k-labels-idx1-ubyte.gz",
}

# canonical gzip checksums, verified against the widely mirrored originals
MNIST_SHA256 = {
    "train-images-idx3-ubyte.gz":
        "440fcabf73cc546fa21475e81ea370265605f56be210a4024d2ca8f203523609",
    "train-labels-idx1-ubyte.gz":
        "3552534a0a558bbed6aed32b30c495cca23d567ec52cac8be1a0730e8010255c",
    "t10k-images-idx3-ubyte.gz":
        "8d422c7b0a1c1c79245a5bcf07fe86e33eeafee792b84584aec276f5a2dbc4e6",
    "t10k-labels-idx1-ubyte.gz":
        "f7ae60f92e00ec6debd23a6088c31dbd2371eca3ffa0defaefb259924204aec6",
}

DEFAULT_MIRROR = "https://storage.googleapis.com/cvdf-datasets/mnist"
MIRROR_ENV_VAR = "INTFF_DATA_MIRROR"


def _read_file(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from None
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except OSError as exc:
            raise DataError(f"{path}: bad gzip payload: {exc}") from None
    return raw


def load_idx_images(path) -> np.ndarray:
    """Read an IDX image file into (n, rows*cols) float64 pixels in [0, 1]."""
    raw = _read_file(path)
    if len(raw) < 16:
        raise DataError(f"{path}: truncated header")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IMAGE_MAGIC:
        raise DataError(f"{path}: bad image magic {magic} (expected {IMAGE_MAGIC})")
    expected = 16 + count * rows * cols
    if len(raw) != expected:
        raise DataError(f"{path}: payload {len(raw)} bytes, expected {expected}")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16).astype(np.float64)
    return pixels.reshape(count, rows * cols) / 255.0


def load_idx_labels(path) -> np.ndarray:
    """Read an IDX label file into an (n,) int array, validating range 0..9."""
    raw = _read_file(path)
    if len(raw) < 8:
        raise DataError(f"{path}: truncated header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != LABEL_MAGIC:
        raise DataError(f"{path}: bad label magic {magic} (expected {LABEL_MAGIC})")
    if len(raw) != 8 + count:
        raise DataError(f"{path}: payload {len(raw)} bytes, expected {8 + count}")
    labels = np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)
    if labels.size and labels.max() >= N_CLASSES:
        raise DataError(f"{path}: label {int(labels.max())} out of range 0..{N_CLASSES - 1}")
    return labels


def write_idx_images(path, images, rows: int = 28, cols: int = 28):
    """Write [0, 1] pixel rows back to the IDX byte layout."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 2 or images.shape[1] != rows * cols:
        raise DataError(f"cannot write images of shape {images.shape} as {rows}x{cols}")
    data = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, images.shape[0], rows, cols))
        fh.write(data.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels)
    if labels.ndim != 1 or (labels.size and (labels.min() < 0 or labels.max() >= N_CLASSES)):
        raise DataError("labels must be a 1-D array of values 0..9")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, labels.shape[0]))
        fh.write(labels.astype(np.uint8).tobytes())


def load_mnist_split(data_dir, split: str):
    """Load one split ("train" or "test") from a directory of IDX files."""
    if split not in ("train", "test"):
        raise ValueError(f"unknown split {split!r}")
    key = split
    img_path = _find_file(data_dir, MNIST_FILES[f"{key}_images"])
    lbl_path = _find_file(data_dir, MNIST_FILES[f"{key}_labels"])
    images = load_idx_images(img_path)
    labels = load_idx_labels(lbl_path)
    if images.shape[0] != labels.shape[0]:
        raise DataError(
            f"{data_dir}: image/label count mismatch {images.shape[0]} vs {labels.shape[0]}")
    return images, labels


def _find_file(data_dir, gz_name):
    # accept either the .gz as distributed or a decompressed copy
    candidates = [os.path.join(data_dir, gz_name),
                  os.path.join(data_dir, gz_name[:-3])]
    for cand in candidates:
        if os.path.exists(cand):
            return cand
    raise DataError(f"missing dataset file {gz_name} (or its decompressed form) in {data_dir}")


def overlay_label(pixels, label) -> np.ndarray:
    """Copy of pixels with the first ten positions replaced by the label code.

    A digit label becomes one-hot at intensity 1.0; label None is the neutral
    marker and sets all ten positions to 0.1.  The remaining pixels are
    untouched.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    out = pixels.copy()
    if label is None:
        out[..., :OVERLAY_WIDTH] = NEUTRAL_LEVEL
        return out
    label = int(label)
    if not 0 <= label < N_CLASSES:
        raise ValueError(f"label {label} out of range 0..{N_CLASSES - 1}")
    out[..., :OVERLAY_WIDTH] = 0.0
    out[..., label] = 1.0
    return out


def overlay_labels(images, labels=None) -> np.ndarray:
    """Batched overlay; labels None applies the neutral marker to every row."""
    images = np.asarray(images, dtype=np.float64)
    out = images.copy()
    if labels is None:
        out[:, :OVERLAY_WIDTH] = NEUTRAL_LEVEL
        return out
    labels = np.asarray(labels)
    if labels.shape[0] != images.shape[0]:
        raise ValueError(f"labels shape {labels.shape} does not match images {images.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= N_CLASSES):
        raise ValueError("label out of range 0..9")
    out[:, :OVERLAY_WIDTH] = 0.0
    out[np.arange(images.shape[0]), labels] = 1.0
    return out


def sample_negative_label(true_label: int, rng: np.random.Generator) -> int:
    """Uniform over the nine labels that differ from the true one."""
    true_label = int(true_label)
    if not 0 <= true_label < N_CLASSES:
        raise ValueError(f"label {true_label} out of range 0..{N_CLASSES - 1}")
    draw = int(rng.integers(0, N_CLASSES - 1))
    return draw + 1 if draw >= true_label else draw


def sample_negative_labels(labels, rng: np.random.Generator) -> np.ndarray:
    labels = np.asarray(labels)
    draws = rng.integers(0, N_CLASSES - 1, size=labels.shape[0])
    return np.where(draws >= labels, draws + 1, draws)


@dataclass
class NoiseProfile:
    """Corruption mix: per-type fractions plus the noise parameters.

    Types: 0 untouched, 1 Gaussian overlay (label kept), 2 dropped pixels
    (label kept), 3 pure Gaussian noise with a random label.
    """

    fractions: tuple = (0.25, 0.25, 0.25, 0.25)
    gaussian_sigma: float = 0.3
    dropout_max_fraction: float = 0.5
    pure_mean: float = 0.5
    pure_sigma: float = 0.5
    seed: int = 0

    def validate(self):
        if len(self.fractions) != 4 or any(f < 0 for f in self.fractions):
            raise ValueError(f"need four nonnegative fractions, got {self.fractions}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"fractions must sum to 1, got {sum(self.fractions)}")
        if not 0.0 <= self.dropout_max_fraction <= 1.0:
            raise ValueError(
                f"dropout_max_fraction must be in [0, 1], got {self.dropout_max_fraction}")

    @classmethod
    def from_dict(cls, doc: dict) -> "NoiseProfile":
        known = {"fractions", "gaussian_sigma", "dropout_max_fraction",
                 "pure_mean", "pure_sigma", "seed"}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown noise profile key {sorted(unknown)[0]!r}")
        kwargs = dict(doc)
        if "fractions" in kwargs:
            kwargs["fractions"] = tuple(kwargs["fractions"])
        profile = cls(**kwargs)
        profile.validate()
        return profile


def largest_remainder_counts(fractions, total: int) -> list:
    """Integer counts per fraction summing exactly to total."""
    raw = [f * total for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    short = total - sum(counts)
    order = sorted(range(len(fractions)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:short]:
        counts[i] += 1
    return counts


def corrupt_dataset(images, labels, profile: NoiseProfile):
    """Apply the four-type corruption mix to a training set.

    Deterministic per profile.seed: a seeded shuffle assigns each image a
    type by contiguous split with largest-remainder counts.  Returns
    (images, labels, type_ids) in the original order; pixels stay in [0, 1].
    """
    profile.validate()
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    n, width = images.shape
    rng = seeding.stream(profile.seed, seeding.DOMAIN_NOISE)
    counts = largest_remainder_counts(profile.fractions, n)
    perm = rng.permutation(n)
    bounds = np.cumsum([0] + counts)
    segments = [perm[bounds[i]:bounds[i + 1]] for i in range(4)]

    out = images.copy()
    out_labels = labels.copy()
    types = np.empty(n, dtype=np.uint8)
    for t, idx in enumerate(segments):
        types[idx] = t

    idx = segments[1]
    if idx.size:
        noise = rng.normal(0.0, profile.gaussian_sigma, size=(idx.size, width))
        out[idx] = np.clip(images[idx] + noise, 0.0, 1.0)

    idx = segments[2]
    if idx.size:
        max_k = int(np.floor(profile.dropout_max_fraction * width))
        ks = rng.integers(0, max_k + 1, size=idx.size)
        for row, k in zip(idx, ks):
            if k:
                drop = rng.choice(width, size=k, replace=False)
                out[row, drop] = 0.0

    idx = segments[3]
    if idx.size:
        out[idx] = np.clip(
            rng.normal(profile.pure_mean, profile.pure_sigma, size=(idx.size, width)),
            0.0, 1.0)
        out_labels[idx] = rng.integers(0, N_CLASSES, size=idx.size)

    return out, out_labels, types


def make_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Seeded permutation of range(n) chunked into batches; the last batch
    may be short, and every index appears exactly once."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if n < 1:
        raise DataError("empty dataset")
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def fetch_mnist(out_dir, mirror: str = None, verify: bool = True) -> dict:
    """Download the four canonical MNIST files into out_dir.

    The mirror base URL comes from the argument, the INTFF_DATA_MIRROR
    environment variable, or the default public mirror.  Files already
    present with a matching checksum are kept.  Returns {filename: sha256}.
    """
    mirror = mirror or os.environ.get(MIRROR_ENV_VAR) or DEFAULT_MIRROR
    os.makedirs(out_dir, exist_ok=True)
    checksums = {}
    for name in MNIST_FILES.values():
        dest = os.path.join(out_dir, name)
        if not (os.path.exists(dest) and sha256_file(dest) == MNIST_SHA256[name]):
            url = f"{mirror.rstrip('/')}/{name}"
            try:
                with urllib.request.urlopen(url) as resp, open(dest, "wb") as fh:
                    fh.write(resp.read())
            except OSError as exc:
                raise DataError(f"failed to fetch {url}: {exc}") from None
        digest = sha256_file(dest)
        if verify and digest != MNIST_SHA256[name]:
            raise DataError(f"{dest}: checksum mismatch "
                            f"(got {digest}, expected {MNIST_SHA256[name]})")
        checksums[name] = digest
    return checksums
