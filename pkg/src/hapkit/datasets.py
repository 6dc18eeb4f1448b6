"""Dataset ingestion: IDX image/label files, CSV tables, synthetic generators."""

import csv
import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DatasetFormatError


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    n_classes: int
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "X", np.asarray(self.X, dtype=np.float64))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=np.int64))
        if len(self.X) != len(self.y):
            raise ValueError(f"{len(self.X)} examples but {len(self.y)} labels")

    def __len__(self):
        return len(self.y)

    @property
    def targets(self):
        """One-hot label rows."""
        return np.eye(self.n_classes)[self.y]

    def subset(self, idx):
        return Dataset(self.X[idx], self.y[idx], self.n_classes, self.name)

    def split(self, val_fraction=0.25, seed=0):
        """Disjoint (train, validation) split."""
        if not 0 < val_fraction < 1:
            raise ValueError("val_fraction must be in (0, 1)")
        perm = np.random.default_rng(seed).permutation(len(self))
        n_val = max(1, int(round(val_fraction * len(self))))
        return self.subset(np.sort(perm[n_val:])), self.subset(np.sort(perm[:n_val]))

    def equals(self, other):
        return (
            self.n_classes == other.n_classes
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
        )


# -- synthetic generators --------------------------------------------------


def gaussian_blobs(n=600, n_classes=3, n_features=2, spread=0.5, separation=4.0, seed=0):
    """Isotropic Gaussian clusters around well-separated random centers."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_classes, n_features))
    centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True).clip(1e-12)
    y = np.arange(n) % n_classes
    X = centers[y] + spread * rng.normal(size=(n, n_features))
    return Dataset(X, y, n_classes, "gaussian-blobs")


def two_spirals(n=2000, noise=0.1, turns=1.5, seed=0):
    """Two interleaved Archimedean spirals, one per class."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    t = np.sqrt(rng.uniform(0.0, 1.0, size=n)) * turns * 2 * np.pi
    r = t / (turns * 2 * np.pi) * 2.0
    angle = t + np.pi * y
    X = np.stack([r * np.cos(angle), r * np.sin(angle)], axis=1)
    X += noise * rng.normal(size=X.shape)
    return Dataset(X, y, 2, "two-spirals")


_SHAPES = ("hbar", "vbar", "diag", "antidiag")


def _draw(kind, size, rng):
    img = np.zeros((size, size))
    length = rng.integers(3, 6)
    if kind == "hbar":
        r, c = rng.integers(0, size), rng.integers(0, size - length + 1)
        img[r, c:c + length] = 1.0
    elif kind == "vbar":
        r, c = rng.integers(0, size - length + 1), rng.integers(0, size)
        img[r:r + length, c] = 1.0
    else:
        r, c = rng.integers(0, size - length + 1), rng.integers(0, size - length + 1)
        for i in range(length):
            if kind == "diag":
                img[r + i, c + i] = 1.0
            else:
                img[r + i, c + length - 1 - i] = 1.0
    return img


def tiny_shapes(n=2000, size=8, noise=0.35, seed=0):
    """8x8 single-channel images of short strokes: horizontal, vertical,
    diagonal and anti-diagonal, at random positions and contrast, with
    additive Gaussian noise."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % len(_SHAPES)
    X = np.empty((n, 1, size, size))
    for i in range(n):
        contrast = rng.uniform(0.6, 1.4)
        X[i, 0] = contrast * _draw(_SHAPES[y[i]], size, rng) + noise * rng.normal(size=(size, size))
    return Dataset(X, y, len(_SHAPES), "tiny-shapes")


def token_pairs(n=2000, seq_len=6, d_model=16, vocab=8, n_classes=4, noise=0.1, seed=0):
    """Token sequences in which exactly one vocabulary item occurs twice.

    The label is that item's id modulo ``n_classes``, so solving the task needs
    token-to-token comparison.  The vocabulary embedding is fixed by ``seed``.
    """
    if seq_len > vocab + 1:
        raise ValueError("seq_len must be at most vocab + 1")
    rng = np.random.default_rng(seed)
    emb = rng.normal(size=(vocab, d_model)) / np.sqrt(d_model) * 2.0
    X = np.empty((n, seq_len, d_model))
    y = np.empty(n, dtype=np.int64)
    for i in range(n):
        items = rng.permutation(vocab)[: seq_len - 1]
        dup = items[rng.integers(0, seq_len - 1)]
        seq = rng.permutation(np.append(items, dup))
        X[i] = emb[seq] + noise * rng.normal(size=(seq_len, d_model))
        y[i] = dup % n_classes
    return Dataset(X, y, n_classes, "token-pairs")


GENERATORS = {
    "gaussian-blobs": gaussian_blobs,
    "two-spirals": two_spirals,
    "tiny-shapes": tiny_shapes,
    "token-pairs": token_pairs,
}


# -- IDX -------------------------------------------------------------------

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path_or_bytes, expected_ndim=None):
    """Parse an IDX file into a numpy array."""
    if isinstance(path_or_bytes, (bytes, bytearray)):
        buf, where = bytes(path_or_bytes), "<bytes>"
    else:
        with open(path_or_bytes, "rb") as fh:
            buf, where = fh.read(), str(path_or_bytes)
    if len(buf) < 4:
        raise DatasetFormatError(f"{where}: file is {len(buf)} bytes, too short for the 4-byte IDX magic at offset 0")
    zero, code, ndim = buf[:2], buf[2], buf[3]
    expected = "0x0000" + (f"08{expected_ndim:02x}" if expected_ndim else "TTNN")
    if zero != b"\x00\x00" or code not in _IDX_TYPES or (expected_ndim and ndim != expected_ndim):
        raise DatasetFormatError(
            f"{where}: bad IDX magic 0x{buf[:4].hex()} at offset 0; expected magic {expected}"
        )
    header_end = 4 + 4 * ndim
    if len(buf) < header_end:
        raise DatasetFormatError(f"{where}: dimension header truncated at byte offset {len(buf)}, needs {header_end} bytes")
    dims = struct.unpack(f">{ndim}I", buf[4:header_end])
    dtype = np.dtype(_IDX_TYPES[code])
    need = int(np.prod(dims)) * dtype.itemsize
    have = len(buf) - header_end
    if have != need:
        raise DatasetFormatError(
            f"{where}: data section starting at byte offset {header_end} has {have} bytes, expected {need} for shape {dims}"
        )
    return np.frombuffer(buf, dtype=dtype, offset=header_end).reshape(dims)


def write_idx(array, path=None):
    array = np.asarray(array)
    codes = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_TYPES.items()}
    code = codes.get(array.dtype.newbyteorder("="))
    if code is None:
        raise ValueError(f"dtype {array.dtype} has no IDX type code")
    payload = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    payload += array.astype(_IDX_TYPES[code]).tobytes()
    if path is not None:
        with open(path, "wb") as fh:
            fh.write(payload)
    return payload


def load_idx(images_path, labels_path, name="idx"):
    """Images (magic 0x00000803) scaled to [0, 1] with a channel axis, plus labels (0x00000801)."""
    images = read_idx(images_path, expected_ndim=3)
    labels = read_idx(labels_path, expected_ndim=1)
    if len(images) != len(labels):
        raise DatasetFormatError(f"{len(images)} images but {len(labels)} labels")
    classes, y = np.unique(labels, return_inverse=True)
    X = images.astype(np.float64)[:, None] / 255.0
    return Dataset(X, y, len(classes), name)


# -- CSV -------------------------------------------------------------------


def load_csv(path_or_text, label_column="label", name="csv"):
    """Numeric feature columns plus one label column (default: ``label``,
    falling back to the last column).  Distinct labels map to classes in
    sorted order."""
    if isinstance(path_or_text, str) and "\n" not in path_or_text:
        with open(path_or_text, "rb") as fh:
            raw = fh.read()
    else:
        raw = path_or_text.encode() if isinstance(path_or_text, str) else bytes(path_or_text)
    lines = raw.splitlines(keepends=True)
    if not lines:
        raise DatasetFormatError("CSV is empty; expected a header row at byte offset 0")
    header = next(csv.reader(io.StringIO(lines[0].decode("utf-8"))))
    col = header.index(label_column) if label_column in header else len(header) - 1
    feats, labels = [], []
    offset = len(lines[0])
    for lineno, line in enumerate(lines[1:], start=2):
        text = line.decode("utf-8").strip()
        if text:
            row = next(csv.reader([text]))
            if len(row) != len(header):
                raise DatasetFormatError(
                    f"line {lineno} (byte offset {offset}): {len(row)} fields, header has {len(header)}"
                )
            try:
                feats.append([float(v) for i, v in enumerate(row) if i != col])
            except ValueError as exc:
                raise DatasetFormatError(f"line {lineno} (byte offset {offset}): {exc}") from exc
            labels.append(row[col])
        offset += len(line)
    if not labels:
        raise DatasetFormatError("CSV has a header but no data rows")
    classes, y = np.unique(np.array(labels), return_inverse=True)
    return Dataset(np.array(feats), y, len(classes), name)


def load_dataset(source, **kwargs):
    """Load a dataset from a generator name, a CSV path, or IDX image/label files.

    ``source`` may also be a mapping with ``generator`` (plus generator
    keyword arguments) or ``path`` (plus ``labels`` for IDX).
    """
    if isinstance(source, dict):
        kwargs = {**{k: v for k, v in source.items() if k not in ("generator", "path")}, **kwargs}
        source = source.get("generator") or source.get("path")
        if source is None:
            raise DatasetFormatError("dataset config needs 'generator' or 'path'")
    if source in GENERATORS:
        return GENERATORS[source](**kwargs)
    source = str(source)
    if source.lower().endswith(".csv"):
        return load_csv(source, **kwargs)
    labels = kwargs.pop("labels", None)
    if labels is None:
        raise DatasetFormatError(f"{source}: unknown generator; IDX images need a 'labels' file")
    return load_idx(source, labels, **kwargs)
