"""Mapping datasets: (input, pre-affine target) samples for one normalization layer.

A mapping dataset pairs raw pre-normalization activations ``x`` with the
normalization output after the per-channel affine transform has been
analytically removed, ``y_pre = (y - b) / (w + eps)``. The module also provides
the forward LayerNorm reference, a self-contained synthetic generator that
reproduces the qualitative depth behaviours (near-linear early, S-shaped deep),
the 90/10 sampling protocol, and a binary on-disk format.

File format ("SNMAP1", little-endian)::

    magic   6 bytes  b"SNMAP1"
    u16     layer_id byte length, then utf-8 layer_id
    u8      split tag   (0=full, 1=train, 2=val)
    u8      provenance  (0=synthetic, 1=extracted)
    u64     point count n
    f64     max_abs_x (validated against the columns on load)
    f64*n   x column
    f64*n   y_pre column
    u32     CRC32 of everything above

A lossless CSV alternative (header ``x,y_pre``) is selected by file suffix.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "MappingDataset",
    "AffineParams",
    "MappingFileError",
    "layernorm_forward",
    "pre_affine_invert",
    "synth_mappings",
    "sample_and_split",
    "save_mappings",
    "load_mappings",
    "SPLIT_TAGS",
    "PROVENANCES",
]

SPLIT_TAGS = ("full", "train", "val")
PROVENANCES = ("synthetic", "extracted")

_MAGIC = b"SNMAP1"


class MappingFileError(ValueError):
    """Malformed or corrupted mapping file."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class MappingDataset:
    """Immutable paired samples for one layer.

    ``x`` holds pre-normalization activations, ``y`` the pre-affine targets.
    Arrays are read-only so datasets can be shared across evaluation workers.
    """

    layer_id: str
    x: np.ndarray
    y: np.ndarray
    split_tag: str = "full"
    provenance: str = "synthetic"

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", _readonly(self.x))
        object.__setattr__(self, "y", _readonly(self.y))
        if self.x.shape != self.y.shape or self.x.ndim != 1:
            raise ValueError("x and y must be 1-D arrays of equal length")
        if self.x.size == 0:
            raise ValueError("dataset must contain at least one point")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise ValueError("dataset values must be finite")
        if self.split_tag not in SPLIT_TAGS:
            raise ValueError(f"split_tag must be one of {SPLIT_TAGS}")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"provenance must be one of {PROVENANCES}")

    @property
    def count(self) -> int:
        return int(self.x.size)

    @property
    def max_abs_x(self) -> float:
        return float(np.max(np.abs(self.x)))


@dataclass(frozen=True)
class AffineParams:
    """Per-channel affine weights/biases and the numerical-stability epsilon."""

    w: np.ndarray
    b: np.ndarray
    eps: float = 1e-6

    def __post_init__(self) -> None:
        object.__setattr__(self, "w", _readonly(self.w))
        object.__setattr__(self, "b", _readonly(self.b))
        if self.w.shape != self.b.shape or self.w.ndim != 1:
            raise ValueError("w and b must be 1-D arrays of equal length")
        if not self.eps > 0:
            raise ValueError("eps must be positive")

    @property
    def d(self) -> int:
        return int(self.w.size)

    @classmethod
    def identity(cls, d: int, eps: float = 1e-6) -> "AffineParams":
        return cls(np.ones(d), np.zeros(d), eps)


def layernorm_forward(x_token: np.ndarray, params: AffineParams) -> np.ndarray:
    """Normalize one token (or a batch of tokens, last axis = features).

    Uses the token-wise mean and population (divide-by-d) variance:
    ``y_i = (x_i - mu) / sqrt(var + eps) * w_i + b_i``.
    """
    x = np.asarray(x_token, dtype=np.float64)
    if x.shape[-1] != params.d:
        raise ValueError(f"token length {x.shape[-1]} != d={params.d}")
    if params.d < 2:
        raise ValueError("feature dimension must be >= 2")
    mu = x.mean(axis=-1, keepdims=True)
    var = np.square(x - mu).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + params.eps) * params.w + params.b


def pre_affine_invert(y, w, b, eps: float = 1e-6):
    """Remove the affine transform: ``(y - b) / (w + eps)``. Vectorizes over y."""
    w = np.asarray(w, dtype=np.float64)
    denom = w + eps
    if np.any(denom == 0.0):
        raise ZeroDivisionError("w + eps vanishes for at least one channel")
    return (np.asarray(y, dtype=np.float64) - b) / denom


# --- synthetic generation -------------------------------------------------------

def _token_activations(profile: str, d: int, n_tokens: int, rng: np.random.Generator,
                       amplitude: float) -> np.ndarray:
    """Raw per-token activations whose normalization produces the target mapping
    shape. Linear tokens are plain Gaussians. S-shaped tokens carry a handful of
    large-magnitude entries whose scale varies log-uniformly across tokens, so
    the token statistics compress the tails onto a saturating curve with level
    ~ sqrt(d / n_spikes) ~ ``amplitude``. The mixed profile bends more gently."""
    if profile == "linear":
        return rng.normal(0.0, 1.0, size=(n_tokens, d))
    if profile == "s-shaped":
        base_scale, lo, hi = 0.6, 3.5, 25.0
    elif profile == "mixed":
        base_scale, lo, hi = 0.85, 2.0, 6.0
    else:
        raise ValueError(f"unknown profile {profile!r}")
    base = rng.normal(0.0, base_scale, size=(n_tokens, d))
    n_spikes = max(1, round(d / amplitude**2))
    magnitude = np.exp(rng.uniform(np.log(lo), np.log(hi), size=(n_tokens, 1)))
    signs = rng.choice([-1.0, 1.0], size=(n_tokens, n_spikes))
    cols = np.argsort(rng.random((n_tokens, d)), axis=1)[:, :n_spikes]
    rows = np.arange(n_tokens)[:, None]
    base[rows, cols] = magnitude * signs
    return base


def synth_mappings(profile: str, d: int, n_tokens: int, params: AffineParams,
                   rng: np.random.Generator, layer_id: str = "synthetic",
                   amplitude: float = 2.5) -> MappingDataset:
    """Generate a pooled (x, y_pre) mapping by running the LayerNorm forward on
    synthetic tokens and inverting the affine transform, exactly as extraction
    from a real model would. Deterministic given the generator state."""
    tokens = _token_activations(profile, d, n_tokens, rng, amplitude)
    y = layernorm_forward(tokens, params)
    y_pre = pre_affine_invert(y, params.w, params.b, params.eps)
    return MappingDataset(layer_id, tokens.ravel(), y_pre.ravel())


def sample_and_split(points: MappingDataset, n: int = 50_000,
                     train_fraction: float = 0.9,
                     rng: np.random.Generator | None = None,
                     ) -> tuple[MappingDataset, MappingDataset]:
    """Uniformly sample ``n`` points without replacement and split 90/10.

    The train split gets ``floor(train_fraction * n)`` points, validation the
    rest; the two are disjoint by construction and deterministic given the rng.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if points.count < n:
        raise ValueError(f"need at least {n} points, dataset has {points.count}")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    chosen = rng.choice(points.count, size=n, replace=False)
    n_train = int(n * train_fraction)
    if n_train == 0 or n_train == n:
        raise ValueError("split leaves one side empty")
    tr, va = chosen[:n_train], chosen[n_train:]
    mk = lambda idx, tag: MappingDataset(points.layer_id, points.x[idx], points.y[idx],
                                         split_tag=tag, provenance=points.provenance)
    return mk(tr, "train"), mk(va, "val")


# --- persistence ----------------------------------------------------------------

def save_mappings(dataset: MappingDataset, path) -> None:
    """Write a dataset to ``path``; suffix ``.csv`` selects the text format."""
    path = Path(path)
    if path.suffix == ".csv":
        lines = ["x,y_pre"]
        lines += [f"{repr(float(a))},{repr(float(b))}" for a, b in zip(dataset.x, dataset.y)]
        path.write_text("\n".join(lines) + "\n")
        return
    head = bytearray()
    head += _MAGIC
    lid = dataset.layer_id.encode("utf-8")
    head += struct.pack("<H", len(lid)) + lid
    head += struct.pack("<BB", SPLIT_TAGS.index(dataset.split_tag),
                        PROVENANCES.index(dataset.provenance))
    head += struct.pack("<Qd", dataset.count, dataset.max_abs_x)
    body = dataset.x.astype("<f8").tobytes() + dataset.y.astype("<f8").tobytes()
    crc = zlib.crc32(bytes(head) + body) & 0xFFFFFFFF
    path.write_bytes(bytes(head) + body + struct.pack("<I", crc))


def load_mappings(path) -> MappingDataset:
    """Load a dataset written by :func:`save_mappings`.

    Binary files are CRC-checked; any non-finite row is rejected with its row
    number. CSV files take their layer id from the file stem.
    """
    path = Path(path)
    if path.suffix == ".csv":
        return _load_csv(path)
    raw = path.read_bytes()
    if len(raw) < len(_MAGIC) + 4 or raw[: len(_MAGIC)] != _MAGIC:
        raise MappingFileError(f"{path}: not an SNMAP1 file")
    stored_crc = struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != stored_crc:
        raise MappingFileError(f"{path}: checksum mismatch")
    off = len(_MAGIC)
    (lid_len,) = struct.unpack_from("<H", raw, off)
    off += 2
    layer_id = raw[off : off + lid_len].decode("utf-8")
    off += lid_len
    split_i, prov_i = struct.unpack_from("<BB", raw, off)
    off += 2
    count, max_abs = struct.unpack_from("<Qd", raw, off)
    off += 16
    expected = off + 16 * count + 4
    if len(raw) != expected:
        raise MappingFileError(f"{path}: truncated ({len(raw)} bytes, expected {expected})")
    x = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
    y = np.frombuffer(raw, dtype="<f8", count=count, offset=off + 8 * count)
    _reject_nonfinite(path, x, y)
    try:
        split_tag, provenance = SPLIT_TAGS[split_i], PROVENANCES[prov_i]
    except IndexError:
        raise MappingFileError(f"{path}: unknown split/provenance tag") from None
    ds = MappingDataset(layer_id, x, y, split_tag=split_tag, provenance=provenance)
    if ds.max_abs_x != max_abs:
        raise MappingFileError(f"{path}: stored max|x|={max_abs} != recomputed {ds.max_abs_x}")
    return ds


def _load_csv(path: Path) -> MappingDataset:
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != "x,y_pre":
        raise MappingFileError(f"{path}: expected header 'x,y_pre'")
    xs, ys = [], []
    for row, line in enumerate(lines[1:], start=1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise MappingFileError(f"{path}: row {row}: expected two columns")
        try:
            a, b = float(parts[0]), float(parts[1])
        except ValueError:
            raise MappingFileError(f"{path}: row {row}: malformed number") from None
        if not (np.isfinite(a) and np.isfinite(b)):
            raise MappingFileError(f"{path}: row {row}: non-finite value")
        xs.append(a)
        ys.append(b)
    return MappingDataset(path.stem, np.array(xs), np.array(ys))


def _reject_nonfinite(path: Path, x: np.ndarray, y: np.ndarray) -> None:
    bad = ~(np.isfinite(x) & np.isfinite(y))
    if bad.any():
        row = int(np.argmax(bad))
        raise MappingFileError(f"{path}: row {row}: non-finite value")
