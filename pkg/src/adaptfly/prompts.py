"""Prompt representations and their composition with model inputs.

Two prompt forms are supported: token prompts (a small matrix prepended to
a token sequence) and sparse visual prompts (additive RGB offsets at a
sparse set of pixel coordinates). Both are immutable values; every
operation here is a pure function and safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CompositionError, ConfigError

__all__ = [
    "TokenPrompt",
    "SparseVisualPrompt",
    "compose_tokens",
    "apply_svp",
    "sparsity_budget",
    "place_mask",
    "warp_svp",
]

# Fraction of coordinates that may leave the frame during a warp before a
# re-optimization is recommended.
DEFAULT_DROP_THRESHOLD = 0.25

_DTYPES = {"f32": np.float32, "f16": np.float16}


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TokenPrompt:
    """An L x d real matrix prepended to a token sequence.

    ``rows`` may be zero, in which case composition is the identity on the
    token sequence. Values are stored in the precision named by ``dtype``
    ("f32" or "f16").
    """

    values: np.ndarray
    dtype: str = "f32"

    def __eq__(self, other) -> bool:
        if not isinstance(other, TokenPrompt):
            return NotImplemented
        return self.dtype == other.dtype and np.array_equal(self.values, other.values)

    def __post_init__(self):
        if self.dtype not in _DTYPES:
            raise ConfigError(f"unknown token prompt dtype {self.dtype!r}")
        v = np.asarray(self.values, dtype=_DTYPES[self.dtype])
        if v.ndim != 2:
            raise CompositionError(f"token prompt values must be 2-D, got shape {v.shape}")
        if v.size and not np.all(np.isfinite(v)):
            raise CompositionError("token prompt values must be finite")
        object.__setattr__(self, "values", _readonly(v))

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @classmethod
    def zeros(cls, rows: int, dim: int, dtype: str = "f32") -> "TokenPrompt":
        return cls(np.zeros((rows, dim)), dtype=dtype)

    @classmethod
    def empty(cls, dim: int) -> "TokenPrompt":
        return cls(np.zeros((0, dim)))

    def astype(self, dtype: str) -> "TokenPrompt":
        return TokenPrompt(self.values, dtype=dtype)

    def to_dict(self) -> dict:
        """Serialize as {"rows", "dim", "values" (row-major), "dtype"}."""
        return {
            "rows": self.rows,
            "dim": self.dim,
            "values": [float(x) for x in self.values.ravel()],
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TokenPrompt":
        values = np.asarray(d["values"], dtype=np.float64).reshape(d["rows"], d["dim"])
        return cls(values, dtype=d["dtype"])


@dataclass(frozen=True, eq=False)
class SparseVisualPrompt:
    """Additive RGB offsets at K unique pixel coordinates of an H x W frame.

    ``coords`` is a (K, 2) integer array of (row, col) indices and
    ``offsets`` a (K, 3) float array of per-channel deltas. The implied
    binary mask has exactly K ones.
    """

    coords: np.ndarray
    offsets: np.ndarray
    frame_shape: tuple[int, int]

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseVisualPrompt):
            return NotImplemented
        return (
            self.frame_shape == other.frame_shape
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.offsets, other.offsets)
        )

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        offsets = np.asarray(self.offsets, dtype=np.float64).reshape(-1, 3)
        h, w = self.frame_shape
        if coords.shape[0] != offsets.shape[0]:
            raise CompositionError("coords and offsets must have equal length")
        if coords.size:
            if coords[:, 0].min() < 0 or coords[:, 0].max() >= h:
                raise CompositionError("prompt row index out of bounds")
            if coords[:, 1].min() < 0 or coords[:, 1].max() >= w:
                raise CompositionError("prompt col index out of bounds")
            flat = coords[:, 0] * w + coords[:, 1]
            if np.unique(flat).size != flat.size:
                raise CompositionError("prompt coordinates must be unique")
        if offsets.size and not np.all(np.isfinite(offsets)):
            raise CompositionError("prompt offsets must be finite")
        object.__setattr__(self, "coords", _readonly(coords))
        object.__setattr__(self, "offsets", _readonly(offsets))
        object.__setattr__(self, "frame_shape", (int(h), int(w)))

    @property
    def size(self) -> int:
        """Number of perturbed pixels K."""
        return self.coords.shape[0]

    @classmethod
    def zeros(cls, coords: np.ndarray, frame_shape: tuple[int, int]) -> "SparseVisualPrompt":
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
        return cls(coords, np.zeros((coords.shape[0], 3)), frame_shape)

    def to_dict(self) -> dict:
        """Serialize as {"shape", "coords", "offsets"}."""
        return {
            "shape": [int(s) for s in self.frame_shape],
            "coords": [[int(r), int(c)] for r, c in self.coords],
            "offsets": [[float(a) for a in row] for row in self.offsets],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SparseVisualPrompt":
        h, w = d["shape"]
        coords = np.asarray(d["coords"], dtype=np.int64).reshape(-1, 2)
        offsets = np.asarray(d["offsets"], dtype=np.float64).reshape(-1, 3)
        return cls(coords, offsets, (h, w))


def compose_tokens(prompt: TokenPrompt, seq: np.ndarray) -> np.ndarray:
    """Prepend prompt rows to a token sequence.

    Returns a new (L + N) x d matrix: prompt rows first, in order, then the
    sequence unchanged. Neither input is mutated.
    """
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2:
        raise CompositionError(f"token sequence must be 2-D, got shape {seq.shape}")
    if prompt.rows == 0:
        # Identity on the sequence regardless of the prompt's nominal dim.
        return seq.copy()
    if prompt.dim != seq.shape[1]:
        raise CompositionError(
            f"prompt dim {prompt.dim} does not match sequence dim {seq.shape[1]}"
        )
    return np.vstack([np.asarray(prompt.values, dtype=np.float64), seq])


def apply_svp(x: np.ndarray, p: SparseVisualPrompt) -> np.ndarray:
    """Add the sparse offsets to an image and clamp to [0, 1].

    Pixels outside ``p.coords`` are returned bit-identical to the input.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[:2] != p.frame_shape or x.ndim != 3 or x.shape[2] != 3:
        raise CompositionError(
            f"image shape {x.shape} does not match prompt frame {p.frame_shape}"
        )
    out = x.copy()
    if p.size:
        r, c = p.coords[:, 0], p.coords[:, 1]
        out[r, c, :] = np.clip(out[r, c, :] + p.offsets, 0.0, 1.0)
    return out


def sparsity_budget(rho: float, height: int, width: int) -> int:
    """Number of prompt pixels for sparsity ratio rho on an H x W frame.

    Returns floor(rho * H * W), but at least 1 whenever rho > 0 and the
    frame is non-empty.
    """
    if not (0.0 <= rho <= 1.0):
        raise ConfigError(f"sparsity ratio must lie in [0, 1], got {rho}")
    # Small epsilon guards against the product landing just below an integer.
    k = int(math.floor(rho * height * width + 1e-9))
    if rho > 0 and height * width >= 1:
        k = max(k, 1)
    return k


def place_mask(u: np.ndarray, k: int) -> np.ndarray:
    """Coordinates of the k most uncertain pixels, sorted row-major.

    Ties are broken by ascending row-major index, so the result is a pure
    function of the map.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2:
        raise ConfigError(f"uncertainty map must be 2-D, got shape {u.shape}")
    h, w = u.shape
    if k > h * w:
        raise ConfigError(f"budget {k} exceeds pixel count {h * w}")
    if k < 0:
        raise ConfigError("budget must be non-negative")
    # Stable sort on descending value keeps row-major order among ties.
    order = np.argsort(-u.ravel(), kind="stable")[:k]
    order.sort()
    return np.stack(np.unravel_index(order, (h, w)), axis=1).astype(np.int64)


def warp_svp(
    p: SparseVisualPrompt,
    motion: tuple[int, int],
    drop_threshold: float = DEFAULT_DROP_THRESHOLD,
) -> tuple[SparseVisualPrompt, bool]:
    """Translate prompt coordinates by (dy, dx), dropping those that exit.

    Surviving coordinates keep their offsets exactly. The refresh flag is
    true when strictly more than ``drop_threshold`` of the coordinates were
    dropped, signalling that the prompt should be re-optimized.
    """
    dy, dx = int(motion[0]), int(motion[1])
    h, w = p.frame_shape
    if p.size == 0:
        return p, False
    shifted = p.coords + np.array([dy, dx], dtype=np.int64)
    keep = (
        (shifted[:, 0] >= 0)
        & (shifted[:, 0] < h)
        & (shifted[:, 1] >= 0)
        & (shifted[:, 1] < w)
    )
    dropped_frac = 1.0 - keep.sum() / p.size
    warped = SparseVisualPrompt(shifted[keep], p.offsets[keep], p.frame_shape)
    return warped, bool(dropped_frac > drop_threshold)
