"""Counter-based random streams.

Every Gaussian increment is a pure function of ``(key, noise_index, step)``
where ``key`` is derived from a seed and a tuple of hierarchical labels
(experiment / replica / inner replica ...).  Nothing depends on how many
values were drawn before, so results are independent of batching and of the
number of workers.

The mixing function is the SplitMix64 finalizer, which is a bijection on
64-bit integers.  Sibling labels under a common parent therefore never
collide.
"""
from __future__ import annotations

import hashlib

import numpy as np
from scipy.special import ndtri

__all__ = ["derive_stream", "derive_streams", "gaussian_increments", "mix64"]

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_SEED_SALT = 0x5851F42D4C957F2D
_COUNTER_SALT = 0xD1B54A32D192ED03


def _mix_int(z: int) -> int:
    z = (z + _GOLDEN) & _MASK
    z = ((z ^ (z >> 30)) * _M1) & _MASK
    z = ((z ^ (z >> 27)) * _M2) & _MASK
    return z ^ (z >> 31)


def mix64(z):
    """Vectorized SplitMix64 finalizer on ``uint64`` arrays."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = z + np.uint64(_GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def _label_int(label) -> int:
    if isinstance(label, (bool, np.bool_)):
        raise TypeError("boolean stream labels are ambiguous")
    if isinstance(label, (int, np.integer)):
        value = int(label)
        if value < 0 or value > _MASK:
            raise ValueError(f"integer label out of range: {label}")
        return value
    if isinstance(label, str):
        digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"unsupported stream label type: {type(label).__name__}")


def derive_stream(seed: int, *labels) -> int:
    """Deterministic 64-bit stream key from a seed and hierarchical labels.

    Label order matters: ``derive_stream(s, 1, 2) != derive_stream(s, 2, 1)``.
    """
    key = _mix_int(_label_int(seed) ^ _SEED_SALT)
    for label in labels:
        key = _mix_int(key ^ _mix_int(_label_int(label)))
    return key


def derive_streams(parent, labels) -> np.ndarray:
    """Vectorized one-level derivation: ``derive_stream`` child keys of ``parent``.

    ``parent`` (a key already produced by :func:`derive_stream`, or an array of
    them) and ``labels`` broadcast against each other.  For scalar integers
    ``derive_streams(derive_stream(s, *a), b) == derive_stream(s, *a, b)``.
    """
    parent = np.asarray(parent, dtype=np.uint64)
    labels = np.asarray(labels)
    if labels.dtype.kind not in "iu":
        raise TypeError("vectorized labels must be integers")
    if labels.dtype.kind == "i" and np.any(labels < 0):
        raise ValueError("integer labels must be non-negative")
    return mix64(parent ^ mix64(labels.astype(np.uint64)))


def _uniform53(bits: np.ndarray) -> np.ndarray:
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / (1 << 53))


def gaussian_increments(keys, n: int, steps: int, dt: float) -> np.ndarray:
    """Gaussian increments ``N(0, dt)`` of shape ``keys.shape + (steps, n)``.

    Entry ``[..., j, i]`` depends only on ``(key, i, j)``.
    """
    keys = np.asarray(keys, dtype=np.uint64)
    if n == 0 or steps == 0:
        return np.zeros(keys.shape + (steps, n))
    j = np.arange(steps, dtype=np.uint64)[:, None]
    i = np.arange(n, dtype=np.uint64)[None, :]
    counter = mix64(((i << np.uint64(32)) | j) ^ np.uint64(_COUNTER_SALT))
    bits = mix64(keys[..., None, None] ^ counter)
    return ndtri(_uniform53(bits)) * np.sqrt(dt)
