"""Counter-based 64-bit hashing used wherever reproducible randomness is
needed without sharing RNG state (texture noise, per-pixel jitter, stage seeds).

The mixer is splitmix64's finalizer:

    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)

with the golden-ratio increment 0x9E3779B97F4A7C15 used to combine words.
"""

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def mix64(z):
    """splitmix64 finalizer on a uint64 array (wrapping arithmetic)."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        z = z ^ (z >> np.uint64(31))
    return z


def hash_words(*words):
    """Hash a sequence of integer words (scalars or broadcastable arrays)."""
    h = np.uint64(0)
    with np.errstate(over="ignore"):
        for w in words:
            w = np.asarray(w)
            if w.dtype.kind == "i":
                w = w.astype(np.int64).view(np.uint64) if w.ndim else np.uint64(int(w) & _MASK)
            else:
                w = w.astype(np.uint64)
            h = mix64(h + GOLDEN + w)
    return h


def to_unit(h):
    """Map uint64 hashes to floats in [0, 1) using the top 53 bits."""
    return (np.asarray(h, dtype=np.uint64) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def derive_seed(seed, stage):
    """Per-stage seed from a global seed and a stage name."""
    code = int.from_bytes(stage.encode("utf-8")[:8].ljust(8, b"\0"), "little")
    return int(hash_words(int(seed) & _MASK, code, len(stage)))
