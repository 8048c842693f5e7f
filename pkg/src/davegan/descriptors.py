"""Periodic two-point correlation functions and descriptor-based error metrics."""

from __future__ import annotations

from typing import Sequence

import numpy as np

REFERENCE_PHASE = 1


def round_to_indicator(x, phase_levels: Sequence[float] = (0.0, 1.0)) -> np.ndarray:
    """Assign each pixel to its nearest phase level, ties going to the lower level.

    Returns an integer label image; ``labels == i`` is the indicator of phase i.
    """
    levels = np.asarray(sorted(phase_levels), dtype=np.float64)
    if levels.size == 0:
        raise ValueError("phase level set is empty")
    x = np.asarray(x, dtype=np.float64)
    if levels.size == 1:
        return np.zeros(x.shape, dtype=np.int64)
    # midpoints between neighbouring levels; a value equal to a midpoint stays below
    mids = 0.5 * (levels[:-1] + levels[1:])
    return np.searchsorted(mids, x, side="left").astype(np.int64)


def indicator(labels: np.ndarray, phase: int = REFERENCE_PHASE) -> np.ndarray:
    return (np.asarray(labels) == phase).astype(np.float64)


def s2(field: np.ndarray, phase: int | None = None) -> np.ndarray:
    """Periodic two-point autocorrelation S2[r] = mean_p I(p) I(p + r).

    ``field`` is either a binary indicator (``phase=None``) or a label image
    from :func:`round_to_indicator` together with the phase to correlate.
    """
    ind = np.asarray(field, dtype=np.float64) if phase is None else indicator(field, phase)
    if ind.ndim != 2:
        raise ValueError(f"expected a 2-d field, got shape {ind.shape}")
    f = np.fft.fft2(ind)
    corr = np.fft.ifft2(f * np.conj(f)) / ind.size
    return corr.real


def s2_bruteforce(ind: np.ndarray) -> np.ndarray:
    """Direct O(N^2) enumeration of the periodic autocorrelation, for checking :func:`s2`."""
    ind = np.asarray(ind, dtype=np.float64)
    h, w = ind.shape
    out = np.zeros((h, w))
    for dy in range(h):
        for dx in range(w):
            total = 0.0
            for y in range(h):
                for x in range(w):
                    total += ind[y, x] * ind[(y + dy) % h, (x + dx) % w]
            out[dy, dx] = total / (h * w)
    return out


def volume_fraction(field: np.ndarray, phase: int | None = None) -> float:
    ind = np.asarray(field, dtype=np.float64) if phase is None else indicator(field, phase)
    return float(ind.mean())


def descriptor_error(a: np.ndarray, b: np.ndarray) -> float:
    """Root-mean-square difference of two S2 maps over all displacements."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"S2 map shapes differ: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def structure_s2(x, phase_levels: Sequence[float] = (0.0, 1.0),
                 phase: int = REFERENCE_PHASE) -> np.ndarray:
    """Round a raw structure to phases and return the S2 map of ``phase``."""
    x = np.asarray(x)
    x = x.reshape(x.shape[-2:]) if x.ndim > 2 else x
    return s2(round_to_indicator(x, phase_levels), phase)


def error_rec(originals: Sequence, reconstructions: Sequence,
              phase_levels: Sequence[float] = (0.0, 1.0)) -> float:
    """Mean descriptor error between each original and its reconstruction."""
    if len(originals) != len(reconstructions):
        raise ValueError(f"{len(originals)} originals but {len(reconstructions)} reconstructions")
    if len(originals) == 0:
        raise ValueError("no structures given")
    errs = [descriptor_error(structure_s2(a, phase_levels), structure_s2(b, phase_levels))
            for a, b in zip(originals, reconstructions)]
    return float(np.mean(errs))


def error_gen(generated: Sequence, training_set: Sequence,
              phase_levels: Sequence[float] = (0.0, 1.0)) -> float:
    """Mean over generated samples of the descriptor error to the closest training sample."""
    if len(generated) == 0 or len(training_set) == 0:
        raise ValueError("generated and training sets must be non-empty")
    train = np.stack([structure_s2(t, phase_levels).ravel() for t in training_set])
    best = []
    for g in generated:
        diff = train - structure_s2(g, phase_levels).ravel()
        best.append(np.sqrt(np.mean(diff * diff, axis=1)).min())
    return float(np.mean(best))


def mean_pairwise_error(structures: Sequence, phase_levels: Sequence[float] = (0.0, 1.0)) -> float:
    """Average descriptor error over all unordered pairs; zero signals identical statistics."""
    maps = [structure_s2(s, phase_levels) for s in structures]
    n = len(maps)
    if n < 2:
        raise ValueError("need at least two structures")
    errs = [descriptor_error(maps[i], maps[j]) for i in range(n) for j in range(i + 1, n)]
    return float(np.mean(errs))
