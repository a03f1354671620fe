"""Fully-connected CRF refinement by synchronous mean-field inference.

The pairwise potential couples every pixel pair with a Potts penalty
weighted by two Gaussian kernels: an appearance kernel over position and
color, and a smoothness kernel over position only. Message passing is
exact brute force, evaluated in row blocks so the full N x N kernel is
never materialized; images above 128x128 fall back to a truncated-window
approximation with radius 3x the widest spatial bandwidth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DataError

PROB_FLOOR = 1e-12
BRUTE_FORCE_MAX_PIXELS = 128 * 128
_BLOCK_ROWS = 1024


@dataclass(frozen=True)
class CrfParams:
    w_appearance: float = 3.0
    w_smoothness: float = 1.0
    theta_alpha: float = 20.0  # appearance spatial bandwidth, pixels
    theta_beta: float = 13.0  # appearance color bandwidth, 0..255 units
    theta_gamma: float = 3.0  # smoothness spatial bandwidth, pixels
    iterations: int = 5

    def __post_init__(self):
        if min(self.theta_alpha, self.theta_beta, self.theta_gamma) <= 0:
            raise DataError("CRF bandwidths must be positive")
        if self.iterations < 0:
            raise DataError("iteration count must be >= 0")
        if self.w_appearance < 0 or self.w_smoothness < 0:
            raise DataError("kernel weights must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "CrfParams":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def _features(shape, color):
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    pos = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    col = np.asarray(color, dtype=np.float64).reshape(h * w, -1)
    return pos, col


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d2, 0.0)


def _kernel_block(rows, pos, col, params: CrfParams) -> np.ndarray:
    d2p = _sq_dists(pos[rows], pos)
    k = params.w_smoothness * np.exp(-d2p / (2.0 * params.theta_gamma**2))
    d2c = _sq_dists(col[rows], col)
    k += params.w_appearance * np.exp(
        -d2p / (2.0 * params.theta_alpha**2) - d2c / (2.0 * params.theta_beta**2)
    )
    return k


def _check_shapes(probs, color):
    probs = np.asarray(probs, dtype=np.float64)
    color = np.asarray(color)
    if probs.ndim != 3:
        raise DataError(f"probability map must be HxWxC, got {probs.shape}")
    if color.shape[:2] != probs.shape[:2]:
        raise DataError(f"color {color.shape[:2]} does not match probs {probs.shape[:2]}")
    return probs, color


def crf_energy(labeling: np.ndarray, unary_probs: np.ndarray, color: np.ndarray,
               params: CrfParams) -> float:
    """Energy of a labeling: unary -log p terms plus Potts-weighted kernels.

    The pairwise sum runs over unordered pixel pairs (each pair counted once).
    """
    probs, color = _check_shapes(unary_probs, color)
    labels = labeling.labels if hasattr(labeling, "labels") else np.asarray(labeling)
    if labels.shape != probs.shape[:2]:
        raise DataError(f"labeling {labels.shape} does not match probs {probs.shape[:2]}")
    h, w, _ = probs.shape
    flat_labels = labels.ravel().astype(np.intp)
    picked = np.take_along_axis(probs.reshape(h * w, -1), flat_labels[:, None], axis=1)
    unary = float(-np.log(np.maximum(picked, PROB_FLOOR)).sum())

    pos, col = _features((h, w), color)
    pair = 0.0
    n = h * w
    for start in range(0, n, _BLOCK_ROWS):
        rows = np.arange(start, min(start + _BLOCK_ROWS, n))
        k = _kernel_block(rows, pos, col, params)
        neq = flat_labels[rows][:, None] != flat_labels[None, :]
        pair += float((k * neq).sum())
    return unary + pair / 2.0  # halve the double-counted ordered pairs


# full kernel matrices up to this pixel count are cached across iterations
# (64x64 needs 4096^2 * 8 B = 134 MB)
_PRECOMPUTE_MAX_PIXELS = 4096


def _brute_force_messages(q_flat, pos, col, params, kernel=None):
    n = len(q_flat)
    if kernel is not None:
        filtered = kernel @ q_flat
    else:
        filtered = np.empty_like(q_flat)
        for start in range(0, n, _BLOCK_ROWS):
            rows = np.arange(start, min(start + _BLOCK_ROWS, n))
            filtered[rows] = _kernel_block(rows, pos, col, params) @ q_flat
    filtered -= (params.w_appearance + params.w_smoothness) * q_flat  # drop self term
    return filtered


def _windowed_messages(q, color, params):
    h, w, c = q.shape
    radius = int(np.ceil(3.0 * max(params.theta_alpha, params.theta_gamma)))
    col = np.asarray(color, dtype=np.float64)
    filtered = np.zeros_like(q)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy == 0 and dx == 0:
                continue
            d2p = float(dy * dy + dx * dx)
            w_s = params.w_smoothness * np.exp(-d2p / (2.0 * params.theta_gamma**2))
            w_a = params.w_appearance * np.exp(-d2p / (2.0 * params.theta_alpha**2))
            if w_s + w_a < 1e-12:
                continue
            ys0, ys1 = max(0, dy), min(h, h + dy)
            xs0, xs1 = max(0, dx), min(w, w + dx)
            dst = (slice(ys0, ys1), slice(xs0, xs1))
            src = (slice(ys0 - dy, ys1 - dy), slice(xs0 - dx, xs1 - dx))
            d2c = ((col[dst] - col[src]) ** 2).sum(axis=2)
            k = w_s + w_a * np.exp(-d2c / (2.0 * params.theta_beta**2))
            filtered[dst] += k[..., None] * q[src]
    return filtered


def refine_crf(unary_probs: np.ndarray, color: np.ndarray, params: CrfParams) -> np.ndarray:
    """Mean-field marginals after `params.iterations` synchronous updates.

    Each update filters the current marginals with the pairwise kernels,
    applies the Potts compatibility, and renormalizes against the unary
    energies; with zero kernel weights or zero iterations the input is
    returned unchanged.
    """
    probs, color = _check_shapes(unary_probs, color)
    if params.iterations == 0 or (params.w_appearance == 0 and params.w_smoothness == 0):
        return probs.copy()
    h, w, c = probs.shape
    unary = -np.log(np.maximum(probs, PROB_FLOOR))
    brute = h * w <= BRUTE_FORCE_MAX_PIXELS
    pos = col = kernel = None
    if brute:
        pos, col = _features((h, w), color)
        if h * w <= _PRECOMPUTE_MAX_PIXELS and params.iterations > 1:
            blocks = []
            for start in range(0, h * w, _BLOCK_ROWS):
                rows = np.arange(start, min(start + _BLOCK_ROWS, h * w))
                blocks.append(_kernel_block(rows, pos, col, params))
            kernel = np.vstack(blocks)

    q = probs.copy()
    for _ in range(params.iterations):
        if brute:
            filtered = _brute_force_messages(q.reshape(h * w, c), pos, col, params, kernel)
            filtered = filtered.reshape(h, w, c)
        else:
            filtered = _windowed_messages(q, color, params)
        # Potts compatibility: the message for label l is the filtered mass
        # of all competing labels
        messages = filtered.sum(axis=2, keepdims=True) - filtered
        z = -unary - messages
        z -= z.max(axis=2, keepdims=True)
        q = np.exp(z)
        q /= q.sum(axis=2, keepdims=True)
    return q
