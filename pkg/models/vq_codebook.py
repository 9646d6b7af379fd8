"""
Vector quantization: nearest-code lookup with a straight-through estimator,
codebook/commitment loss, EMA usage tracking with dead-code reinitialization,
utilization, and CSV export of the codebook.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd

from models import AliTokError
from models.autodiff import DTYPES, Tensor, gather, parameter, stop_gradient
from models.nn_blocks import truncated_normal


class QuantizerError(AliTokError, ValueError):
    pass


@dataclass
class QuantizeResult:
    indices: np.ndarray
    quantized: Tensor
    ste_output: Tensor


@dataclass
class FrozenAssignment:
    """Code ids, straight-through offset and detached values pinned at a base point.

    Used by gradient checks: with assignments frozen the quantizer becomes a
    smooth function whose exact derivative is the straight-through one. Every
    stop-gradient operand is read from ``z`` and ``quantized`` (and, for the
    first-row loss, ``grid_rest``) so it stays constant under perturbation.
    """

    indices: np.ndarray
    offset: np.ndarray
    z: np.ndarray
    quantized: np.ndarray
    grid_rest: Optional[np.ndarray] = None


class Codebook:
    """V x d_c code vectors plus an EMA of how often each code is picked."""

    def __init__(self, vectors, usage_ema=None, dtype="F32"):
        vectors = np.asarray(vectors)
        if vectors.ndim != 2 or vectors.shape[0] < 2:
            raise QuantizerError(f"codebook needs shape [V>=2, d_c], got {vectors.shape}")
        if not np.all(np.isfinite(vectors)):
            raise QuantizerError("codebook vectors must be finite")
        self.vectors = parameter(vectors, dtype, name="codebook.vectors")
        self.usage_ema = (
            np.full(vectors.shape[0], 1.0 / vectors.shape[0])
            if usage_ema is None else np.asarray(usage_ema, dtype=np.float64).copy()
        )

    @classmethod
    def initialize(cls, size, dim, rng, dtype="F32"):
        return cls(truncated_normal(rng, (size, dim), std=1.0, dtype=dtype), dtype=dtype)

    @property
    def size(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]

    def lookup(self, indices):
        return gather(self.vectors, indices)


def nearest_codes(flat_z, vectors):
    """Argmin of squared distance per row; lowest index wins ties."""
    z = np.asarray(flat_z, dtype=np.float64)
    codes = np.asarray(vectors, dtype=np.float64)
    distances = ((z[:, None, :] - codes[None, :, :]) ** 2).sum(axis=-1)
    return np.argmin(distances, axis=1)


def quantize(z, cb, frozen=None):
    """Map z [..., d_c] to its nearest codes; ``ste_output`` carries z's gradient."""
    if z.shape[-1] != cb.dim:
        raise QuantizerError(f"quantize: z has dim {z.shape[-1]}, codebook has {cb.dim}")
    if not np.all(np.isfinite(z.data)):
        raise QuantizerError("quantize: z contains NaN or Inf")
    lead = tuple(z.shape[:-1])
    if frozen is None:
        indices = nearest_codes(z.data.reshape(-1, cb.dim), cb.vectors.data).reshape(lead)
    else:
        indices = frozen.indices
    quantized = cb.lookup(indices)
    if frozen is None:
        ste = z + stop_gradient(quantized - z)
    else:
        ste = z + Tensor(frozen.offset.astype(DTYPES[z.dtype]))
    return QuantizeResult(indices=indices, quantized=quantized, ste_output=ste)


def freeze_assignment(z, result):
    """Pin ``result``'s codes and straight-through offset for finite-difference checks."""
    return FrozenAssignment(
        indices=np.array(result.indices),
        offset=np.array(result.quantized.data - z.data, dtype=np.float64),
        z=np.array(z.data, dtype=np.float64),
        quantized=np.array(result.quantized.data, dtype=np.float64),
    )


def quant_loss(z, result, beta=0.25, frozen=None):
    """
    mean_i |sg(z_i) - q_i|^2 + beta * |z_i - sg(q_i)|^2.

    With ``frozen`` the detached operands are the base-point values it holds.
    """
    if beta < 0:
        raise QuantizerError("quant_loss: beta must be non-negative")
    q = result.quantized
    if frozen is None:
        detached_z, detached_q = stop_gradient(z), stop_gradient(q)
    else:
        detached_z = Tensor(frozen.z.astype(DTYPES[z.dtype]))
        detached_q = Tensor(frozen.quantized.astype(DTYPES[q.dtype]))
    codebook_term = detached_z - q
    commit_term = z - detached_q
    codebook_loss = (codebook_term * codebook_term).sum(axis=-1).mean()
    commit_loss = (commit_term * commit_term).sum(axis=-1).mean()
    return codebook_loss + commit_loss * beta


def update_usage_and_reinit(cb, batch_indices, batch_z, decay, threshold, rng, optimizer=None):
    """
    EMA the per-code pick frequency and overwrite dead codes with batch encodings.

    Returns the number of codes reinitialized. Reinitialized codes restart at
    uniform usage 1/V, and with ``optimizer`` their AdamW moments restart at zero.
    """
    if not 0.0 < decay < 1.0:
        raise QuantizerError(f"usage decay must lie in (0, 1), got {decay}")
    flat_idx = np.asarray(batch_indices).reshape(-1)
    flat_z = np.asarray(batch_z).reshape(-1, cb.dim)
    if flat_idx.size == 0 or flat_z.shape[0] == 0:
        raise QuantizerError("update_usage_and_reinit: empty batch")

    frequency = np.bincount(flat_idx, minlength=cb.size) / flat_idx.size
    cb.usage_ema = decay * cb.usage_ema + (1.0 - decay) * frequency

    dead = np.flatnonzero(cb.usage_ema < threshold)
    if dead.size == 0:
        return 0
    picks = rng.integers(0, flat_z.shape[0], size=dead.size)
    vectors = cb.vectors.data.copy()
    vectors[dead] = flat_z[picks].astype(vectors.dtype)
    cb.vectors.data = vectors
    cb.usage_ema[dead] = 1.0 / cb.size
    if optimizer is not None:
        optimizer.reset_rows(cb.vectors, dead)
    return int(dead.size)


def utilization(cb, corpus_indices):
    flat = np.asarray(corpus_indices).reshape(-1)
    if flat.size == 0:
        raise QuantizerError("utilization: empty corpus")
    return float(np.unique(flat).size) / float(cb.size)


def codebook_frame(cb):
    """DataFrame with columns index, usage, v0..v{d_c-1}."""
    frame = pd.DataFrame(
        cb.vectors.data.astype(np.float64),
        columns=[f"v{j}" for j in range(cb.dim)],
    )
    frame.insert(0, "usage", cb.usage_ema)
    frame.insert(0, "index", np.arange(cb.size))
    return frame


def export_codebook_csv(cb, path):
    frame = codebook_frame(cb)
    frame.to_csv(path, index=False)
    return frame
