"""
Diagnostics for trained tokenizers: local attention asymmetry of a decoder,
first-row vs remaining-rows reconstruction error, and per-image error tables.
"""
from dataclasses import dataclass

import numpy as np
import pandas as pd

from models import AliTokError
from models.autodiff import no_grad
from models.tokenizer import decode_stage1, decode_stage2, encode

# (row offset, col offset) in raster order; the first four precede the centre.
NEIGHBOR_OFFSETS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)]
CAUSAL_ORDER = [(-1, -1), (-1, 0), (-1, 1), (0, -1)]
CAUSAL_OFFSETS = set(CAUSAL_ORDER)
ROW_ERROR_COLUMNS = ["image", "mse", "row1_mse", "rest_mse"]


class AnalysisError(AliTokError, ValueError):
    pass


@dataclass
class AsymmetryReport:
    grid: np.ndarray
    per_head: np.ndarray
    causal_share: float
    tokens: int

    def to_frame(self):
        rows = [
            {"dr": dr, "dc": dc, "mass": float(self.grid[dr + 1, dc + 1])}
            for dr, dc in NEIGHBOR_OFFSETS
        ]
        frame = pd.DataFrame(rows, columns=["dr", "dc", "mass"])
        frame["causal_share"] = self.causal_share
        return frame


def causal_share(grid):
    """Mass on the raster-preceding neighbours over mass on all eight neighbours."""
    grid = np.asarray(grid, dtype=np.float64)
    # mirrored offsets summed in the same order, so a point-symmetric grid gives exactly 0.5
    causal = 0.0
    anticausal = 0.0
    for dr, dc in CAUSAL_ORDER:
        causal += grid[dr + 1, dc + 1]
        anticausal += grid[1 - dr, 1 - dc]
    ring = causal + anticausal
    return float(causal / ring) if ring > 0 else 0.5


def neighborhood_grid(weights, grid_offset, H, W, scope="all"):
    """
    Mean 3x3 attention neighbourhood per head.

    ``weights`` is [samples, heads, S, S] with grid token (r, c) at position
    grid_offset + r*W + c. Each token's nine cells are renormalized over the
    cells that exist (edge tokens have fewer), then averaged over tokens and
    samples. ``scope='interior'`` keeps only tokens with all eight neighbours.
    """
    if H < 3 or W < 3:
        raise AnalysisError(f"neighbourhood analysis needs at least a 3x3 grid, got {H}x{W}")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 4 or weights.shape[-1] < grid_offset + H * W:
        raise AnalysisError(f"attention weights {weights.shape} do not cover a {H}x{W} grid at offset {grid_offset}")

    rows, cols = np.divmod(np.arange(H * W), W)
    if scope == "interior":
        keep = (rows > 0) & (rows < H - 1) & (cols > 0) & (cols < W - 1)
        rows, cols = rows[keep], cols[keep]
    elif scope != "all":
        raise AnalysisError(f"unknown token scope {scope!r}")
    queries = grid_offset + rows * W + cols

    cells = np.zeros(weights.shape[:2] + (len(queries), 9))
    for slot, (dr, dc) in enumerate(NEIGHBOR_OFFSETS):
        nr, nc = rows + dr, cols + dc
        valid = (nr >= 0) & (nr < H) & (nc >= 0) & (nc < W)
        keys = grid_offset + np.clip(nr, 0, H - 1) * W + np.clip(nc, 0, W - 1)
        mass = weights[:, :, queries, keys]
        cells[..., slot] = np.where(valid, mass, 0.0)
    totals = cells.sum(axis=-1, keepdims=True)
    cells = np.divide(cells, totals, out=np.zeros_like(cells), where=totals > 0)
    per_head = cells.mean(axis=(0, 2)).reshape(-1, 3, 3)
    return per_head, len(queries)


def asymmetry_from_weights(weights, grid_offset, H, W, scope="all"):
    per_head, tokens = neighborhood_grid(weights, grid_offset, H, W, scope)
    grid = per_head.mean(axis=0)
    return AsymmetryReport(grid=grid, per_head=per_head, causal_share=causal_share(grid), tokens=tokens)


def attention_asymmetry(model, images, stage=2, layer_select=None, scope="all"):
    """Decoder attention asymmetry over sample images; default is the final layer."""
    cfg = model.cfg
    sink = []
    with no_grad():
        seq = encode(images, model)
        if stage == 2:
            decode_stage2(seq, model, attn_sink=sink)
            offset = model.decoder2.buffer_count + cfg.K
        else:
            decode_stage1(seq, model, attn_sink=sink)
            offset = cfg.K
    layers = [-1] if layer_select is None else list(layer_select)
    selected = np.concatenate([sink[i].data for i in layers], axis=0)
    return asymmetry_from_weights(selected, offset, cfg.H, cfg.W, scope)


def split_row_errors(recon, target, f):
    """(first patch-row MSE, remaining-rows MSE) over [B, h, w, 3] images."""
    recon = np.asarray(recon, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if recon.shape != target.shape:
        raise AnalysisError(f"reconstruction {recon.shape} and target {target.shape} differ")
    sq = (recon - target) ** 2
    row1 = float(sq[..., :f, :, :].mean())
    rest = float(sq[..., f:, :, :].mean()) if recon.shape[-3] > f else 0.0
    return row1, rest


def reconstruct_batches(model, images, stage, batch_size=32):
    outputs = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            seq = encode(images[start:start + batch_size], model)
            recon = decode_stage2(seq, model) if stage == 2 else decode_stage1(seq, model)
            outputs.append(recon.image.data)
    return np.concatenate(outputs, axis=0)


def first_row_error(model, images, stage=1):
    recon = reconstruct_batches(model, images, stage)
    return split_row_errors(recon, images, model.cfg.f)


def row_error_frame(recon, target, f):
    """Per-image mse/row1/rest table with a trailing 'mean' summary row."""
    rows = []
    for i, (r, t) in enumerate(zip(recon, target)):
        row1, rest = split_row_errors(r, t, f)
        rows.append({"image": str(i), "mse": float(np.mean((np.asarray(r, np.float64) - t) ** 2)),
                     "row1_mse": row1, "rest_mse": rest})
    frame = pd.DataFrame(rows, columns=ROW_ERROR_COLUMNS)
    summary = {"image": "mean", **{c: float(frame[c].mean()) for c in ROW_ERROR_COLUMNS[1:]}}
    return pd.concat([frame, pd.DataFrame([summary])], ignore_index=True)
