"""
Transformer building blocks shared by the tokenizer and the AR generator:
RMSNorm, multi-head attention (causal or bidirectional, optional QK-Norm and
rotary embeddings, optional KV cache), SiLU MLP and the pre-norm block.

Activations are laid out [batch, seq, width]; inside attention heads are a
leading batch axis, [batch, heads, seq, head_dim].
"""
from dataclasses import dataclass
from enum import Enum

import numpy as np

from models import AliTokError
from models.autodiff import DTYPES, Tensor, concat, parameter, silu


class RopeConfigError(AliTokError, ValueError):
    pass


class AttentionMaskError(AliTokError, RuntimeError):
    pass


class AttentionMaskKind(Enum):
    BIDIRECTIONAL = "bidirectional"
    CAUSAL = "causal"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        return cls(str(value).lower())


class RopeMode(Enum):
    NONE = "none"
    ONE_D = "1d"
    TWO_D = "2d"


@dataclass
class BlockConfig:
    width: int
    heads: int
    mlp_ratio: float = 4.0
    qk_norm: bool = False
    eps: float = 1e-6

    def __post_init__(self):
        if self.width <= 0 or self.heads <= 0 or self.width % self.heads:
            raise ValueError(f"BlockConfig: width {self.width} must be divisible by heads {self.heads}")

    @property
    def head_dim(self):
        return self.width // self.heads

    @property
    def hidden(self):
        return int(round(self.mlp_ratio * self.width))


@dataclass
class RopeConfig:
    """
    Rotary table for one contiguous run of sequence slots.

    ``position_map`` holds one coordinate per slot (OneD), a (row, col) pair per
    slot (TwoD), or is only used for its length (NONE: slots left unrotated).
    """

    mode: RopeMode
    head_dim: int
    position_map: np.ndarray
    base: float = 10000.0

    def __post_init__(self):
        self.mode = RopeMode(self.mode)
        self.position_map = np.asarray(self.position_map, dtype=np.int64)
        if self.head_dim % 2:
            raise RopeConfigError(f"rotary head_dim must be even, got {self.head_dim}")
        if self.mode is RopeMode.TWO_D:
            if self.head_dim % 4:
                raise RopeConfigError(f"2D rotary head_dim must be divisible by 4, got {self.head_dim}")
            if self.position_map.ndim != 2 or self.position_map.shape[-1] != 2:
                raise RopeConfigError("2D rotary positions need a (row, col) pair per slot")
        elif self.mode is RopeMode.ONE_D and self.position_map.ndim != 1:
            raise RopeConfigError("1D rotary positions need one coordinate per slot")
        if self.position_map.size and self.position_map.min() < 0:
            raise RopeConfigError("rotary coordinates must be non-negative")

    def __len__(self):
        return int(self.position_map.shape[0])

    def angles(self):
        """[seq, head_dim/2] rotation angle for every channel pair."""
        pairs = self.head_dim // 2
        if self.mode is RopeMode.NONE:
            return np.zeros((len(self), pairs))
        if self.mode is RopeMode.ONE_D:
            theta = self.base ** (-2.0 * np.arange(pairs) / self.head_dim)
            return self.position_map[:, None] * theta[None, :]
        axis_pairs = pairs // 2
        theta = self.base ** (-2.0 * np.arange(axis_pairs) / (self.head_dim // 2))
        rows = self.position_map[:, :1] * theta[None, :]
        cols = self.position_map[:, 1:] * theta[None, :]
        return np.concatenate([rows, cols], axis=1)


class RopeLayout:
    """Several RopeConfig segments laid end to end along the sequence."""

    def __init__(self, segments):
        self.segments = [s for s in segments if len(s)]
        dims = {s.head_dim for s in self.segments}
        if len(dims) > 1:
            raise RopeConfigError(f"rotary segments disagree on head_dim: {sorted(dims)}")
        self.head_dim = dims.pop() if dims else 0
        self._angles = (
            np.concatenate([s.angles() for s in self.segments], axis=0)
            if self.segments else np.zeros((0, 0))
        )

    def __len__(self):
        return int(self._angles.shape[0])

    def angles(self):
        return self._angles


def apply_rope(x, rope, start=0):
    """
    Rotate consecutive channel pairs of ``x`` [..., seq, head_dim].

    ``start`` selects rows [start, start + seq) of the rotary table, which is how
    cached decoding rotates the new positions only.
    """
    seq, head_dim = x.shape[-2], x.shape[-1]
    if head_dim % 2:
        raise RopeConfigError(f"rotary head_dim must be even, got {head_dim}")
    table = rope.angles()
    if start + seq > table.shape[0]:
        raise RopeConfigError(
            f"rotary table covers {table.shape[0]} positions, asked for [{start}, {start + seq})"
        )
    if table.shape[1] != head_dim // 2:
        raise RopeConfigError(f"rotary table built for head_dim {2 * table.shape[1]}, got {head_dim}")
    dtype = DTYPES[x.dtype]
    angles = table[start:start + seq]
    cos = Tensor(np.cos(angles).astype(dtype))
    sin = Tensor(np.sin(angles).astype(dtype))

    lead = tuple(x.shape[:-1])
    pairs = x.reshape(lead + (head_dim // 2, 2))
    even = pairs[..., 0]
    odd = pairs[..., 1]
    rot_even = even * cos - odd * sin
    rot_odd = even * sin + odd * cos
    stacked = concat(
        [rot_even.reshape(lead + (head_dim // 2, 1)), rot_odd.reshape(lead + (head_dim // 2, 1))],
        axis=-1,
    )
    return stacked.reshape(lead + (head_dim,))


def rmsnorm(x, gain, eps=1e-6):
    """gain * x / sqrt(mean(x^2) + eps) along the last axis."""
    if x.shape[-1] == 0:
        raise ValueError("rmsnorm: zero-width input")
    if eps < 0:
        raise ValueError("rmsnorm: eps must be non-negative")
    scale = ((x * x).mean(axis=-1, keepdims=True) + eps).sqrt()
    return (x / scale) * gain


# --- Parameters ---

def truncated_normal(rng, shape, std=0.02, dtype="F32"):
    """Normal(0, std) resampled until every draw lies within two deviations."""
    values = rng.standard_normal(shape)
    outside = np.abs(values) > 2.0
    while outside.any():
        values[outside] = rng.standard_normal(int(outside.sum()))
        outside = np.abs(values) > 2.0
    return (values * std).astype(DTYPES[dtype])


class AttentionParams:
    def __init__(self, cfg, rng, dtype="F32"):
        w, h, d = cfg.width, cfg.heads, cfg.head_dim
        self.heads = h
        self.wq = parameter(truncated_normal(rng, (w, w), dtype=dtype), dtype)
        self.wk = parameter(truncated_normal(rng, (w, w), dtype=dtype), dtype)
        self.wv = parameter(truncated_normal(rng, (w, w), dtype=dtype), dtype)
        self.wo = parameter(truncated_normal(rng, (w, w), dtype=dtype), dtype)
        self.q_gain = parameter(np.ones((h, 1, d)), dtype) if cfg.qk_norm else None
        self.k_gain = parameter(np.ones((h, 1, d)), dtype) if cfg.qk_norm else None

    def named(self, prefix):
        out = {f"{prefix}.wq": self.wq, f"{prefix}.wk": self.wk,
               f"{prefix}.wv": self.wv, f"{prefix}.wo": self.wo}
        if self.q_gain is not None:
            out[f"{prefix}.q_gain"] = self.q_gain
            out[f"{prefix}.k_gain"] = self.k_gain
        return out


class BlockParams:
    def __init__(self, cfg, rng, dtype="F32"):
        self.cfg = cfg
        self.norm1 = parameter(np.ones(cfg.width), dtype)
        self.attn = AttentionParams(cfg, rng, dtype)
        self.norm2 = parameter(np.ones(cfg.width), dtype)
        self.w_up = parameter(truncated_normal(rng, (cfg.width, cfg.hidden), dtype=dtype), dtype)
        self.w_down = parameter(truncated_normal(rng, (cfg.hidden, cfg.width), dtype=dtype), dtype)

    def named(self, prefix):
        out = {f"{prefix}.norm1": self.norm1}
        out.update(self.attn.named(f"{prefix}.attn"))
        out[f"{prefix}.norm2"] = self.norm2
        out[f"{prefix}.w_up"] = self.w_up
        out[f"{prefix}.w_down"] = self.w_down
        return out


# --- Layers ---

def _split_heads(x, heads):
    batch, seq, width = x.shape
    return x.reshape(batch, seq, heads, width // heads).transpose((0, 2, 1, 3))


def _merge_heads(x):
    batch, heads, seq, head_dim = x.shape
    return x.transpose((0, 2, 1, 3)).reshape(batch, seq, heads * head_dim)


def _visibility(mask, queries, keys, offset):
    """Boolean [queries, keys] table; query i sits at absolute position offset + i."""
    if mask is AttentionMaskKind.BIDIRECTIONAL:
        return np.ones((queries, keys), dtype=bool)
    q_pos = offset + np.arange(queries)[:, None]
    return np.arange(keys)[None, :] <= q_pos


def attention(x, params, mask, rope=None, qk_norm=False, eps=1e-6, cache=None, layer_idx=0):
    """
    Scaled dot-product attention over x [batch, seq, width].

    Returns (output [batch, seq, width], weights [batch, heads, seq, keys]).
    With a ``cache`` the new keys/values are appended and queries sit at
    positions [cache.length, cache.length + seq).
    """
    mask = AttentionMaskKind.parse(mask)
    heads = params.heads
    q = _split_heads(x @ params.wq, heads)
    k = _split_heads(x @ params.wk, heads)
    v = _split_heads(x @ params.wv, heads)
    if qk_norm:
        q = rmsnorm(q, params.q_gain, eps)
        k = rmsnorm(k, params.k_gain, eps)

    offset = cache.length if cache is not None else 0
    if rope is not None:
        q = apply_rope(q, rope, start=offset)
        k = apply_rope(k, rope, start=offset)
    if cache is not None:
        k, v = cache.update(layer_idx, k, v)

    seq, keys = q.shape[2], k.shape[2]
    visible = _visibility(mask, seq, keys, offset)
    if not visible.any(axis=-1).all():
        raise AttentionMaskError("attention row with no visible keys")
    scores = (q @ k.transpose((0, 1, 3, 2))) * (1.0 / float(np.sqrt(q.shape[-1])))
    if not visible.all():
        scores = scores.masked_fill(~visible, -np.inf)
    weights = scores.softmax()
    out = _merge_heads(weights @ v) @ params.wo
    return out, weights


def mlp(x, params):
    return silu(x @ params.w_up) @ params.w_down


def transformer_block(x, params, cfg, mask, rope=None, cache=None, layer_idx=0, attn_sink=None):
    """Pre-norm block: x + attn(norm(x)), then + mlp(norm(x)).

    When ``attn_sink`` is a list the block's attention weights are appended to it.
    """
    attended, weights = attention(
        rmsnorm(x, params.norm1, cfg.eps), params.attn, mask, rope,
        qk_norm=cfg.qk_norm, eps=cfg.eps, cache=cache, layer_idx=layer_idx,
    )
    if attn_sink is not None:
        attn_sink.append(weights)
    x = x + attended
    return x + mlp(rmsnorm(x, params.norm2, cfg.eps), params)


def run_blocks(x, blocks, mask, rope=None, cache=None, attn_sink=None):
    for layer_idx, block in enumerate(blocks):
        x = transformer_block(x, block, block.cfg, mask, rope, cache, layer_idx, attn_sink)
    return x
