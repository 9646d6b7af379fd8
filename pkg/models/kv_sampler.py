"""
KV-cached autoregressive sampling with temperature and classifier-free
guidance, plus the uncached reference path and a throughput benchmark.
"""
import time
from dataclasses import asdict, dataclass

import numpy as np

from models import AliTokError
from models.ar_generator import TokenSequence, ar_logits, embed_slots, run_stack
from models.autodiff import DTYPES, Tensor, no_grad

TEMPERATURE_FLOOR = 1e-6
SCHEDULES = ("pow-cosine", "linear", "constant")
BENCH_COLUMNS = ["seq_len", "batch", "cached_s", "uncached_s", "speedup", "prefix_share"]


class CacheDesyncError(AliTokError, RuntimeError):
    pass


@dataclass
class SamplingConfig:
    temperature: float = 0.95
    use_cfg: bool = False
    guidance_scale: float = 1.0
    scaler_power: float = 1.0
    schedule: str = "pow-cosine"
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"SamplingConfig: temperature must be positive, got {self.temperature}")
        if self.guidance_scale < 1:
            raise ValueError(f"SamplingConfig: guidance_scale must be >= 1, got {self.guidance_scale}")
        if self.scaler_power <= 0:
            raise ValueError(f"SamplingConfig: scaler_power must be positive, got {self.scaler_power}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"SamplingConfig: schedule must be one of {SCHEDULES}, got {self.schedule!r}")

    def to_dict(self):
        return asdict(self)


class KVCache:
    """Per-layer key/value buffers [batch, heads, capacity, head_dim], filled left to right."""

    def __init__(self, layers, batch, heads, head_dim, capacity, dtype="F32"):
        shape = (batch, heads, capacity, head_dim)
        self.key_cache = [np.zeros(shape, dtype=DTYPES[dtype]) for _ in range(layers)]
        self.value_cache = [np.zeros(shape, dtype=DTYPES[dtype]) for _ in range(layers)]
        self.layer_lengths = [0] * layers
        self.capacity = capacity
        self.length = 0

    def update(self, layer_idx, key, value):
        """Append new positions for one layer; returns all keys/values so far."""
        if self.layer_lengths[layer_idx] != self.length:
            raise CacheDesyncError(
                f"layer {layer_idx} holds {self.layer_lengths[layer_idx]} positions, cache length is {self.length}"
            )
        end = self.length + key.shape[2]
        if end > self.capacity:
            raise CacheDesyncError(f"cache capacity {self.capacity} exceeded")
        self.key_cache[layer_idx][:, :, self.length:end] = key.data
        self.value_cache[layer_idx][:, :, self.length:end] = value.data
        self.layer_lengths[layer_idx] = end
        return Tensor(self.key_cache[layer_idx][:, :, :end]), Tensor(self.value_cache[layer_idx][:, :, :end])

    def advance(self, n):
        expected = self.length + n
        if any(length != expected for length in self.layer_lengths):
            raise CacheDesyncError(f"layers disagree on cache length: {self.layer_lengths}, expected {expected}")
        self.length = expected

    def get_cache_length(self):
        return self.length


class GenerationSession:
    """Cache plus generated tokens for n samples (2n cache rows when guided)."""

    def __init__(self, model, class_ids, cfg):
        mcfg = model.cfg
        self.cfg = cfg
        self.class_ids = np.atleast_1d(np.asarray(class_ids, dtype=np.int64))
        self.null_class_id = mcfg.null_class_id
        self.seq_len = mcfg.seq_len
        rows = self.class_ids.shape[0] * (2 if cfg.use_cfg else 1)
        self.cache = KVCache(mcfg.depth, rows, mcfg.heads, mcfg.head_dim, mcfg.seq_len, mcfg.dtype)
        self.tokens = np.zeros((self.class_ids.shape[0], 0), dtype=np.int64)
        self.step_logits = []

    @property
    def steps_done(self):
        return int(self.tokens.shape[1])

    def branch_class_ids(self):
        if not self.cfg.use_cfg:
            return self.class_ids
        return np.concatenate([self.class_ids, np.full_like(self.class_ids, self.null_class_id)])

    def branch_rows(self, values):
        return np.concatenate([values, values]) if self.cfg.use_cfg else values


def cfg_schedule(t, T, G, p, kind="pow-cosine"):
    """Guidance scale at step t of T: 1 at the first token, G at the last."""
    if T == 1:
        return float(G)
    progress = t / (T - 1)
    if kind == "constant":
        return float(G)
    if kind == "linear":
        return 1.0 + (G - 1.0) * progress
    return 1.0 + (G - 1.0) * (1.0 - np.cos(np.pi * progress ** p)) / 2.0


def cfg_combine(cond_logits, uncond_logits, g):
    """uncond + g*(cond - uncond); g = 1 returns the conditional logits unchanged."""
    cond = np.asarray(cond_logits)
    uncond = np.asarray(uncond_logits)
    if cond.shape != uncond.shape:
        raise ValueError(f"cfg_combine: shapes {cond.shape} and {uncond.shape} differ")
    if g == 1:
        return cond.copy()
    g = cond.dtype.type(g)
    return uncond + g * (cond - uncond)


def sample_categorical(logits, temperature, rng):
    """Inverse-CDF draw per row of softmax(logits / temperature); argmax below the floor."""
    logits = np.asarray(logits, dtype=np.float64)
    if temperature < TEMPERATURE_FLOOR:
        return np.argmax(logits, axis=-1).astype(np.int64)
    scaled = logits / temperature
    probs = np.exp(scaled - scaled.max(axis=-1, keepdims=True))
    cdf = np.cumsum(probs, axis=-1)
    out = np.empty(logits.shape[0], dtype=np.int64)
    for row in range(logits.shape[0]):
        u = rng.random() * cdf[row, -1]
        out[row] = min(int(np.searchsorted(cdf[row], u, side="right")), logits.shape[-1] - 1)
    return out


def _guide(session, logits, t, T):
    cfg = session.cfg
    if not cfg.use_cfg:
        return logits
    n = session.class_ids.shape[0]
    g = cfg_schedule(t, T, cfg.guidance_scale, cfg.scaler_power, cfg.schedule)
    return cfg_combine(logits[:n], logits[n:], g)


def _finish_step(session, logits, rng, record):
    guided = _guide(session, logits, session.steps_done, session.seq_len)
    if record:
        session.step_logits.append(guided)
    token = sample_categorical(guided, session.cfg.temperature, rng)
    session.tokens = np.concatenate([session.tokens, token[:, None]], axis=1)
    return token


def sample_step(session, model, prev, cfg, rng, record=False):
    """
    Feed one slot (class at step 0, else the previous tokens) and sample the next token.

    After t sampled tokens the cache holds t positions: the class slot plus the
    t - 1 tokens fed back so far. The newest token is fed on the next call.
    """
    t = session.steps_done
    if session.cache.length != t:
        raise CacheDesyncError(f"cache holds {session.cache.length} positions after {t} sampled tokens")
    if t >= model.cfg.seq_len:
        raise CacheDesyncError("sequence already complete")
    with no_grad():
        if t == 0:
            h = embed_slots(model, class_ids=session.branch_class_ids())
        else:
            prev = np.asarray(prev, dtype=np.int64).reshape(-1)
            h = embed_slots(model, tokens=session.branch_rows(prev)[:, None])
        logits = run_stack(model, h, cache=session.cache).data[:, -1]
    session.cache.advance(1)
    return _finish_step(session, logits, rng, record)


def uncached_step(session, model, rng, record=False):
    """Same draw as sample_step, recomputing the whole prefix without a cache."""
    with no_grad():
        logits = ar_logits(
            session.branch_class_ids(), session.branch_rows(session.tokens), model
        ).data[:, -1]
    session.cache.length += 1
    return _finish_step(session, logits, rng, record)


@dataclass
class GenerationResult:
    tokens: np.ndarray
    class_ids: np.ndarray
    duration_s: float
    step_logits: np.ndarray = None

    def sequences(self):
        return [TokenSequence(int(c), row) for c, row in zip(self.class_ids, self.tokens)]


def generate_batch(model, class_ids, cfg, seed, use_cache=True, record_logits=False):
    """Sample seq_len tokens for every class id; one Philox stream for the batch."""
    rng = np.random.Generator(np.random.Philox(seed))
    session = GenerationSession(model, class_ids, cfg)
    if not use_cache:
        session.cache = _StepCounter()
    start = time.perf_counter()
    prev = None
    for _ in range(model.cfg.seq_len):
        if use_cache:
            prev = sample_step(session, model, prev, cfg, rng, record_logits)
        else:
            prev = uncached_step(session, model, rng, record_logits)
    duration = time.perf_counter() - start
    logits = np.stack(session.step_logits, axis=1) if record_logits else None
    return GenerationResult(session.tokens, session.class_ids, duration, logits)


class _StepCounter:
    """Stands in for the KV cache on the uncached path; only counts positions."""

    def __init__(self):
        self.length = 0


def generate(model, class_id, cfg, seed, use_cache=True):
    result = generate_batch(model, [class_id], cfg, seed, use_cache)
    return result.sequences()[0], result.duration_s


def bench_cache(model, batch, cfg, seed=0):
    """Wall time of cached vs uncached generation for the same batch and seed."""
    class_ids = np.arange(batch) % model.cfg.classes
    cached = generate_batch(model, class_ids, cfg, seed, use_cache=True)
    uncached = generate_batch(model, class_ids, cfg, seed, use_cache=False)
    mcfg = model.cfg
    return {
        "seq_len": mcfg.seq_len,
        "batch": int(batch),
        "cached_s": cached.duration_s,
        "uncached_s": uncached.duration_s,
        "speedup": uncached.duration_s / max(cached.duration_s, 1e-12),
        "prefix_share": mcfg.K / mcfg.seq_len,
        "identical": bool(np.array_equal(cached.tokens, uncached.tokens)),
    }
