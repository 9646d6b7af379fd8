"""
Class-conditional decoder-only generator over tokenizer ids.

Input slot 0 holds the class embedding (no rotary rotation); slot s >= 1 holds
token s-1, rotated with 1D coordinates for the K prefix tokens and 2D
coordinates offset by K on both axes for grid tokens. Output row i predicts
token i.
"""
import os
from dataclasses import asdict, dataclass

import mlflow
import numpy as np
import pandas as pd

from models import AliTokError
from models.autodiff import IndexRangeError, concat, cross_entropy, gather, no_grad, parameter
from models.image_io import atomic_write_bytes
from models.nn_blocks import (
    AttentionMaskKind, BlockConfig, BlockParams, RopeConfig, RopeLayout, RopeMode,
    rmsnorm, run_blocks, truncated_normal,
)
from models.optim import AdamW, NonFiniteLossError, OptimizerConfig, learning_rate
from models.tokenizer import encode_split

AR_COLUMNS = ["step", "loss", "accuracy", "lr"]
TOKEN_FILE_HEADER = np.dtype("<u4")


class TokenDatasetError(AliTokError, ValueError):
    pass


@dataclass
class ARConfig:
    vocab: int = 64
    classes: int = 8
    K: int = 8
    H: int = 8
    W: int = 8
    width: int = 128
    heads: int = 4
    depth: int = 4
    mlp_ratio: float = 4.0
    qk_norm: bool = True
    drop_prob: float = 0.1
    rope_base: float = 10000.0
    dtype: str = "F32"

    def __post_init__(self):
        if self.vocab < 2 or self.classes < 1:
            raise ValueError("ARConfig: need vocab >= 2 and at least one class")
        if self.width % self.heads or (self.width // self.heads) % 4:
            raise ValueError(
                f"ARConfig: head_dim {self.width}/{self.heads} must be an integer divisible by 4 for 2D rotary"
            )
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError(f"ARConfig: drop_prob must lie in [0, 1], got {self.drop_prob}")

    @classmethod
    def for_tokenizer(cls, tok_cfg, **overrides):
        base = dict(vocab=tok_cfg.codebook_size, K=tok_cfg.K, H=tok_cfg.H, W=tok_cfg.W)
        base.update(overrides)
        return cls(**base)

    @property
    def seq_len(self):
        return self.K + self.H * self.W

    @property
    def null_class_id(self):
        return self.classes

    @property
    def head_dim(self):
        return self.width // self.heads

    @property
    def blocks(self):
        return [BlockConfig(self.width, self.heads, self.mlp_ratio, self.qk_norm) for _ in range(self.depth)]

    def to_dict(self):
        return asdict(self)


@dataclass
class TokenSequence:
    class_id: int
    tokens: np.ndarray


@dataclass
class TokenBatch:
    tokens: np.ndarray
    class_ids: np.ndarray

    @classmethod
    def from_sequences(cls, sequences):
        return cls(
            np.stack([np.asarray(s.tokens, dtype=np.int64) for s in sequences]),
            np.array([s.class_id for s in sequences], dtype=np.int64),
        )

    def __len__(self):
        return int(self.tokens.shape[0])


def token_coordinates(cfg):
    """Rotary coordinate of every token index: (k,) for prefix, (r+K, c+K) for grid."""
    coords = []
    for i in range(cfg.seq_len):
        if i < cfg.K:
            coords.append((i,))
        else:
            r, c = divmod(i - cfg.K, cfg.W)
            coords.append((r + cfg.K, c + cfg.K))
    return coords


def ar_rope_layout(cfg):
    """Rotary table over input slots: class slot, then tokens 0..seq_len-2."""
    fed = cfg.seq_len - 1
    prefix = min(cfg.K, fed)
    grid = [(r + cfg.K, c + cfg.K) for r, c in (divmod(g, cfg.W) for g in range(fed - prefix))]
    return RopeLayout([
        RopeConfig(RopeMode.NONE, cfg.head_dim, np.zeros(1), cfg.rope_base),
        RopeConfig(RopeMode.ONE_D, cfg.head_dim, np.arange(prefix), cfg.rope_base),
        RopeConfig(RopeMode.TWO_D, cfg.head_dim, np.array(grid, dtype=np.int64).reshape(-1, 2), cfg.rope_base),
    ])


class ARModel:
    kind = "ar"

    def __init__(self, cfg, seed=0):
        self.cfg = cfg
        self.seed = seed
        d = cfg.dtype
        rng = np.random.Generator(np.random.Philox(seed))
        self.tok_emb = parameter(truncated_normal(rng, (cfg.vocab, cfg.width), dtype=d), d)
        self.cls_emb = parameter(truncated_normal(rng, (cfg.classes + 1, cfg.width), dtype=d), d)
        self.blocks = [BlockParams(bc, rng, d) for bc in cfg.blocks]
        self.norm = parameter(np.ones(cfg.width), d)
        self.head = parameter(truncated_normal(rng, (cfg.width, cfg.vocab), dtype=d), d)
        self.rope = ar_rope_layout(cfg)

    def named_parameters(self):
        out = {"tok_emb": self.tok_emb, "cls_emb": self.cls_emb}
        for i, block in enumerate(self.blocks):
            out.update(block.named(f"blocks.{i}"))
        out["norm"] = self.norm
        out["head"] = self.head
        return out

    def named_buffers(self):
        return {}


# --- Forward ---

def _check_ids(cfg, tokens, class_ids):
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise IndexRangeError(f"token ids must lie in [0, {cfg.vocab})")
    if class_ids.size and (class_ids.min() < 0 or class_ids.max() > cfg.null_class_id):
        raise IndexRangeError(f"class ids must lie in [0, {cfg.null_class_id}]")


def embed_slots(model, class_ids=None, tokens=None):
    """Embeddings for a run of input slots: optional class slot, then tokens."""
    parts = []
    if class_ids is not None:
        parts.append(gather(model.cls_emb, np.asarray(class_ids, dtype=np.int64)[:, None]))
    if tokens is not None and np.asarray(tokens).shape[1]:
        parts.append(gather(model.tok_emb, np.asarray(tokens, dtype=np.int64)))
    return parts[0] if len(parts) == 1 else concat(parts, axis=1)


def run_stack(model, h, cache=None, attn_sink=None):
    h = run_blocks(h, model.blocks, AttentionMaskKind.CAUSAL, model.rope, cache, attn_sink)
    return rmsnorm(h, model.norm) @ model.head


def ar_logits(class_ids, prefix_tokens, model):
    """Logits [B, n+1, V] for the class slot plus n already-known tokens."""
    cfg = model.cfg
    class_ids = np.atleast_1d(np.asarray(class_ids, dtype=np.int64))
    prefix_tokens = np.asarray(prefix_tokens, dtype=np.int64)
    if prefix_tokens.ndim == 1:
        prefix_tokens = prefix_tokens[None, :]
    if prefix_tokens.shape[0] != class_ids.shape[0]:
        raise IndexRangeError(f"{prefix_tokens.shape[0]} token rows for {class_ids.shape[0]} class ids")
    if prefix_tokens.shape[1] > cfg.seq_len - 1:
        raise IndexRangeError(f"at most {cfg.seq_len - 1} known tokens fit the context")
    _check_ids(cfg, prefix_tokens, class_ids)
    return run_stack(model, embed_slots(model, class_ids, prefix_tokens))


def ar_forward(tokens, class_ids, model):
    """Logits [B, seq_len, V]; row i predicts token i from the class and tokens < i."""
    cfg = model.cfg
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None]
    if tokens.shape[1] != cfg.seq_len:
        raise IndexRangeError(f"expected {cfg.seq_len} tokens per sequence, got {tokens.shape[1]}")
    class_ids = np.atleast_1d(np.asarray(class_ids, dtype=np.int64))
    _check_ids(cfg, tokens, class_ids)
    return ar_logits(class_ids, tokens[:, :-1], model)


def sequence_log_prob(seq, model):
    """Sum over i of log softmax(logits[i])[tokens[i]]."""
    with no_grad():
        logits = ar_forward(seq.tokens, [seq.class_id], model).data[0].astype(np.float64)
    peak = logits.max(axis=-1, keepdims=True)
    log_probs = logits - (peak + np.log(np.exp(logits - peak).sum(axis=-1, keepdims=True)))
    return float(log_probs[np.arange(len(seq.tokens)), np.asarray(seq.tokens)].sum())


def token_accuracy(logits, targets):
    predictions = np.argmax(np.asarray(logits), axis=-1)
    return float(np.mean(predictions == np.asarray(targets)))


def apply_class_dropout(class_ids, drop_prob, null_class_id, rng):
    """Replace each class id by the null class with probability drop_prob."""
    class_ids = np.asarray(class_ids, dtype=np.int64).copy()
    dropped = rng.random(class_ids.shape[0]) < drop_prob
    class_ids[dropped] = null_class_id
    return class_ids


def ar_train_step(batch, model, rng):
    """Forward one batch with class dropout; returns (loss Tensor, accuracy)."""
    if not isinstance(batch, TokenBatch):
        batch = TokenBatch.from_sequences(batch)
    if len(batch) == 0:
        raise TokenDatasetError("ar_train_step: empty batch")
    cfg = model.cfg
    class_ids = apply_class_dropout(batch.class_ids, cfg.drop_prob, cfg.null_class_id, rng)
    logits = ar_forward(batch.tokens, class_ids, model)
    loss = cross_entropy(logits, batch.tokens)
    return loss, token_accuracy(logits.data, batch.tokens)


# --- Token dataset file ---

@dataclass
class TokenDataset:
    tokens: np.ndarray
    class_ids: np.ndarray
    vocab: int
    classes: int

    def __len__(self):
        return int(self.tokens.shape[0])

    @property
    def seq_len(self):
        return int(self.tokens.shape[1])

    def batch(self, positions):
        positions = np.asarray(positions)
        return TokenBatch(self.tokens[positions], self.class_ids[positions])


class TokenDatasetValidator:
    @staticmethod
    def validate(dataset, cfg=None):
        print("\n🛡️ Running Token Dataset Validation...")
        if len(dataset) == 0:
            raise TokenDatasetError("Validator Error: token dataset is empty")
        if dataset.vocab > 65536:
            raise TokenDatasetError("Validator Error: vocabularies above 65536 do not fit u16 token ids")
        if dataset.tokens.min() < 0 or dataset.tokens.max() >= dataset.vocab:
            raise TokenDatasetError("Validator Error: token id outside the vocabulary")
        if dataset.class_ids.min() < 0 or dataset.class_ids.max() >= dataset.classes:
            raise TokenDatasetError("Validator Error: class id outside [0, classes)")
        if cfg is not None and (dataset.seq_len != cfg.seq_len or dataset.vocab != cfg.vocab):
            raise TokenDatasetError(
                f"Validator Error: dataset (seq_len={dataset.seq_len}, V={dataset.vocab}) does not match "
                f"the model (seq_len={cfg.seq_len}, V={cfg.vocab})"
            )
        print(f"✅ Validation Passed: {len(dataset):,} sequences of {dataset.seq_len} tokens.")
        return True


def write_token_dataset(dataset, path):
    """Header u32 (count, seq_len, V, C), then per record u16 tokens + u16 class id."""
    record = np.dtype([("tokens", "<u2", (dataset.seq_len,)), ("class_id", "<u2")])
    rows = np.empty(len(dataset), dtype=record)
    rows["tokens"] = dataset.tokens
    rows["class_id"] = dataset.class_ids
    header = np.array([len(dataset), dataset.seq_len, dataset.vocab, dataset.classes], dtype=TOKEN_FILE_HEADER)
    atomic_write_bytes(path, header.tobytes() + rows.tobytes())


def read_token_dataset(path):
    with open(path, "rb") as handle:
        raw = handle.read()
    if len(raw) < 16:
        raise TokenDatasetError(f"{path}: truncated token dataset header")
    count, seq_len, vocab, classes = (int(v) for v in np.frombuffer(raw, dtype=TOKEN_FILE_HEADER, count=4))
    record = np.dtype([("tokens", "<u2", (seq_len,)), ("class_id", "<u2")])
    if len(raw) != 16 + count * record.itemsize:
        raise TokenDatasetError(f"{path}: expected {count} records of {record.itemsize} bytes")
    rows = np.frombuffer(raw, dtype=record, count=count, offset=16)
    return TokenDataset(
        tokens=rows["tokens"].astype(np.int64),
        class_ids=rows["class_id"].astype(np.int64),
        vocab=vocab,
        classes=classes,
    )


def build_token_dataset(tokenizer, dataset, split, path=None):
    """Encode a split once with the frozen tokenizer; cached to ``path`` when given."""
    if path is not None and os.path.exists(path):
        print(f"🔎 Reusing cached token dataset: {path}")
        return read_token_dataset(path)
    print(f"🚀 Encoding the {split} split into tokens...")
    token_ds = TokenDataset(
        tokens=encode_split(tokenizer, dataset, split),
        class_ids=dataset.labels(split),
        vocab=tokenizer.cfg.codebook_size,
        classes=dataset.spec.classes,
    )
    if path is not None:
        write_token_dataset(token_ds, path)
        print(f"💾 Token dataset saved to: {path}")
    return token_ds


# --- Training / evaluation ---

class ARTrainer:
    def __init__(self, token_dataset, cfg, steps=5000, optimizer_cfg=None, seed=0, model=None, log_every=50):
        self.token_dataset = token_dataset
        self.cfg = cfg
        self.steps = steps
        self.optimizer_cfg = optimizer_cfg or OptimizerConfig(base_lr=4e-4, min_lr=1e-5)
        self.seed = seed
        self.model = model
        self.log_every = log_every
        self.metrics = None

    def run_pipeline(self):
        print(f"🚀 Starting AR Training ({self.steps} steps)...")

        print("STEP 1: Validating tokens and initializing parameters...")
        TokenDatasetValidator.validate(self.token_dataset, self.cfg)
        if self.model is None:
            self.model = ARModel(self.cfg, seed=self.seed)
        params = self.model.named_parameters()
        optimizer = AdamW(params, self.optimizer_cfg)
        batch_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([self.seed, 3, 1])))
        drop_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([self.seed, 3, 2])))

        if mlflow.active_run():
            mlflow.log_params({f"ar_{k}": v for k, v in {**self.cfg.to_dict(), "steps": self.steps}.items()})

        print("STEP 2: Training loop...")
        rows = []
        for step in range(self.steps):
            positions = batch_rng.integers(0, len(self.token_dataset), size=self.optimizer_cfg.batch_size)
            loss, accuracy = ar_train_step(self.token_dataset.batch(positions), self.model, drop_rng)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NonFiniteLossError(step, {"loss": value, "accuracy": accuracy})
            lr = learning_rate(step, self.steps, self.optimizer_cfg)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step(lr)
            rows.append({"step": step, "loss": value, "accuracy": accuracy, "lr": lr})

            if step % self.log_every == 0 or step == self.steps - 1:
                print(f"   step {step:5d} | loss {value:.5f} | acc {accuracy:.4f} | lr {lr:.2e}")
                if mlflow.active_run():
                    mlflow.log_metrics({"ar_loss": value, "ar_accuracy": accuracy, "ar_lr": lr}, step=step)

        print("STEP 3: Summarizing...")
        self.metrics = pd.DataFrame(rows, columns=AR_COLUMNS)
        tail = self.metrics.tail(max(1, self.steps // 10))
        print(f"✅ AR training done. Last-10% loss {tail['loss'].mean():.5f} | acc {tail['accuracy'].mean():.4f}")
        return self.model, self.metrics


def train_ar(token_dataset, cfg, steps, optimizer_cfg, seed, model=None, log_every=50):
    return ARTrainer(token_dataset, cfg, steps, optimizer_cfg, seed, model, log_every).run_pipeline()


def evaluate_ar(model, token_dataset, batch_size=32):
    """Teacher-forced loss/accuracy with the true class, plus flat predictions and targets."""
    cfg = model.cfg
    losses, predictions = [], []
    with no_grad():
        for start in range(0, len(token_dataset), batch_size):
            batch = token_dataset.batch(np.arange(start, min(start + batch_size, len(token_dataset))))
            logits = ar_forward(batch.tokens, batch.class_ids, model)
            losses.append(float(cross_entropy(logits, batch.tokens).data) * len(batch))
            predictions.append(np.argmax(logits.data, axis=-1))
    predicted = np.concatenate(predictions, axis=0)
    targets = token_dataset.tokens
    hits = predicted == targets
    return {
        "loss": sum(losses) / len(token_dataset),
        "accuracy": float(hits.mean()),
        "prefix_accuracy": float(hits[:, :cfg.K].mean()) if cfg.K else float("nan"),
        "grid_accuracy": float(hits[:, cfg.K:].mean()),
        "predictions": predicted,
        "targets": targets,
    }
