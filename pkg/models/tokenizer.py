"""
Image tokenizer: bidirectional encoder over [prefix | latent | patch] slots,
vector quantization, a stage-1 decoder (causal by default) trained with
reconstruction, fixed-feature and auxiliary first-row losses, and a stage-2
bidirectional decoder with buffer tokens trained against the frozen encoder.
"""
import functools
from dataclasses import asdict, dataclass, field
from typing import Optional

import mlflow
import numpy as np
import pandas as pd

from models import AliTokError
from models.autodiff import (
    DTYPES, Tensor, concat, mse, no_grad, parameter, silu, stop_gradient,
)
from models.nn_blocks import (
    AttentionMaskKind, BlockConfig, BlockParams, rmsnorm, run_blocks, truncated_normal,
)
from models.optim import (
    AdamW, MissingCheckpointError, NonFiniteLossError, OptimizerConfig, learning_rate,
)
from models.vq_codebook import (
    Codebook, QuantizeResult, freeze_assignment, quant_loss, quantize, update_usage_and_reinit,
    utilization,
)

LOSS_COLUMNS = ["step", "loss_total", "mse", "perc", "quant", "aux_mse", "aux_perc", "utilization"]


class PatchGridError(AliTokError, ValueError):
    pass


class TokenizerShapeError(AliTokError, ValueError):
    pass


@dataclass
class TokConfig:
    image_h: int = 32
    image_w: int = 32
    f: int = 4
    use_prefix: bool = True
    use_aux: bool = True
    stage1_mask: str = "causal"
    codebook_size: int = 64
    d_c: int = 8
    width: int = 64
    heads: int = 4
    enc_depth: int = 2
    dec_depth: int = 2
    dec2_depth: int = 3
    mlp_ratio: float = 4.0
    qk_norm: bool = False
    buffer_count: int = 16
    beta: float = 0.25
    lambda_adv: float = 0.1
    usage_decay: float = 0.99
    reinit_scale: float = 0.03
    feature_seed: int = 0
    dtype: str = "F32"

    def __post_init__(self):
        if self.f <= 0 or self.image_h % self.f or self.image_w % self.f:
            raise PatchGridError(f"image {self.image_h}x{self.image_w} is not divisible into {self.f}x{self.f} patches")
        self.stage1_mask = AttentionMaskKind.parse(self.stage1_mask).value

    @property
    def H(self):
        return self.image_h // self.f

    @property
    def W(self):
        return self.image_w // self.f

    @property
    def K(self):
        return self.W if self.use_prefix else 0

    @property
    def grid_tokens(self):
        return self.H * self.W

    @property
    def seq_len(self):
        return self.K + self.grid_tokens

    @property
    def patch_dim(self):
        return self.f * self.f * 3

    @property
    def reinit_threshold(self):
        return self.reinit_scale / self.codebook_size

    @property
    def stage1_mask_kind(self):
        return AttentionMaskKind.parse(self.stage1_mask)

    def block_config(self):
        return BlockConfig(self.width, self.heads, self.mlp_ratio, self.qk_norm)

    @property
    def encoder_blocks(self):
        return [self.block_config() for _ in range(self.enc_depth)]

    @property
    def decoder_blocks(self):
        return [self.block_config() for _ in range(self.dec_depth)]

    @property
    def stage2_blocks(self):
        return [self.block_config() for _ in range(self.dec2_depth)]

    def to_dict(self):
        return asdict(self)


@dataclass
class EncodedSequence:
    """K prefix tokens then H*W raster-order grid tokens, per image."""

    indices: np.ndarray
    continuous: Tensor
    quant: Optional[QuantizeResult] = None


@dataclass
class ReconstructionOutput:
    """Patches are flattened channel-last: [B, n, f*f*3]."""

    prefix_patches: Tensor
    grid_patches: Tensor
    image: Tensor


@dataclass
class StageLoss:
    total: Tensor
    terms: dict = field(default_factory=dict)
    seq: Optional[EncodedSequence] = None

    @property
    def parts(self):
        return {name: term.data[()] for name, term in self.terms.items()}


# --- Patch grid ---

def patchify(image, f):
    """[..., h, w, 3] -> [..., (h/f)*(w/f), f*f*3] in raster order."""
    h, w, c = image.shape[-3:]
    if f <= 0 or h % f or w % f:
        raise PatchGridError(f"image {h}x{w} is not divisible into {f}x{f} patches")
    lead = tuple(image.shape[:-3])
    n = len(lead)
    grid = image.reshape(lead + (h // f, f, w // f, f, c))
    axes = tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4)
    return grid.transpose(axes).reshape(lead + ((h // f) * (w // f), f * f * c))


def unpatchify(patches, H, W, f):
    """Inverse of patchify for an H x W patch grid."""
    lead = tuple(patches.shape[:-2])
    if patches.shape[-2] != H * W or patches.shape[-1] % (f * f):
        raise PatchGridError(f"cannot lay {patches.shape[-2:]} patches onto a {H}x{W} grid of size {f}")
    c = patches.shape[-1] // (f * f)
    n = len(lead)
    grid = patches.reshape(lead + (H, W, f, f, c))
    axes = tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4)
    return grid.transpose(axes).reshape(lead + (H * f, W * f, c))


# --- Fixed-feature loss ---

class FixedFeatureExtractor:
    """Two frozen 2x2/stride-2 random convolutions with SiLU, seeded."""

    def __init__(self, seed, channels=(16, 32)):
        rng = np.random.Generator(np.random.Philox(seed))
        self.kernels = []
        c_in = 3
        for c_out in channels:
            fan_in = 4 * c_in
            self.kernels.append(rng.standard_normal((fan_in, c_out)) / np.sqrt(fan_in))
            c_in = c_out

    def __call__(self, images):
        x = images
        for kernel in self.kernels:
            x = silu(_space_to_depth(x) @ Tensor(kernel.astype(DTYPES[x.dtype])))
        return x


def _space_to_depth(x):
    lead = tuple(x.shape[:-3])
    h, w, c = x.shape[-3:]
    if h % 2 or w % 2:
        raise PatchGridError(f"feature extractor needs even spatial dims, got {h}x{w}")
    n = len(lead)
    grid = x.reshape(lead + (h // 2, 2, w // 2, 2, c))
    axes = tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4)
    return grid.transpose(axes).reshape(lead + (h // 2, w // 2, 4 * c))


@functools.lru_cache(maxsize=8)
def feature_extractor(seed):
    return FixedFeatureExtractor(seed)


def fixed_feature_loss(a, b, seed):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    extractor = feature_extractor(int(seed))
    return mse(extractor(a), extractor(b))


# --- Parameters ---

def _expand(table, batch):
    """[n, w] -> [batch, n, w] by broadcasting against zeros."""
    zeros = Tensor(np.zeros((batch, 1, 1), dtype=table.data.dtype))
    return table.reshape(1, *table.shape) + zeros


class DecoderParams:
    def __init__(self, cfg, blocks, rng, buffer_count=0):
        d, w = cfg.dtype, cfg.width
        self.buffer_count = buffer_count
        self.in_proj = parameter(truncated_normal(rng, (cfg.d_c, w), dtype=d), d)
        self.in_bias = parameter(np.zeros(w), d)
        self.buffer = (
            parameter(truncated_normal(rng, (buffer_count, w), dtype=d), d) if buffer_count else None
        )
        self.pos = parameter(truncated_normal(rng, (buffer_count + cfg.seq_len, w), dtype=d), d)
        self.blocks = [BlockParams(bc, rng, d) for bc in blocks]
        self.norm = parameter(np.ones(w), d)
        self.out_proj = parameter(truncated_normal(rng, (w, cfg.patch_dim), dtype=d), d)
        self.out_bias = parameter(np.full(cfg.patch_dim, 0.5), d)

    def named(self, prefix):
        out = {f"{prefix}.in_proj": self.in_proj, f"{prefix}.in_bias": self.in_bias}
        if self.buffer is not None:
            out[f"{prefix}.buffer"] = self.buffer
        out[f"{prefix}.pos"] = self.pos
        for i, block in enumerate(self.blocks):
            out.update(block.named(f"{prefix}.blocks.{i}"))
        out[f"{prefix}.norm"] = self.norm
        out[f"{prefix}.out_proj"] = self.out_proj
        out[f"{prefix}.out_bias"] = self.out_bias
        return out


class TokenizerModel:
    """Encoder, codebook and decoders; parameters are created in a fixed order from the seed."""

    kind = "tokenizer"

    def __init__(self, cfg, seed=0):
        self.cfg = cfg
        self.seed = seed
        d, w = cfg.dtype, cfg.width
        rng = np.random.Generator(np.random.Philox(seed))
        self.patch_proj = parameter(truncated_normal(rng, (cfg.patch_dim, w), dtype=d), d)
        self.patch_bias = parameter(np.zeros(w), d)
        self.prefix_tokens = (
            parameter(truncated_normal(rng, (cfg.K, w), dtype=d), d) if cfg.K else None
        )
        self.latent_tokens = parameter(truncated_normal(rng, (cfg.grid_tokens, w), dtype=d), d)
        self.enc_pos = parameter(truncated_normal(rng, (cfg.seq_len + cfg.grid_tokens, w), dtype=d), d)
        self.encoder = [BlockParams(bc, rng, d) for bc in cfg.encoder_blocks]
        self.enc_norm = parameter(np.ones(w), d)
        self.enc_out = parameter(truncated_normal(rng, (w, cfg.d_c), dtype=d), d)
        self.codebook = Codebook(truncated_normal(rng, (cfg.codebook_size, cfg.d_c), std=0.1, dtype=d), dtype=d)
        self.decoder1 = DecoderParams(cfg, cfg.decoder_blocks, rng)
        self.decoder2 = None

    def init_stage2(self, seed=None):
        seed = self.seed if seed is None else seed
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 2])))
        self.decoder2 = DecoderParams(self.cfg, self.cfg.stage2_blocks, rng, self.cfg.buffer_count)
        return self.decoder2

    @property
    def has_stage2(self):
        return self.decoder2 is not None

    def encoder_parameters(self):
        out = {"patch_proj": self.patch_proj, "patch_bias": self.patch_bias}
        if self.prefix_tokens is not None:
            out["prefix_tokens"] = self.prefix_tokens
        out["latent_tokens"] = self.latent_tokens
        out["enc_pos"] = self.enc_pos
        for i, block in enumerate(self.encoder):
            out.update(block.named(f"encoder.{i}"))
        out["enc_norm"] = self.enc_norm
        out["enc_out"] = self.enc_out
        return out

    def stage1_parameters(self):
        out = self.encoder_parameters()
        out["codebook.vectors"] = self.codebook.vectors
        out.update(self.decoder1.named("decoder1"))
        return out

    def stage2_parameters(self):
        if self.decoder2 is None:
            raise MissingCheckpointError("stage-2 decoder has not been initialized")
        return self.decoder2.named("decoder2")

    def named_parameters(self):
        out = self.stage1_parameters()
        if self.decoder2 is not None:
            out.update(self.stage2_parameters())
        return out

    def named_buffers(self):
        return {"codebook.usage_ema": self.codebook.usage_ema}


# --- Forward passes ---

def _as_image_batch(images, cfg):
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images), dtype=cfg.dtype)
    if x.ndim == 3:
        x = x.reshape(1, *x.shape)
    if tuple(x.shape[1:]) != (cfg.image_h, cfg.image_w, 3):
        raise TokenizerShapeError(
            f"expected images of shape ({cfg.image_h}, {cfg.image_w}, 3), got {tuple(x.shape[1:])}"
        )
    return x


def encode(images, model, frozen=None):
    """Encode [B, h, w, 3] (or a single image) to K + H*W quantized tokens."""
    cfg = model.cfg
    x = _as_image_batch(images, cfg)
    batch = x.shape[0]
    patch_tokens = patchify(x, cfg.f) @ model.patch_proj + model.patch_bias
    slots = [_expand(model.latent_tokens, batch), patch_tokens]
    if model.prefix_tokens is not None:
        slots.insert(0, _expand(model.prefix_tokens, batch))
    h = concat(slots, axis=1) + model.enc_pos
    h = run_blocks(h, model.encoder, AttentionMaskKind.BIDIRECTIONAL)
    h = rmsnorm(h[:, :cfg.seq_len], model.enc_norm)
    z = h @ model.enc_out
    quant = quantize(z, model.codebook, frozen)
    return EncodedSequence(indices=quant.indices, continuous=z, quant=quant)


def _run_decoder(decoder, codes, cfg, mask, attn_sink=None):
    batch = codes.shape[0]
    h = codes @ decoder.in_proj + decoder.in_bias
    if decoder.buffer is not None:
        h = concat([_expand(decoder.buffer, batch), h], axis=1)
    h = h + decoder.pos
    h = run_blocks(h, decoder.blocks, mask, attn_sink=attn_sink)
    h = rmsnorm(h, decoder.norm)
    if decoder.buffer_count:
        h = h[:, decoder.buffer_count:]
    return h @ decoder.out_proj + decoder.out_bias


def _split_output(patches, cfg):
    prefix = patches[:, :cfg.K]
    grid = patches[:, cfg.K:]
    return ReconstructionOutput(prefix, grid, unpatchify(grid, cfg.H, cfg.W, cfg.f))


def decode_codes_stage1(codes, model, attn_sink=None):
    """Stage-1 decoder on code vectors [B, K + H*W, d_c]."""
    cfg = model.cfg
    return _split_output(_run_decoder(model.decoder1, codes, cfg, cfg.stage1_mask_kind, attn_sink), cfg)


def decode_stage1(seq, model, attn_sink=None):
    codes = seq.quant.ste_output if seq.quant is not None else model.codebook.lookup(seq.indices)
    return decode_codes_stage1(codes, model, attn_sink)


def decode_stage2(seq, model, attn_sink=None):
    """Bidirectional stage-2 decoder over [buffer | K + H*W frozen codes]."""
    if model.decoder2 is None:
        raise MissingCheckpointError("decode_stage2 needs a stage-2 decoder; train stage 2 first")
    cfg = model.cfg
    codes = Tensor(model.codebook.vectors.data[np.asarray(seq.indices)])
    patches = _run_decoder(model.decoder2, codes, cfg, AttentionMaskKind.BIDIRECTIONAL, attn_sink)
    return _split_output(patches, cfg)


def reconstruct(images, model, stage):
    with no_grad():
        seq = encode(images, model)
        recon = decode_stage2(seq, model) if stage == 2 else decode_stage1(seq, model)
    return recon.image.data


# --- Losses ---

def loss_stage1(images, model, frozen=None):
    """(mse + perc + quant) + (aux_mse + aux_perc); the adversarial term is not trained."""
    cfg = model.cfg
    target = _as_image_batch(images, cfg)
    seq = encode(target, model, frozen)
    recon = decode_stage1(seq, model)

    terms = {
        "mse": mse(recon.image, target),
        "perc": fixed_feature_loss(recon.image, target, cfg.feature_seed),
        "quant": quant_loss(seq.continuous, seq.quant, cfg.beta, frozen),
    }
    recon_total = terms["mse"] + terms["perc"] + terms["quant"]
    frozen_rows = frozen.grid_rest if frozen is not None else None
    terms.update(aux_loss(recon, target, cfg, frozen_rows))
    total = recon_total + (terms["aux_mse"] + terms["aux_perc"])
    return StageLoss(total=total, terms=terms, seq=seq)


def freeze_stage1(images, model):
    """Pin code assignments and every detached stage-1 operand at the current parameters."""
    cfg = model.cfg
    with no_grad():
        seq = encode(images, model)
        frozen = freeze_assignment(seq.continuous, seq.quant)
        recon = decode_stage1(seq, model)
    frozen.grid_rest = np.array(recon.grid_patches.data[:, cfg.W:], dtype=np.float64)
    return frozen


def aux_loss(recon, target, cfg, frozen_rows=None):
    """
    First-row terms from the prefix outputs: pixel MSE against row 1, and the
    feature loss of [prefix row | detached grid rows 2..H] against the target.
    Both are zero when prefix tokens or the auxiliary loss are disabled.
    ``frozen_rows`` replaces the detached rows with fixed patch values.
    """
    zero = Tensor(np.zeros((), dtype=DTYPES[cfg.dtype]))
    if not (cfg.use_aux and cfg.K):
        return {"aux_mse": zero, "aux_perc": zero}
    target = _as_image_batch(target, cfg)
    target_first_row = patchify(target, cfg.f)[:, :cfg.W]
    if frozen_rows is None:
        rest = stop_gradient(recon.grid_patches[:, cfg.W:])
    else:
        rest = Tensor(np.asarray(frozen_rows).astype(DTYPES[cfg.dtype]))
    composed = concat([recon.prefix_patches, rest], axis=1)
    composed_image = unpatchify(composed, cfg.H, cfg.W, cfg.f)
    return {
        "aux_mse": mse(recon.prefix_patches, target_first_row),
        "aux_perc": fixed_feature_loss(composed_image, target, cfg.feature_seed),
    }


def loss_stage2(images, model):
    """mse + perc of the stage-2 reconstruction; the encoder runs frozen."""
    cfg = model.cfg
    target = _as_image_batch(images, cfg)
    with no_grad():
        seq = encode(target, model)
    recon = decode_stage2(seq, model)
    zero = Tensor(np.zeros((), dtype=DTYPES[cfg.dtype]))
    terms = {
        "mse": mse(recon.image, target),
        "perc": fixed_feature_loss(recon.image, target, cfg.feature_seed),
        "quant": zero,
        "aux_mse": zero,
        "aux_perc": zero,
    }
    return StageLoss(total=terms["mse"] + terms["perc"], terms=terms, seq=seq)


# --- Training ---

class TokenizerTrainer:
    """Minibatch AdamW training for stage 1 (everything) or stage 2 (new decoder only)."""

    def __init__(self, dataset, cfg, stage=1, steps=3000, optimizer_cfg=None, seed=0,
                 model=None, log_every=50):
        if stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {stage}")
        if stage == 2 and model is None:
            raise MissingCheckpointError("stage-2 training requires a stage-1 tokenizer checkpoint")
        self.dataset = dataset
        self.cfg = cfg
        self.stage = stage
        self.steps = steps
        self.optimizer_cfg = optimizer_cfg or OptimizerConfig()
        self.seed = seed
        self.model = model
        self.log_every = log_every
        self.metrics = None

    def _build(self):
        if self.model is None:
            self.model = TokenizerModel(self.cfg, seed=self.seed)
        if self.stage == 2:
            if not self.model.has_stage2:
                self.model.init_stage2(self.seed)
            return self.model.stage2_parameters()
        return self.model.stage1_parameters()

    def _step_loss(self, images):
        if self.stage == 1:
            return loss_stage1(images, self.model)
        return loss_stage2(images, self.model)

    def run_pipeline(self):
        print(f"🚀 Starting Tokenizer Training (stage {self.stage}, {self.steps} steps)...")

        print("STEP 1: Initializing parameters...")
        params = self._build()
        optimizer = AdamW(params, self.optimizer_cfg)
        batch_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([self.seed, self.stage, 1])))
        reinit_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([self.seed, self.stage, 2])))
        n_train = self.dataset.split_size("train")
        print(f"   {sum(p.size for p in params.values()):,} trainable values | {n_train:,} train images")

        if mlflow.active_run():
            mlflow.log_params({
                f"tok_stage{self.stage}_{k}": v for k, v in {**self.cfg.to_dict(), "steps": self.steps}.items()
            })

        print("STEP 2: Training loop...")
        rows = []
        for step in range(self.steps):
            positions = batch_rng.integers(0, n_train, size=self.optimizer_cfg.batch_size)
            loss = self._step_loss(self.dataset.images("train", positions))
            parts = {name: float(value) for name, value in loss.parts.items()}
            total = float(loss.total.data)
            if not np.isfinite(total):
                raise NonFiniteLossError(step, {"loss_total": total, **parts})

            optimizer.zero_grad()
            loss.total.backward()
            optimizer.step(learning_rate(step, self.steps, self.optimizer_cfg))

            if self.stage == 1:
                update_usage_and_reinit(
                    self.model.codebook, loss.seq.indices, loss.seq.continuous.data,
                    self.cfg.usage_decay, self.cfg.reinit_threshold, reinit_rng, optimizer,
                )
            row = {"step": step, "loss_total": total, **parts,
                   "utilization": utilization(self.model.codebook, loss.seq.indices)}
            rows.append(row)

            if step % self.log_every == 0 or step == self.steps - 1:
                print(f"   step {step:5d} | loss {total:.5f} | mse {parts['mse']:.5f} "
                      f"| aux {parts['aux_mse']:.5f} | util {row['utilization']:.3f}")
                if mlflow.active_run():
                    mlflow.log_metrics({f"tok{self.stage}_{k}": v for k, v in row.items() if k != "step"}, step=step)

        print("STEP 3: Summarizing...")
        self.metrics = pd.DataFrame(rows, columns=LOSS_COLUMNS)
        print(f"✅ Stage {self.stage} done. Final loss {self.metrics['loss_total'].iloc[-1]:.5f}")
        return self.model, self.metrics


def train_tokenizer(dataset, cfg, stage, steps, optimizer_cfg, seed, model=None, log_every=50):
    trainer = TokenizerTrainer(dataset, cfg, stage, steps, optimizer_cfg, seed, model, log_every)
    return trainer.run_pipeline()


def encode_split(model, dataset, split, batch_size=32):
    """Token ids [n, K + H*W] for every image of a split, in manifest order."""
    n = dataset.split_size(split)
    chunks = []
    with no_grad():
        for start in range(0, n, batch_size):
            positions = np.arange(start, min(start + batch_size, n))
            chunks.append(encode(dataset.images(split, positions), model).indices)
    return np.concatenate(chunks, axis=0).astype(np.int64)
