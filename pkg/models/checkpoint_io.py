"""
Binary checkpoints (little-endian throughout):

    b"ALTK" | u32 version | u32 len + UTF-8 config JSON | u32 tensor count |
    per tensor: u32 len + UTF-8 name, u32 rank, u32 dims[rank], u8 dtype, payload
"""
import json
import struct

import numpy as np

from models import AliTokError
from models.ar_generator import ARConfig, ARModel
from models.image_io import atomic_write_bytes
from models.tokenizer import TokConfig, TokenizerModel

MAGIC = b"ALTK"
FORMAT_VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}


class CheckpointError(AliTokError):
    pass


class CorruptCheckpointError(CheckpointError, ValueError):
    pass


class CheckpointVersionError(CheckpointError, ValueError):
    pass


class CheckpointMagicError(CheckpointError, ValueError):
    pass


class CheckpointShapeError(CheckpointError, ValueError):
    pass


def model_config_text(model):
    payload = {
        "kind": model.kind,
        "seed": model.seed,
        "config": model.cfg.to_dict(),
        "stage2": bool(getattr(model, "has_stage2", False)),
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def model_tensors(model):
    tensors = {name: t.data for name, t in model.named_parameters().items()}
    tensors.update(model.named_buffers())
    return tensors


def encode_checkpoint(config_text, tensors):
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    config_bytes = config_text.encode("utf-8")
    chunks.append(struct.pack("<I", len(config_bytes)) + config_bytes)
    chunks.append(struct.pack("<I", len(tensors)))
    for name, array in tensors.items():
        array = np.ascontiguousarray(array)
        dtype = array.dtype.newbyteorder("<")
        if dtype not in DTYPE_CODES:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {array.dtype}")
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name_bytes)) + name_bytes)
        chunks.append(struct.pack("<I", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(struct.pack("<B", DTYPE_CODES[dtype]))
        chunks.append(array.astype(dtype, copy=False).tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, raw, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise CorruptCheckpointError(f"{self.path}: truncated at byte {self.pos} (needed {n} more)")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def decode_checkpoint(raw, path="<bytes>"):
    """Returns (config text, {name: array}); raises before building anything."""
    if len(raw) < len(MAGIC):
        raise CorruptCheckpointError(f"{path}: truncated at byte {len(raw)} (file shorter than the magic)")
    if raw[:4] != MAGIC:
        raise CheckpointMagicError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    reader = _Reader(raw, path)
    reader.take(4)
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    try:
        config_text = reader.take(reader.u32()).decode("utf-8")
    except UnicodeDecodeError as e:
        raise CorruptCheckpointError(f"{path}: config text is not UTF-8: {e}") from None
    tensors = {}
    for _ in range(reader.u32()):
        try:
            name = reader.take(reader.u32()).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CorruptCheckpointError(f"{path}: tensor name is not UTF-8: {e}") from None
        rank = reader.u32()
        shape = struct.unpack(f"<{rank}I", reader.take(4 * rank))
        code = struct.unpack("<B", reader.take(1))[0]
        if code not in CODE_DTYPES:
            raise CorruptCheckpointError(f"{path}: tensor {name!r} has unknown dtype code {code}")
        dtype = CODE_DTYPES[code]
        count = int(np.prod(shape, dtype=np.int64))
        payload = reader.take(count * dtype.itemsize)
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if reader.pos != len(raw):
        raise CorruptCheckpointError(f"{path}: {len(raw) - reader.pos} trailing bytes")
    return config_text, tensors


def build_model(config_text):
    try:
        payload = json.loads(config_text)
        kind = payload["kind"]
        if kind == TokenizerModel.kind:
            model = TokenizerModel(TokConfig(**payload["config"]), seed=payload["seed"])
            if payload.get("stage2"):
                model.init_stage2(payload["seed"])
            return model
        if kind == ARModel.kind:
            return ARModel(ARConfig(**payload["config"]), seed=payload["seed"])
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise CorruptCheckpointError(f"embedded config is unreadable: {e}") from None
    raise CorruptCheckpointError(f"unknown model kind {kind!r}")


def save_checkpoint(model, path):
    atomic_write_bytes(path, encode_checkpoint(model_config_text(model), model_tensors(model)))


def load_checkpoint(path):
    with open(path, "rb") as handle:
        raw = handle.read()
    config_text, tensors = decode_checkpoint(raw, path)
    model = build_model(config_text)

    expected = model_tensors(model)
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise CheckpointShapeError(f"{path}: tensor names differ from config (missing {missing[:3]}, extra {extra[:3]})")
    for name, array in tensors.items():
        if array.shape != expected[name].shape:
            raise CheckpointShapeError(
                f"{path}: tensor {name!r} has shape {array.shape}, config implies {expected[name].shape}"
            )

    params = model.named_parameters()
    for name, array in tensors.items():
        if name in params:
            params[name].data = array.astype(params[name].data.dtype)
    if "codebook.usage_ema" in tensors:
        model.codebook.usage_ema = tensors["codebook.usage_ema"].astype(np.float64)
    return model
