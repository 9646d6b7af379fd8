"""Binary PPM (P6) read/write for float RGB images in [0, 1]."""
import os
import tempfile

import numpy as np

from models import AliTokError


class ImageFormatError(AliTokError, ValueError):
    pass


def to_bytes(image):
    """Clamp to [0,1], scale by 255 and round half away from zero."""
    pixels = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(pixels)):
        raise ImageFormatError("image contains NaN or Inf")
    scaled = np.clip(pixels, 0.0, 1.0) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)


def atomic_write_bytes(path, payload):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp_", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def write_ppm(image, path):
    pixels = np.asarray(image)
    if pixels.ndim != 3 or pixels.shape[-1] != 3:
        raise ImageFormatError(f"write_ppm expects [h, w, 3], got {pixels.shape}")
    h, w = pixels.shape[:2]
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + to_bytes(pixels).tobytes())


def read_ppm(path):
    """Return a float32 [h, w, 3] image in [0, 1]."""
    with open(path, "rb") as handle:
        raw = handle.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: truncated PPM header")
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ImageFormatError(f"{path}: only binary P6 with max value 255 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    body = np.frombuffer(raw, dtype=np.uint8, count=h * w * 3, offset=pos)
    return (body.reshape(h, w, 3).astype(np.float32)) / np.float32(255.0)
