"""Binary portable pixmap/graymap IO (P6 images, P5 class maps)."""
from __future__ import annotations

import numpy as np


class PnmError(ValueError):
    pass


def _write_header(kind, width, height, maxval=255):
    return f"{kind}\n{width} {height}\n{maxval}\n".encode("ascii")


def write_pgm(path, class_map):
    """Class id per pixel, 8-bit binary graymap."""
    arr = np.asarray(class_map)
    if arr.ndim != 2 or arr.min() < 0 or arr.max() > 255:
        raise PnmError(f"class map must be 2-d with ids in [0, 255], got {arr.shape}")
    with open(path, "wb") as f:
        f.write(_write_header("P5", arr.shape[1], arr.shape[0]))
        f.write(arr.astype(np.uint8).tobytes())


def write_ppm(path, image):
    """RGB image in [0, 1] (H, W, 3) or (3, H, W), quantized to 8 bits."""
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[0] == 3:
        arr = arr.transpose(1, 2, 0)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise PnmError(f"image must be HxWx3 or 3xHxW, got {arr.shape}")
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(_write_header("P6", arr.shape[1], arr.shape[0]))
        f.write(data.tobytes())


def _read_header(f, kind):
    magic = f.read(2)
    if magic != kind.encode("ascii"):
        raise PnmError(f"expected {kind} file, got magic {magic!r}")
    fields = []
    while len(fields) < 3:
        line = f.readline()
        if not line:
            raise PnmError("truncated PNM header")
        text = line.split(b"#", 1)[0]
        fields.extend(int(tok) for tok in text.split())
    width, height, maxval = fields[:3]
    if maxval != 255:
        raise PnmError(f"only 8-bit PNM supported, maxval {maxval}")
    return width, height


def read_pgm(path):
    with open(path, "rb") as f:
        width, height = _read_header(f, "P5")
        data = np.frombuffer(f.read(width * height), dtype=np.uint8)
    if data.size != width * height:
        raise PnmError("truncated PGM data")
    return data.reshape(height, width).astype(np.int32)


def read_ppm(path):
    """Returns a float image in [0, 1], shape (3, H, W)."""
    with open(path, "rb") as f:
        width, height = _read_header(f, "P6")
        data = np.frombuffer(f.read(width * height * 3), dtype=np.uint8)
    if data.size != width * height * 3:
        raise PnmError("truncated PPM data")
    img = data.reshape(height, width, 3).astype(np.float32) / 255.0
    return img.transpose(2, 0, 1)
