"""Image and token-map persistence.

Images live on disk as 8-bit RGB (PNG via Pillow, or plain-text PPM for
dependency-free inspection); in memory everything is float64 in [0, 1].
Quantization to u8 is part of the pipeline under test, so saving is lossy by
design and the save/load pair is the identity only on already-quantized
arrays.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .core import dequantize_u8, quantize_u8, validate_image

__all__ = [
    "save_png",
    "load_png",
    "save_ppm",
    "load_ppm",
    "save_tokens",
    "load_tokens",
]


def save_png(path, image: np.ndarray) -> None:
    validate_image(image)
    Image.fromarray(quantize_u8(image), mode="RGB").save(Path(path), format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(Path(path)) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return dequantize_u8(arr)


def save_ppm(path, image: np.ndarray) -> None:
    """ASCII PPM (P3), one pixel per line."""
    validate_image(image)
    u8 = quantize_u8(image)
    h, w = u8.shape[:2]
    lines = [f"P3", f"{w} {h}", "255"]
    flat = u8.reshape(-1, 3)
    lines.extend(f"{r} {g} {b}" for r, g, b in flat)
    Path(path).write_text("\n".join(lines) + "\n")


def load_ppm(path) -> np.ndarray:
    text = Path(path).read_text()
    fields = []
    for line in text.splitlines():
        body = line.split("#", 1)[0]
        fields.extend(body.split())
    if not fields or fields[0] != "P3":
        raise ValueError("not an ASCII PPM (P3) file")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    vals = np.array(fields[4:4 + 3 * w * h], dtype=np.int64)
    if vals.size != 3 * w * h:
        raise ValueError("truncated PPM payload")
    if vals.min() < 0 or vals.max() > 255:
        raise ValueError("sample out of range")
    return dequantize_u8(vals.reshape(h, w, 3).astype(np.uint8))


def save_tokens(path, tokens: np.ndarray, vocab_size: int) -> None:
    """Token grid as JSON: shape, vocab size, row-major values."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError("token grid must be 2-D")
    if tokens.min() < 0 or tokens.max() >= vocab_size:
        raise ValueError("token out of vocabulary range")
    payload = {
        "format": "vqmark-tokens-v1",
        "height": int(tokens.shape[0]),
        "width": int(tokens.shape[1]),
        "vocab_size": int(vocab_size),
        "tokens": [int(t) for t in tokens.reshape(-1)],
    }
    Path(path).write_text(json.dumps(payload))


def load_tokens(path) -> tuple:
    """Returns (tokens, vocab_size)."""
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != "vqmark-tokens-v1":
        raise ValueError("unrecognized token file format")
    h, w, vocab = payload["height"], payload["width"], payload["vocab_size"]
    tokens = np.array(payload["tokens"], dtype=np.int64).reshape(h, w)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab):
        raise ValueError("token out of vocabulary range")
    return tokens, vocab
