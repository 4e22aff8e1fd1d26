"""Binary PPM (P6) image I/O with a seed sidecar."""

from __future__ import annotations

import numpy as np


class PpmError(ValueError):
    pass


def write_ppm(path, img: np.ndarray) -> None:
    """img is channel-first float in [0, 1]; stored as maxval-255 P6."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise PpmError(f"expected (3, h, w) image, got {img.shape}")
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    bytes_hwc = np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)
    h, w = bytes_hwc.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(bytes_hwc.tobytes(order="C"))


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    if fields[0] != b"P6":
        raise PpmError("not a P6 file")
    w, h, maxval = (int(x) for x in fields[1:])
    if maxval != 255:
        raise PpmError(f"unsupported maxval {maxval}")
    pos += 1  # single whitespace after maxval
    data = blob[pos:pos + w * h * 3]
    if len(data) != w * h * 3:
        raise PpmError("truncated pixel data")
    hwc = np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)
    return (hwc.transpose(2, 0, 1).astype(np.float32) / 255.0)


def write_sidecar(path, seed: int) -> None:
    with open(str(path) + ".meta", "w", encoding="utf-8") as f:
        f.write(f"seed={int(seed)}\n")


def read_sidecar(path) -> int:
    with open(str(path) + ".meta", "r", encoding="utf-8") as f:
        line = f.readline().strip()
    key, _, val = line.partition("=")
    if key != "seed":
        raise PpmError(f"bad sidecar line {line!r}")
    return int(val)
