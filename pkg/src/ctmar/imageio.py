"""8-bit PGM export for windowed images and spectra.

Binary PGM (P5) is the one format simple enough to write and re-read
exactly with no dependencies; quantization rounds half up so the
write/read/requantize cycle is a fixed point.
"""

import numpy as np

from .losses import apply_window


def quantize8(img01):
    """[0, 1] floats -> u8 with round-half-up ties."""
    arr = np.asarray(img01, np.float64)
    return np.clip(np.floor(arr * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_pgm(path, img01):
    q = quantize8(img01)
    if q.ndim != 2:
        raise ValueError(f"PGM wants a 2-d image, got shape {q.shape}")
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(q.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    img = np.frombuffer(data, np.uint8, count=w * h, offset=pos)
    return img.reshape(h, w).copy()


def write_window_pgm(path, x_norm, window):
    write_pgm(path, apply_window(np.asarray(x_norm), window))


def spectrum_image(arr):
    """Log-magnitude centered 2-d spectrum, peak-normalized to [0, 1]."""
    arr = np.asarray(arr, np.float64)
    if arr.ndim != 2:
        raise ValueError(f"need a 2-d array, got shape {arr.shape}")
    mag = np.log1p(np.abs(np.fft.fftshift(np.fft.fft2(arr))))
    peak = mag.max()
    return mag / peak if peak > 0 else mag
