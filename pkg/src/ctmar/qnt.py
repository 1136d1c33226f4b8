"""QNT1 binary tensor files and the QNTC1 multi-tensor container.

QNT1 record layout (little-endian throughout):

    bytes 0..3   magic b"QNT1"
    byte  4      dtype code: 0 = float32, 1 = float64
    bytes 5..8   u32 ndim
    then         u32 extents[ndim]
    then         payload, row-major

QNTC1 container (used for checkpoints): a text header followed by raw QNT1
blobs. Header lines:

    QNTC1
    meta.<key> = <value>        (zero or more)
    tensors = <n>
    <name> <offset> <length>    (n lines, offsets relative to blob section)
    <blank line>

The container round-trips losslessly and is written atomically
(temp file + rename).
"""

import os
import struct
import tempfile

import numpy as np

_MAGIC = b"QNT1"
_DTYPES = {0: np.float32, 1: np.float64}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class QntError(ValueError):
    pass


def tensor_bytes(arr):
    """Serialize an array to QNT1 bytes. Only f32/f64 are representable."""
    arr = np.asarray(arr)
    if arr.ndim:  # ascontiguousarray would silently promote 0-d to 1-d
        arr = np.ascontiguousarray(arr)
    if arr.dtype not in _CODES:
        raise QntError(f"QNT1 stores f32/f64 only, got {arr.dtype}")
    code = _CODES[arr.dtype]
    head = _MAGIC + struct.pack("<BI", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    if arr.dtype.byteorder == ">":  # big-endian array on any platform
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return head + arr.tobytes()


def tensor_from_bytes(buf):
    if buf[:4] != _MAGIC:
        raise QntError(f"bad magic {buf[:4]!r}, expected {_MAGIC!r}")
    code, ndim = struct.unpack_from("<BI", buf, 4)
    if code not in _DTYPES:
        raise QntError(f"unknown dtype code {code}")
    off = 9
    shape = struct.unpack_from(f"<{ndim}I", buf, off) if ndim else ()
    off += 4 * ndim
    dt = np.dtype(_DTYPES[code]).newbyteorder("<")
    n = int(np.prod(shape)) if shape else 1
    want = off + n * dt.itemsize
    if len(buf) != want:
        raise QntError(f"payload size {len(buf) - off} != expected {want - off}")
    arr = np.frombuffer(buf, dtype=dt, count=n, offset=off).reshape(shape)
    return arr.astype(arr.dtype.newbyteorder("=")).copy()


def save_tensor(path, arr):
    _atomic_write(path, tensor_bytes(arr))


def load_tensor(path):
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())


def _atomic_write(path, data):
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".qnt-tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_bundle(path, tensors, meta=None):
    """Write named arrays plus string metadata to one QNTC1 container file.

    ``tensors``: dict name -> array. Names must be whitespace-free.
    """
    meta = meta or {}
    blobs = []
    index = []
    off = 0
    for name, arr in tensors.items():
        if any(c.isspace() for c in name) or not name:
            raise QntError(f"bad tensor name {name!r}")
        b = tensor_bytes(arr)
        index.append((name, off, len(b)))
        blobs.append(b)
        off += len(b)
    lines = ["QNTC1"]
    for k, v in meta.items():
        k, v = str(k), str(v)
        if "\n" in k or "\n" in v or "=" in k:
            raise QntError(f"bad meta entry {k!r}")
        lines.append(f"meta.{k} = {v}")
    lines.append(f"tensors = {len(index)}")
    for name, o, ln in index:
        lines.append(f"{name} {o} {ln}")
    lines.append("")
    header = ("\n".join(lines) + "\n").encode()
    _atomic_write(path, header + b"".join(blobs))


def load_bundle(path):
    """Read a QNTC1 container -> (tensors dict, meta dict)."""
    with open(path, "rb") as fh:
        data = fh.read()
    # Header is all text up to the first blank line.
    sep = data.find(b"\n\n")
    if sep < 0 or not data.startswith(b"QNTC1\n"):
        raise QntError("not a QNTC1 container")
    header = data[:sep].decode()
    blob0 = sep + 2
    meta, index = {}, []
    count = None
    for line in header.splitlines()[1:]:
        if line.startswith("meta."):
            k, _, v = line[5:].partition(" = ")
            meta[k] = v
        elif line.startswith("tensors = "):
            count = int(line.split(" = ")[1])
        else:
            name, o, ln = line.rsplit(" ", 2)
            index.append((name, int(o), int(ln)))
    if count is None or count != len(index):
        raise QntError("corrupt container index")
    tensors = {}
    for name, o, ln in index:
        tensors[name] = tensor_from_bytes(data[blob0 + o : blob0 + o + ln])
    return tensors, meta
