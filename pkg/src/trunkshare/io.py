"""On-disk formats: TSR1 tensors, CKP1 checkpoints, PPM/PGM images.

TSR1: magic b"TSR1", u32 rank, u32 extents, then raw float64 values.
CKP1: magic b"CKP1", u32 version (1), u32 record count, then per record
      u32 name length, utf-8 name, TSR1 blob. Record order is preserved.
All integers little-endian.
"""

import struct
from pathlib import Path

import numpy as np

from .errors import ContractError

TSR1_MAGIC = b"TSR1"
CKP1_MAGIC = b"CKP1"
CKP1_VERSION = 1


def tsr1_bytes(arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    head = TSR1_MAGIC + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype("<f8").tobytes()


def tsr1_from(buf, offset=0):
    """Parse one TSR1 blob; returns (array, next_offset)."""
    if buf[offset:offset + 4] != TSR1_MAGIC:
        raise ContractError("bad TSR1 magic")
    offset += 4
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    shape = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    n = int(np.prod(shape)) if rank else 1
    arr = np.frombuffer(buf, dtype="<f8", count=n, offset=offset)
    offset += 8 * n
    return arr.reshape(shape).astype(np.float64), offset


def save_tsr1(path, arr):
    Path(path).write_bytes(tsr1_bytes(arr))


def load_tsr1(path):
    arr, _ = tsr1_from(Path(path).read_bytes())
    return arr


def save_ckp1(path, named):
    """Write an ordered {name: array} mapping as a CKP1 checkpoint."""
    parts = [CKP1_MAGIC, struct.pack("<II", CKP1_VERSION, len(named))]
    for name, arr in named.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(tsr1_bytes(arr))
    Path(path).write_bytes(b"".join(parts))


def load_ckp1(path):
    buf = Path(path).read_bytes()
    if buf[:4] != CKP1_MAGIC:
        raise ContractError(f"bad CKP1 magic in {path}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CKP1_VERSION:
        raise ContractError(f"unsupported CKP1 version {version}")
    offset = 12
    named = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        name = buf[offset:offset + nlen].decode("utf-8")
        offset += nlen
        arr, offset = tsr1_from(buf, offset)
        named[name] = arr
    return named


# ---------------------------------------------------------------------------
# netpbm images (binary P6/P5) — the only image formats we read or write


def save_ppm(path, img):
    """img: float array [3,H,W] in [0,1] or uint8 [3,H,W]."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ContractError(f"PPM wants [3,H,W], got {img.shape}")
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[1], img.shape[2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.transpose(1, 2, 0).tobytes())


def load_ppm(path):
    """Returns float [3,H,W] in [0,1]."""
    data = _read_pnm(path, b"P6")
    return data.transpose(2, 0, 1).astype(np.float64) / 255.0


def save_pgm(path, labels):
    """labels: int array [H,W] with values in [0,255]."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ContractError(f"PGM wants [H,W], got {labels.shape}")
    if labels.min() < 0 or labels.max() > 255:
        raise ContractError("PGM values must fit in a byte")
    h, w = labels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(labels.astype(np.uint8).tobytes())


def load_pgm(path):
    return _read_pnm(path, b"P5").astype(np.int64)


def _read_pnm(path, magic):
    buf = Path(path).read_bytes()
    if not buf.startswith(magic):
        raise ContractError(f"{path}: expected {magic.decode()} file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":  # comment line
            while buf[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(buf[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ContractError(f"{path}: only 8-bit netpbm supported")
    channels = 3 if magic == b"P6" else 1
    arr = np.frombuffer(buf, dtype=np.uint8, count=w * h * channels, offset=pos)
    if channels == 3:
        return arr.reshape(h, w, 3)
    return arr.reshape(h, w)
