"""On-disk formats: .vvol volumes, .vsurf surfaces, PGM masks, float sidecars, manifests."""

import os
from pathlib import Path

import numpy as np

VVOL_MAGIC = b"VVOL1\n"
VSURF_MAGIC = b"VSURF1\n"
FMAP_MAGIC = b"FMAP1\n"
_DTYPES = {"u8": np.dtype("u1"), "f64": np.dtype("<f8")}


class FormatError(ValueError):
    pass


def atomic_write(path, data):
    """Write bytes via a temporary sibling and rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _read(path):
    path = Path(path)
    try:
        return path.read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"missing file: {path}") from None


def _split_header(raw, path, magic, nlines):
    if not raw.startswith(magic):
        raise FormatError(f"{path}: bad magic, expected {magic.strip().decode()}")
    pos = len(magic)
    lines = []
    for _ in range(nlines):
        end = raw.find(b"\n", pos)
        if end < 0:
            raise FormatError(f"{path}: truncated header")
        lines.append(raw[pos:end].decode("ascii"))
        pos = end + 1
    return lines, raw[pos:]


def vvol_bytes(data):
    data = np.asarray(data)
    if data.ndim != 3:
        raise FormatError(f"volume must be 3-D, got shape {data.shape}")
    if data.dtype == np.uint8:
        tag, payload = "u8", data.tobytes(order="C")
    else:
        tag, payload = "f64", data.astype("<f8").tobytes(order="C")
    L, W, H = data.shape
    return VVOL_MAGIC + f"{L} {W} {H} {tag}\n".encode() + payload


def write_vvol(path, data):
    atomic_write(path, vvol_bytes(data))


def read_vvol(path):
    raw = _read(path)
    (line,), payload = _split_header(raw, path, VVOL_MAGIC, 1)
    parts = line.split()
    if len(parts) != 4 or parts[3] not in _DTYPES:
        raise FormatError(f"{path}: bad dimension line {line!r}")
    L, W, H = (int(p) for p in parts[:3])
    dt = _DTYPES[parts[3]]
    expected = L * W * H * dt.itemsize
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype=dt).reshape(L, W, H)
    return arr.astype(np.uint8) if parts[3] == "u8" else arr.astype(np.float64)


def vsurf_bytes(surfaces):
    planes = [np.asarray(p) for p in (surfaces.ilm, surfaces.opl, surfaces.bm)]
    L, W = planes[0].shape
    payload = b"".join(p.astype("<i4").tobytes(order="C") for p in planes)
    return VSURF_MAGIC + f"{L} {W} 3\n".encode() + payload


def write_vsurf(path, surfaces):
    atomic_write(path, vsurf_bytes(surfaces))


def read_vsurf(path):
    from .projection import LayerSurfaces

    raw = _read(path)
    (line,), payload = _split_header(raw, path, VSURF_MAGIC, 1)
    parts = line.split()
    if len(parts) != 3 or parts[2] != "3":
        raise FormatError(f"{path}: bad dimension line {line!r}")
    L, W = int(parts[0]), int(parts[1])
    if len(payload) != 3 * L * W * 4:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {3 * L * W * 4}")
    planes = np.frombuffer(payload, dtype="<i4").reshape(3, L, W)
    return LayerSurfaces(*(p.astype(np.int64) for p in planes))


def pgm_bytes(img):
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise FormatError(f"PGM data must be a 2-D uint8 array, got {img.dtype} {img.shape}")
    rows, cols = img.shape
    return f"P5\n{cols} {rows}\n255\n".encode() + img.tobytes(order="C")


def write_pgm(path, img):
    atomic_write(path, pgm_bytes(img))


def read_pgm(path):
    raw = _read(path)
    if not raw.startswith(b"P5"):
        raise FormatError(f"{path}: not a binary PGM (P5)")
    # header: magic, width, height, maxval separated by whitespace; '#' comments allowed
    fields, pos = [], 2
    while len(fields) < 3:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1
    cols, rows, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    data = raw[pos:pos + rows * cols]
    if len(data) != rows * cols:
        raise FormatError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(rows, cols).copy()


def write_mask(path, mask):
    write_pgm(path, np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8))


def read_mask(path):
    img = read_pgm(path)
    if not np.isin(img, (0, 255)).all():
        raise FormatError(f"{path}: mask must contain only 0 and 255")
    return img == 255


def to_u8(img):
    """Min-max scale a float map to 8 bits (constant maps become 0)."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = img.min(), img.max()
    if hi <= lo:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.round((img - lo) / (hi - lo) * 255.0).astype(np.uint8)


def fmap_bytes(data):
    data = np.asarray(data, dtype=np.float64)
    dims = " ".join(str(d) for d in data.shape)
    return FMAP_MAGIC + f"{data.ndim} {dims}\n".encode() + data.astype("<f8").tobytes(order="C")


def write_fmap(path, data):
    """Raw float64 sidecar holding exact map values."""
    atomic_write(path, fmap_bytes(data))


def read_fmap(path):
    raw = _read(path)
    (line,), payload = _split_header(raw, path, FMAP_MAGIC, 1)
    parts = [int(p) for p in line.split()]
    shape = tuple(parts[1:1 + parts[0]])
    n = int(np.prod(shape, dtype=np.int64))
    if len(payload) != 8 * n:
        raise FormatError(f"{path}: payload size mismatch")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).copy()


def write_manifest(path, entries):
    atomic_write(path, "".join(f"{sid}\t{split}\n" for sid, split in entries).encode())


def read_manifest(path):
    entries = []
    for n, line in enumerate(_read(path).decode().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise FormatError(f"{path}:{n}: expected 'id<TAB>split', got {line!r}")
        entries.append((parts[0], parts[1]))
    return entries
