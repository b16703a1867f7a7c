"""Readers/writers for the on-disk formats: PFM, PGM, PPM, checkpoints.

Depth maps travel as little-endian PFM (scale header -1.0, bottom-up rows per
the format spec). Invalid depth is encoded as 0.0; the validity mask is
derived as depth > 0 unless a sidecar PGM mask exists, in which case the
sidecar wins. Images are binary PPM (P6, 8-bit), masks binary PGM (P5).
"""

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import IOFormatError
from .types import DepthMap

CHECKPOINT_MAGIC = b"PRKC"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# PFM
# ---------------------------------------------------------------------------

def write_pfm(path, values):
    """Write a 2-D float array as grayscale PFM (little-endian, bottom-up)."""
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim != 2:
        raise IOFormatError(f"PFM writer expects a 2-D array, got {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(arr[::-1].astype("<f4").tobytes())


def _read_token(f, path):
    # tokens are whitespace-separated; '#' comments run to end of line
    token = b""
    while True:
        ch = f.read(1)
        if not ch:
            if token:
                return token
            raise IOFormatError(f"{path}: unexpected end of header at byte {f.tell()}")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        if ch.isspace():
            if token:
                return token
            continue
        token += ch


def read_pfm(path):
    """Read a grayscale PFM; rejects big-endian (positive scale) files."""
    with open(path, "rb") as f:
        magic = _read_token(f, path)
        if magic != b"Pf":
            raise IOFormatError(
                f"{path}: bad PFM magic {magic!r} at byte 0 (color 'PF' unsupported)")
        w = int(_read_token(f, path))
        h = int(_read_token(f, path))
        scale_pos = f.tell()
        scale = float(_read_token(f, path))
        if scale > 0:
            raise IOFormatError(
                f"{path}: positive scale header at byte {scale_pos} means big-endian "
                "data; only little-endian (negative scale) PFM is supported")
        data_pos = f.tell()
        raw = f.read(4 * w * h)
        if len(raw) != 4 * w * h:
            raise IOFormatError(
                f"{path}: truncated pixel data at byte {data_pos + len(raw)}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(h, w)
    return np.ascontiguousarray(arr[::-1], dtype=np.float64)


def write_depth(path, depth):
    """DepthMap -> PFM with invalid pixels stored as 0.0."""
    values = np.where(depth.valid, depth.values, 0.0)
    write_pfm(path, values)


def read_depth(path):
    """PFM -> DepthMap; mask from a sidecar `<stem>_mask.pgm` if present,
    otherwise derived as depth > 0."""
    values = read_pfm(path)
    path = Path(path)
    sidecar = path.with_name(path.stem + "_mask.pgm")
    if sidecar.exists():
        valid = read_pgm(sidecar) > 0
    else:
        valid = values > 0
    return DepthMap(values, valid)


# ---------------------------------------------------------------------------
# PGM / PPM (binary, 8-bit)
# ---------------------------------------------------------------------------

def _write_netpbm(path, magic, arr):
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n")
        f.write(f"{w} {h}\n255\n".encode("ascii"))
        f.write(arr.astype(np.uint8).tobytes())


def write_pgm(path, values):
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise IOFormatError(f"PGM writer expects a 2-D array, got {arr.shape}")
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    _write_netpbm(path, b"P5", arr)


def write_ppm(path, image):
    """image is [3,H,W] float in [0,1] or [H,W,3] uint8."""
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[0] == 3 and arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise IOFormatError(f"PPM writer expects [3,H,W] float or [H,W,3] bytes, got {arr.shape}")
    _write_netpbm(path, b"P6", arr)


def _read_netpbm(path, expect_magic):
    with open(path, "rb") as f:
        magic = _read_token(f, path)
        if magic != expect_magic:
            raise IOFormatError(f"{path}: bad magic {magic!r} at byte 0, "
                                f"expected {expect_magic.decode()}")
        w = int(_read_token(f, path))
        h = int(_read_token(f, path))
        maxval = int(_read_token(f, path))
        if maxval != 255:
            raise IOFormatError(f"{path}: only 8-bit maps supported, maxval={maxval}")
        channels = 3 if expect_magic == b"P6" else 1
        pos = f.tell()
        raw = f.read(w * h * channels)
        if len(raw) != w * h * channels:
            raise IOFormatError(f"{path}: truncated pixel data at byte {pos + len(raw)}")
    arr = np.frombuffer(raw, dtype=np.uint8)
    return arr.reshape(h, w) if channels == 1 else arr.reshape(h, w, 3)


def read_pgm(path):
    return _read_netpbm(path, b"P5")


def read_ppm(path):
    """Returns [3,H,W] float64 in [0,1]."""
    arr = _read_netpbm(path, b"P6")
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# checkpoints: named f64 parameter blobs + JSON sidecar
# ---------------------------------------------------------------------------

def save_checkpoint(path, named_params, config, stage):
    """named_params: ordered list of (name, np.ndarray). Writes `<path>` and a
    `<path>.json` sidecar describing the run config and training stage."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(named_params)))
        for name, arr in named_params:
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            blob = name.encode("utf-8")
            f.write(struct.pack("<H", len(blob)))
            f.write(blob)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f8").tobytes())
    sidecar = {"format_version": CHECKPOINT_VERSION, "stage": stage, "config": config}
    with open(path.with_suffix(path.suffix + ".json"), "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")


def load_checkpoint(path):
    """Returns (params: dict name->ndarray preserving file order, sidecar dict)."""
    path = Path(path)
    params = {}
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise IOFormatError(f"{path}: bad checkpoint magic {magic!r} at byte 0")
        version, count = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise IOFormatError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            raw = f.read(8 * n)
            if len(raw) != 8 * n:
                raise IOFormatError(f"{path}: truncated blob for parameter {name!r}")
            params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    sidecar_path = path.with_suffix(path.suffix + ".json")
    sidecar = {}
    if sidecar_path.exists():
        with open(sidecar_path) as f:
            sidecar = json.load(f)
    return params, sidecar


def file_sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()
