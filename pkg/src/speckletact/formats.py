"""Binary file formats: PGM (P5) previews, SPKL sample files, TNSR tensor blobs.

SPKL: b"SPKL", u32 version, u32 H, u32 W, then H*W little-endian float32.
TNSR: b"TNSR", u32 version, u32 rank, rank x u32 extents, little-endian float32.
"""
import struct

import numpy as np

from .errors import FormatError

SPKL_MAGIC = b"SPKL"
TNSR_MAGIC = b"TNSR"
FORMAT_VERSION = 1


def write_pgm(path, image):
    img = np.asarray(image)
    if img.dtype != np.uint8:
        peak = float(img.max()) if img.size else 0.0
        scaled = img / peak if peak > 0 else np.zeros_like(img, dtype=np.float64)
        img = np.clip(np.rint(scaled * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM is supported")
    pixels = data[pos + 1:pos + 1 + w * h]
    if len(pixels) != w * h:
        raise FormatError(f"{path}: PGM payload truncated")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w).copy()


def encode_spkl(image):
    img = np.ascontiguousarray(image, dtype="<f4")
    if img.ndim != 2:
        raise FormatError("SPKL images must be 2-D")
    h, w = img.shape
    return SPKL_MAGIC + struct.pack("<III", FORMAT_VERSION, h, w) + img.tobytes()


def decode_spkl(blob, name="<bytes>"):
    if len(blob) < 16 or blob[:4] != SPKL_MAGIC:
        raise FormatError(f"{name}: not an SPKL sample file")
    version, h, w = struct.unpack("<III", blob[4:16])
    if version != FORMAT_VERSION:
        raise FormatError(f"{name}: unsupported SPKL version {version}")
    if len(blob) != 16 + 4 * h * w:
        raise FormatError(f"{name}: SPKL payload length does not match {h}x{w} header")
    return np.frombuffer(blob, dtype="<f4", offset=16).reshape(h, w).astype(np.float32)


def write_spkl(path, image):
    with open(path, "wb") as fh:
        fh.write(encode_spkl(image))


def read_spkl(path):
    with open(path, "rb") as fh:
        return decode_spkl(fh.read(), str(path))


def encode_tensor(array):
    arr = np.asarray(array, dtype="<f4", order="C")
    header = TNSR_MAGIC + struct.pack("<II", FORMAT_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def decode_tensor(blob, name="<bytes>"):
    if len(blob) < 12 or blob[:4] != TNSR_MAGIC:
        raise FormatError(f"{name}: bad TNSR magic")
    version, rank = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise FormatError(f"{name}: unsupported TNSR version {version}")
    end = 12 + 4 * rank
    if len(blob) < end:
        raise FormatError(f"{name}: truncated TNSR header")
    shape = struct.unpack(f"<{rank}I", blob[12:end])
    count = int(np.prod(shape)) if rank else 1
    if len(blob) != end + 4 * count:
        raise FormatError(f"{name}: TNSR payload length mismatch")
    return np.frombuffer(blob, dtype="<f4", offset=end).reshape(shape).astype(np.float32)
