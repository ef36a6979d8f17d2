"""Reader and writer for the ``CSTY`` binary tensor format.

Layout: ``b"CSTY"``, u32 version, u32 rank, rank x u64 dims, then the
row-major float32 payload. All integers and floats are little-endian.
"""
import hashlib
import struct
from pathlib import Path

import numpy as np

from .errors import ArtifactError

MAGIC = b"CSTY"
VERSION = 1
MAX_RANK = 8


def encode(array):
    a = np.ascontiguousarray(array, dtype="<f4")
    head = MAGIC + struct.pack("<II", VERSION, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes()


def decode(buf, path="<bytes>"):
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise ArtifactError(path, 0, "bad magic bytes")
    if len(buf) < 12:
        raise ArtifactError(path, len(buf), "truncated header")
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ArtifactError(path, 4, f"unsupported version {version}")
    if rank > MAX_RANK:
        raise ArtifactError(path, 8, f"implausible rank {rank}")
    off = 12
    if len(buf) < off + 8 * rank:
        raise ArtifactError(path, len(buf), "truncated dims")
    dims = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(buf) != off + 4 * count:
        raise ArtifactError(path, min(len(buf), off + 4 * count),
                            f"payload holds {len(buf) - off} bytes, dims need {4 * count}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).astype(np.float32).reshape(dims)


def save(path, array):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode(array))


def load(path):
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise ArtifactError(path, 0, f"unreadable ({exc.strerror})") from exc
    return decode(buf, path)


def checksum(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
