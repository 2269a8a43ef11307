"""Binary checkpoint container.

Layout (all integers little-endian, floats IEEE-754 binary64 little-endian)::

    magic        8 bytes   b"NICCKPT\\0"
    version      u32       FORMAT_VERSION
    feature_dim  u32
    embed_dim    u32
    vocab_size   u32
    step         u64       training steps taken
    vocab_sha256 32 bytes  Vocabulary.digest()
    n_tokens     u32       then per token: u16 byte length + UTF-8 bytes
    n_matrices   u32       then per matrix:
        u16 name length + ASCII name, u32 rows, u32 cols, rows*cols f64 (row-major)
    crc32        u32       over every preceding byte

Writes go to a temporary file that is renamed into place, so a reader never
sees a half-written checkpoint.
"""

import os
import struct
import zlib

import numpy as np

from .errors import CheckpointError, CheckpointVersionError, VocabularyMismatch
from .model import PARAM_NAMES, ModelDims, ModelParams
from .vocab import RESERVED, Vocabulary

MAGIC = b"NICCKPT\0"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIIIIQ32s")


def dumps(params, vocab, step=0):
    dims = params.dims
    if dims.vocab_size != len(vocab):
        raise CheckpointError(f"vocabulary size {len(vocab)} != model vocab size {dims.vocab_size}")
    out = [_HEADER.pack(MAGIC, FORMAT_VERSION, dims.feature_dim, dims.embed_dim,
                        dims.vocab_size, step, vocab.digest())]
    out.append(struct.pack("<I", len(vocab)))
    for tok in vocab.itos:
        raw = tok.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
    items = params.items()
    out.append(struct.pack("<I", len(items)))
    for name, w in items:
        raw = name.encode("ascii")
        rows, cols = w.shape
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<II", rows, cols))
        out.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint truncated")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def loads(buf, expected_vocab=None):
    if len(buf) < _HEADER.size + 4:
        raise CheckpointError("checkpoint truncated")
    if buf[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    # Version is checked before the CRC so an old-but-intact file reports a
    # version problem rather than corruption.
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch (corrupt or truncated file)")

    r = _Reader(body)
    _, _, F, d, V, step, digest = r.unpack(_HEADER.format)
    (n_tok,) = r.unpack("<I")
    tokens = []
    for _ in range(n_tok):
        (n,) = r.unpack("<H")
        tokens.append(r.take(n).decode("utf-8"))
    if tuple(tokens[:len(RESERVED)]) != RESERVED:
        raise CheckpointError("checkpoint vocabulary lacks reserved tokens")
    vocab = Vocabulary(tokens[len(RESERVED):])
    if vocab.digest() != digest:
        raise CheckpointError("stored vocabulary does not match its header hash")
    if expected_vocab is not None and expected_vocab.digest() != digest:
        raise VocabularyMismatch("checkpoint was trained with a different vocabulary")

    dims = ModelDims(F, d, V)
    (n_mat,) = r.unpack("<I")
    mats = {}
    for _ in range(n_mat):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("ascii")
        rows, cols = r.unpack("<II")
        if name not in PARAM_NAMES or (rows, cols) != dims.shape_of(name):
            raise CheckpointError(f"unexpected matrix {name} with shape {(rows, cols)}")
        mats[name] = np.frombuffer(r.take(8 * rows * cols), dtype="<f8").astype(np.float64).reshape(rows, cols)
    if set(mats) != set(PARAM_NAMES) or r.pos != len(body):
        raise CheckpointError("checkpoint matrix table is incomplete or has trailing data")
    return ModelParams(**mats), vocab, step


def save_checkpoint(params, vocab, step, path):
    data = dumps(params, vocab, step)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def load_checkpoint(path, expected_vocab=None):
    """Return ``(params, vocab, step)``."""
    with open(path, "rb") as f:
        return loads(f.read(), expected_vocab)
