"""Binary on-disk formats for doc blocks and index snapshots.

Everything is little-endian. Both formats end with a CRC32 of all preceding
bytes; loaders reject bad magic numbers, truncated files, and CRC mismatches.

Snapshot layout (magic ``MMTO``):

    header:   magic 4s | format_version u32 | dim u32 | n_docs u64
              | n_clusters u32 | seed u64
    body:     centroids (n_clusters * dim f32)
              posting offsets ((n_clusters + 1) u64, in posting entries)
              posting lists (n_docs u64 doc ids)
              quantized vectors (per doc: f32 norm + dim i8 codes,
              ascending doc id order)
              doc metadata (per doc: u16 user len + utf8, u32 source id,
              u32 epoch start day)
    trailer:  crc32 u32

Doc block layout (magic ``MMTD``) stores full MementoDoc records and is the
chunker's output format, consumed by ``index build``.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Sequence

import numpy as np

from .chunker import MementoDoc
from .core import QuantizedEmbedding, SourceId
from .errors import SnapshotFormatError
from .vindex import IndexSnapshot

SNAPSHOT_MAGIC = b"MMTO"
DOCS_MAGIC = b"MMTD"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sIIQIQ")  # magic, version, dim, n_docs, n_clusters, seed
_DOCS_HEADER = struct.Struct("<4sIQ")  # magic, version, n_docs


def _finish(path: Path, payload: bytes) -> None:
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    path.write_bytes(payload + struct.pack("<I", crc))


def _open_checked(path: Path, magic: bytes) -> bytes:
    blob = path.read_bytes()
    if len(blob) < len(magic) + 4:
        raise SnapshotFormatError(f"{path}: truncated file")
    payload, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise SnapshotFormatError(f"{path}: CRC mismatch")
    if payload[: len(magic)] != magic:
        raise SnapshotFormatError(f"{path}: bad magic {payload[:len(magic)]!r}")
    return payload


def save_snapshot(snapshot: IndexSnapshot, path: str | Path) -> None:
    """Serialize a snapshot. The runtime version number is not stored."""
    parts = [
        _HEADER.pack(
            SNAPSHOT_MAGIC,
            FORMAT_VERSION,
            snapshot.dim,
            snapshot.n_docs,
            snapshot.n_clusters,
            snapshot.seed,
        ),
        np.ascontiguousarray(snapshot.centroids, dtype="<f4").tobytes(),
        np.ascontiguousarray(snapshot.posting_offsets, dtype="<u8").tobytes(),
        np.ascontiguousarray(snapshot.posting_doc_ids, dtype="<u8").tobytes(),
    ]
    vec = np.empty(
        snapshot.n_docs, dtype=[("norm", "<f4"), ("codes", "i1", (snapshot.dim,))]
    )
    vec["norm"] = snapshot.norms
    vec["codes"] = snapshot.codes
    parts.append(vec.tobytes())
    meta = bytearray()
    for i in range(snapshot.n_docs):
        user = snapshot.user_ids[i].encode("utf-8")
        meta += struct.pack("<H", len(user))
        meta += user
        meta += struct.pack("<II", int(snapshot.source_ids[i]), int(snapshot.epoch_start_days[i]))
    parts.append(bytes(meta))
    _finish(Path(path), b"".join(parts))


def load_snapshot(path: str | Path) -> IndexSnapshot:
    """Load and validate a snapshot file; the result has version 0."""
    payload = _open_checked(Path(path), SNAPSHOT_MAGIC)
    magic, version, dim, n_docs, n_clusters, seed = _HEADER.unpack_from(payload, 0)
    if version != FORMAT_VERSION:
        raise SnapshotFormatError(f"{path}: unsupported format version {version}")
    off = _HEADER.size

    def take(count: int, dtype) -> np.ndarray:
        nonlocal off
        dt = np.dtype(dtype)
        nbytes = count * dt.itemsize
        if off + nbytes > len(payload):
            raise SnapshotFormatError(f"{path}: truncated body")
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=off)
        off += nbytes
        return arr

    centroids = take(n_clusters * dim, "<f4").reshape(n_clusters, dim).copy()
    offsets = take(n_clusters + 1, "<u8").copy()
    posting_ids = take(n_docs, "<u8").copy()
    vec = take(n_docs, [("norm", "<f4"), ("codes", "i1", (dim,))])
    norms = vec["norm"].copy()
    codes = vec["codes"].copy()

    users: list[str] = []
    source_ids = np.empty(n_docs, dtype=np.uint32)
    starts = np.empty(n_docs, dtype=np.uint32)
    for i in range(n_docs):
        if off + 2 > len(payload):
            raise SnapshotFormatError(f"{path}: truncated metadata")
        (ulen,) = struct.unpack_from("<H", payload, off)
        off += 2
        users.append(payload[off : off + ulen].decode("utf-8"))
        off += ulen
        source_ids[i], starts[i] = struct.unpack_from("<II", payload, off)
        off += 8
    if off != len(payload):
        raise SnapshotFormatError(f"{path}: {len(payload) - off} trailing bytes")
    if int(offsets[-1]) != n_docs:
        raise SnapshotFormatError(f"{path}: posting offsets do not cover all docs")

    for arr in (centroids, offsets, posting_ids, norms, codes, source_ids, starts):
        arr.setflags(write=False)
    return IndexSnapshot(
        version=0,
        seed=seed,
        dim=dim,
        centroids=centroids,
        posting_offsets=offsets,
        posting_doc_ids=posting_ids,
        norms=norms,
        codes=codes,
        user_ids=tuple(users),
        source_ids=source_ids,
        epoch_start_days=starts,
    )


def save_docs(docs: Sequence[MementoDoc], path: str | Path) -> None:
    """Serialize chunker output as a doc block file."""
    parts = [_DOCS_HEADER.pack(DOCS_MAGIC, FORMAT_VERSION, len(docs))]
    for d in docs:
        user = d.user_id.encode("utf-8")
        parts.append(
            struct.pack(
                "<QH", d.doc_id, len(user)
            )
            + user
            + struct.pack(
                "<IIIIIf",
                d.source.id,
                d.source.dimension,
                d.epoch_start_day,
                d.epoch_len_days,
                d.day_count,
                d.embedding.norm,
            )
            + d.embedding.codes.tobytes()
        )
    _finish(Path(path), b"".join(parts))


def load_docs(path: str | Path) -> list[MementoDoc]:
    """Load a doc block file. Source names are reconstructed as source-<id>."""
    payload = _open_checked(Path(path), DOCS_MAGIC)
    magic, version, n_docs = _DOCS_HEADER.unpack_from(payload, 0)
    if version != FORMAT_VERSION:
        raise SnapshotFormatError(f"{path}: unsupported format version {version}")
    off = _DOCS_HEADER.size
    sources: dict[int, SourceId] = {}
    docs: list[MementoDoc] = []
    for _ in range(n_docs):
        doc_id, ulen = struct.unpack_from("<QH", payload, off)
        off += 10
        user = payload[off : off + ulen].decode("utf-8")
        off += ulen
        source_id, dim, start, epoch_len, day_count, norm = struct.unpack_from(
            "<IIIIIf", payload, off
        )
        off += 24
        codes = np.frombuffer(payload, dtype=np.int8, count=dim, offset=off).copy()
        off += dim
        if source_id not in sources:
            sources[source_id] = SourceId(id=source_id, name=f"source-{source_id}", dimension=dim)
        docs.append(
            MementoDoc(
                doc_id=doc_id,
                user_id=user,
                source=sources[source_id],
                epoch_start_day=start,
                epoch_len_days=epoch_len,
                embedding=QuantizedEmbedding(norm=norm, codes=codes),
                day_count=day_count,
            )
        )
    if off != len(payload):
        raise SnapshotFormatError(f"{path}: {len(payload) - off} trailing bytes")
    return docs
