"""File-backed attention database with page-aligned APM records.

Records live in shard files, each payload starting on a page boundary and
padded to whole pages (padding is zeroed and excluded from the logical
tensor). A batch of records is gathered either by

* mapping: one contiguous virtual range is reserved, then each record's
  file pages are remapped into consecutive slots. No payload byte is read
  or written during gathering; the kernel only edits page tables. The
  result is a read-only (batch, heads, L, L) float32 view.
* copying: explicit positioned reads into a freshly allocated dense
  array. This path is the byte-equality oracle for the mapped path and
  the benchmark baseline.

If the platform cannot remap file pages (or the store's page size is not
a multiple of the OS page size), gathering falls back to the copy path
with a logged diagnostic; `MappedBatch.mapped` records which path ran.

Manifest layout (little-endian): magic "MAPM", version u32, page_size
u32, then one 30-byte row per record: id u64, shard u32, offset u64,
num_heads u16, seq_len u32, crc32 u32.
"""

from __future__ import annotations

import ctypes
import logging
import mmap as _mmap
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Apm

log = logging.getLogger(__name__)

PAGE_SIZE_ENV = "MEMOATTN_PAGE_SIZE"
MANIFEST_MAGIC = b"MAPM"
MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.mapm"
SHARD_NAME = "shard_{:03d}.bin"
DEFAULT_SHARD_LIMIT = 512 * 1024 * 1024

_RECORD = struct.Struct("<QIQHII")  # id, shard, offset, num_heads, seq_len, crc32

_PROT_NONE, _PROT_READ = 0, 1
_MAP_SHARED, _MAP_PRIVATE, _MAP_FIXED, _MAP_ANONYMOUS = 0x01, 0x02, 0x10, 0x20
_MAP_NORESERVE = 0x4000
_MAP_FAILED = ctypes.c_void_p(-1).value

_libc = None
_remap_ok: bool | None = None


def _get_libc():
    global _libc
    if _libc is None:
        lib = ctypes.CDLL("libc.so.6", use_errno=True)
        lib.mmap.restype = ctypes.c_void_p
        lib.mmap.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int,
                             ctypes.c_int, ctypes.c_int, ctypes.c_long]
        lib.munmap.restype = ctypes.c_int
        lib.munmap.argtypes = [ctypes.c_void_p, ctypes.c_size_t]
        _libc = lib
    return _libc


def remap_available() -> bool:
    """Probe (once) whether file pages can be remapped into a reserved
    anonymous range on this platform."""
    global _remap_ok
    if _remap_ok is None:
        _remap_ok = _probe_remap()
        if not _remap_ok:
            log.warning("page remapping unavailable; APM gathering will fall "
                        "back to the copy path")
    return _remap_ok


def _probe_remap() -> bool:
    page = _mmap.PAGESIZE
    try:
        libc = _get_libc()
        fd, path = tempfile.mkstemp(prefix="memoattn-probe-")
        try:
            os.write(fd, b"\x55" * page)
            base = libc.mmap(None, page, _PROT_NONE,
                             _MAP_PRIVATE | _MAP_ANONYMOUS | _MAP_NORESERVE, -1, 0)
            if base in (_MAP_FAILED, None):
                return False
            r = libc.mmap(base, page, _PROT_READ, _MAP_SHARED | _MAP_FIXED, fd, 0)
            if r in (_MAP_FAILED, None) or r != base:
                libc.munmap(base, page)
                return False
            ok = bytes((ctypes.c_char * 4).from_address(base)) == b"\x55" * 4
            libc.munmap(base, page)
            return ok
        finally:
            os.close(fd)
            os.unlink(path)
    except Exception:
        return False


def resolve_page_size(explicit: int | None = None) -> int:
    """Explicit value, else MEMOATTN_PAGE_SIZE, else the OS page size."""
    if explicit is not None:
        return int(explicit)
    env = os.environ.get(PAGE_SIZE_ENV)
    return int(env) if env else _mmap.PAGESIZE


def _round_up(n: int, multiple: int) -> int:
    return (n + multiple - 1) // multiple * multiple


@dataclass(frozen=True)
class RecordInfo:
    record_id: int
    shard: int
    offset: int
    num_heads: int
    seq_len: int
    crc32: int
    layer: int = -1  # runtime tag; not part of the on-disk manifest

    @property
    def payload_bytes(self) -> int:
        return self.num_heads * self.seq_len * self.seq_len * 4

    def padded_bytes(self, page_size: int) -> int:
        return _round_up(self.payload_bytes, page_size)


class MappedBatch:
    """Read-only batch tensor plus the lifetime token for its mapping.

    `tensor` is (batch, heads, L, L) float32; access after release raises.
    Use as a context manager or call release() explicitly.
    """

    def __init__(self, tensor: np.ndarray, record_ids: list[int],
                 mapped: bool, base: int | None = None, total: int = 0):
        self._tensor: np.ndarray | None = tensor
        self.record_ids = list(record_ids)
        self.mapped = mapped
        self._base = base
        self._total = total

    @property
    def tensor(self) -> np.ndarray:
        if self._tensor is None:
            raise RuntimeError("mapped batch accessed after release")
        return self._tensor

    @property
    def released(self) -> bool:
        return self._tensor is None

    def __len__(self) -> int:
        return len(self.record_ids)

    def release(self) -> None:
        """Unmap the range. Idempotent; a released batch stays released."""
        if self._tensor is None:
            return
        self._tensor = None
        if self._base is not None:
            _get_libc().munmap(self._base, self._total)
            self._base = None

    def __enter__(self) -> "MappedBatch":
        return self

    def __exit__(self, *exc) -> None:
        self.release()

    def __del__(self):
        try:
            self.release()
        except Exception:
            pass


class ApmStore:
    """Append-only page-aligned record store over one or more shards."""

    def __init__(self, path, page_size: int, layer: int = -1,
                 shard_limit: int = DEFAULT_SHARD_LIMIT):
        self.path = Path(path)
        self.page_size = page_size
        self.layer = layer
        self.shard_limit = shard_limit
        self.records: dict[int, RecordInfo] = {}
        self._shard_sizes: list[int] = []
        self._read_fds: list[int] = []
        self._writer = None
        self._writer_shard = -1

    # -- lifecycle -----------------------------------------------------

    def _shard_path(self, shard: int) -> Path:
        return self.path / SHARD_NAME.format(shard)

    def _manifest_path(self) -> Path:
        return self.path / MANIFEST_NAME

    def _open_writer(self, shard: int):
        if self._writer is not None and self._writer_shard == shard:
            return
        if self._writer is not None:
            self._writer.close()
        self._writer = open(self._shard_path(shard), "ab")
        self._writer_shard = shard

    def _read_fd(self, shard: int) -> int:
        while len(self._read_fds) <= shard:
            idx = len(self._read_fds)
            self._read_fds.append(os.open(self._shard_path(idx), os.O_RDONLY))
        return self._read_fds[shard]

    def flush(self) -> None:
        """Make all puts durable: sync shards, rewrite manifest atomically."""
        if self._writer is not None:
            self._writer.flush()
            os.fsync(self._writer.fileno())
        tmp = self._manifest_path().with_suffix(".tmp")
        with open(tmp, "wb") as f:
            f.write(MANIFEST_MAGIC)
            f.write(struct.pack("<II", MANIFEST_VERSION, self.page_size))
            for rid in sorted(self.records):
                r = self.records[rid]
                f.write(_RECORD.pack(r.record_id, r.shard, r.offset,
                                     r.num_heads, r.seq_len, r.crc32))
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, self._manifest_path())

    def close(self) -> None:
        if self._writer is not None:
            self._writer.close()
            self._writer = None
        for fd in self._read_fds:
            os.close(fd)
        self._read_fds = []

    def __enter__(self) -> "ApmStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- writes ---------------------------------------------------------

    def put(self, record_id: int, apms, layer: int | None = None,
            validate: bool = True) -> RecordInfo:
        """Append one record: all heads of one (sequence, layer).

        `apms` is a list of Apm or a (heads, L, L) float32 array.
        """
        record_id = int(record_id)
        if record_id in self.records:
            raise ValueError(f"duplicate record id {record_id}")
        if isinstance(apms, np.ndarray):
            stack = np.ascontiguousarray(apms, dtype=np.float32)
        else:
            stack = np.stack([a.probs if isinstance(a, Apm) else a for a in apms]
                             ).astype(np.float32, copy=False)
        if stack.ndim != 3 or stack.shape[1] != stack.shape[2]:
            raise ValueError(f"expected (heads, L, L) payload, got {stack.shape}")
        if validate:
            for head in stack:
                Apm(head).validate(tol=1e-4)

        payload = stack.tobytes()
        padded = _round_up(len(payload), self.page_size)

        shard = max(0, len(self._shard_sizes) - 1)
        if not self._shard_sizes:
            self._shard_sizes = [0]
        if self._shard_sizes[shard] + padded > self.shard_limit and \
                self._shard_sizes[shard] > 0:
            shard += 1
            self._shard_sizes.append(0)
        offset = self._shard_sizes[shard]

        self._open_writer(shard)
        self._writer.write(payload)
        self._writer.write(b"\x00" * (padded - len(payload)))
        self._writer.flush()
        self._shard_sizes[shard] += padded

        info = RecordInfo(
            record_id=record_id, shard=shard, offset=offset,
            num_heads=stack.shape[0], seq_len=stack.shape[1],
            crc32=zlib.crc32(payload),
            layer=self.layer if layer is None else layer,
        )
        self.records[record_id] = info
        return info

    # -- reads -----------------------------------------------------------

    @property
    def total_bytes(self) -> int:
        """Bytes occupied by record payloads including page padding."""
        return sum(r.padded_bytes(self.page_size) for r in self.records.values())

    def record_ids(self) -> list[int]:
        return sorted(self.records)

    def _lookup_batch(self, ids) -> tuple[list[RecordInfo], int, int]:
        infos = []
        for rid in ids:
            info = self.records.get(int(rid))
            if info is None:
                raise KeyError(f"record id {rid} not in store")
            infos.append(info)
        heads, seq = infos[0].num_heads, infos[0].seq_len
        for info in infos[1:]:
            if (info.num_heads, info.seq_len) != (heads, seq):
                raise ValueError("records in one batch must share dimensions")
        return infos, heads, seq

    def get(self, record_id: int) -> np.ndarray:
        """Read one record's payload as an owned (heads, L, L) array."""
        return self.gather_copy([record_id])[0]

    def gather_copy(self, ids) -> np.ndarray:
        """Dense (batch, heads, L, L) array assembled by explicit reads."""
        ids = list(ids)
        if not ids:
            return np.empty((0, 0, 0, 0), dtype=np.float32)
        infos, heads, seq = self._lookup_batch(ids)
        out = np.empty((len(ids), heads, seq, seq), dtype=np.float32)
        view = memoryview(out).cast("B")
        nbytes = infos[0].payload_bytes
        for k, info in enumerate(infos):
            fd = self._read_fd(info.shard)
            dest = view[k * nbytes:(k + 1) * nbytes]
            got = os.preadv(fd, [dest], info.offset)
            if got != nbytes:
                raise IOError(f"short read for record {info.record_id}")
        return out

    def gather_mapped(self, ids) -> MappedBatch:
        """Batch assembled by remapping record pages into one contiguous
        reserved range; falls back to gather_copy when remapping is
        unavailable."""
        ids = list(ids)
        if not ids:
            return MappedBatch(np.empty((0, 0, 0, 0), dtype=np.float32), [],
                               mapped=True)
        infos, heads, seq = self._lookup_batch(ids)

        if self.page_size % _mmap.PAGESIZE != 0 or not remap_available():
            log.warning("gather_mapped falling back to copy path "
                        "(page_size=%d, os page=%d)", self.page_size, _mmap.PAGESIZE)
            arr = self.gather_copy(ids)
            arr.flags.writeable = False
            return MappedBatch(arr, ids, mapped=False)

        padded = infos[0].padded_bytes(self.page_size)
        total = padded * len(ids)
        libc = _get_libc()
        base = libc.mmap(None, total, _PROT_NONE,
                         _MAP_PRIVATE | _MAP_ANONYMOUS | _MAP_NORESERVE, -1, 0)
        if base in (_MAP_FAILED, None):
            raise OSError(ctypes.get_errno(), "cannot reserve address range")
        for k, info in enumerate(infos):
            fd = self._read_fd(info.shard)
            r = libc.mmap(base + k * padded, padded, _PROT_READ,
                          _MAP_SHARED | _MAP_FIXED, fd, info.offset)
            if r in (_MAP_FAILED, None) or r != base + k * padded:
                err = ctypes.get_errno()
                libc.munmap(base, total)
                raise OSError(err, f"cannot map record {info.record_id}")

        buf = (ctypes.c_char * total).from_address(base)
        flat = np.frombuffer(buf, dtype=np.float32)
        flat.flags.writeable = False
        tensor = np.lib.stride_tricks.as_strided(
            flat, shape=(len(ids), heads, seq, seq),
            strides=(padded, seq * seq * 4, seq * 4, 4),
        )
        batch = MappedBatch(tensor, ids, mapped=True, base=base, total=total)
        batch._keepalive = buf  # the ndarray chain must outlive the view
        return batch

    def validate_record(self, record_id: int) -> None:
        """CRC and row-stochasticity check for one stored record."""
        info = self.records[record_id]
        payload = self.gather_copy([record_id])
        data = payload.tobytes()
        crc = zlib.crc32(data)
        if crc != info.crc32:
            raise ValueError(f"record {record_id} CRC mismatch")
        for head in payload[0]:
            Apm(head).validate(tol=1e-4)


def create_store(path, page_size: int | None = None, layer: int = -1,
                 shard_limit: int = DEFAULT_SHARD_LIMIT) -> ApmStore:
    """Initialize an empty store directory with a persisted manifest."""
    page_size = resolve_page_size(page_size)
    if page_size <= 0 or page_size & (page_size - 1):
        raise ValueError(f"page_size {page_size} is not a power of two")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = path / MANIFEST_NAME
    if manifest.exists():
        raise FileExistsError(f"store already exists at {path}; use open_store")
    store = ApmStore(path, page_size, layer=layer, shard_limit=shard_limit)
    store.flush()
    return store


def open_store(path, layer: int = -1, verify: bool = False,
               shard_limit: int = DEFAULT_SHARD_LIMIT) -> ApmStore:
    """Open an existing store, parsing and sanity-checking the manifest."""
    path = Path(path)
    manifest = path / MANIFEST_NAME
    raw = manifest.read_bytes()
    if raw[:4] != MANIFEST_MAGIC:
        raise ValueError(f"not a store manifest: {manifest}")
    version, page_size = struct.unpack_from("<II", raw, 4)
    if version != MANIFEST_VERSION:
        raise ValueError(f"incompatible store version {version}")
    body = raw[12:]
    if len(body) % _RECORD.size:
        raise ValueError("truncated store manifest")

    store = ApmStore(path, page_size, layer=layer, shard_limit=shard_limit)
    ends: dict[int, int] = {}
    for off in range(0, len(body), _RECORD.size):
        rid, shard, offset, heads, seq, crc = _RECORD.unpack_from(body, off)
        if rid in store.records:
            raise ValueError(f"duplicate record id {rid} in manifest")
        info = RecordInfo(rid, shard, offset, heads, seq, crc, layer=layer)
        store.records[rid] = info
        ends[shard] = max(ends.get(shard, 0), offset + info.padded_bytes(page_size))
    nshards = max(ends) + 1 if ends else 0
    store._shard_sizes = [ends.get(s, 0) for s in range(nshards)]
    for s in range(nshards):
        actual = os.path.getsize(store._shard_path(s))
        if actual < store._shard_sizes[s]:
            raise ValueError(f"shard {s} shorter than manifest extent")
        store._shard_sizes[s] = actual
    if verify:
        for rid in store.records:
            store.validate_record(rid)
    return store
