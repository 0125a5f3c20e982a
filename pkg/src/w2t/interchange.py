"""On-disk LoRA collection format: LWC1 checkpoint files and JSON manifests.

An LWC1 file stores the factor pairs of one adapter checkpoint. All
integers are little-endian, all matrices float32 row-major:

    magic            4 bytes  b"LWC1"
    position_count   u32
    per position:
        layer_index  u32
        module_kind  u8
        d_out        u32
        d_in         u32
        r            u32
        B            d_out * r  float32
        A            r * d_in   float32

The companion LWC-C layout (magic b"LWCC") stores canonical updates with
the same header fields; the payload per position is U (d_out*r), sigma
(r) and V (d_in*r), all float32 row-major.

Checkpoint ids and labels live in the collection manifest, not in the
binary files; a checkpoint read straight from disk gets its id from the
file stem and carries no label.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    InvalidCheckpoint,
    LabelDimMismatch,
    ManifestError,
    MissingEntryFile,
    MixedRank,
    NonFiniteEntry,
    TruncatedPayload,
)

LWC1_MAGIC = b"LWC1"
LWCC_MAGIC = b"LWCC"
FORMAT_VERSION = 1

MODULE_CODES = {"Q": 0, "K": 1, "V": 2, "O": 3}
CODE_MODULES = {v: k for k, v in MODULE_CODES.items()}
OTHER_CODE = 255

LABEL_SCHEMAS = ("multilabel", "regression", "task_retrieval", "unlabeled")
SPLITS = ("train", "val", "test", "gallery", "query")


@dataclass(frozen=True, order=True)
class ModuleKind:
    """Module kind with a stable byte code (Q=0, K=1, V=2, O=3, other bytes = OTHER)."""

    code: int

    def __post_init__(self):
        if not 0 <= self.code <= 255:
            raise InvalidCheckpoint(f"module kind code out of byte range: {self.code}")

    @property
    def name(self) -> str:
        return CODE_MODULES.get(self.code, f"OTHER({self.code})")

    @classmethod
    def from_name(cls, name: str) -> "ModuleKind":
        if name in MODULE_CODES:
            return cls(MODULE_CODES[name])
        if name.startswith("OTHER(") and name.endswith(")"):
            return cls(int(name[6:-1]))
        if name == "OTHER":
            return cls(OTHER_CODE)
        raise InvalidCheckpoint(f"unknown module kind: {name!r}")

    def __repr__(self):
        return f"ModuleKind({self.name})"


Q = ModuleKind(0)
K = ModuleKind(1)
V = ModuleKind(2)
O = ModuleKind(3)
OTHER = ModuleKind(OTHER_CODE)


@dataclass(frozen=True, order=True)
class PositionKey:
    """Identifies one adapted weight matrix: layer index plus module kind."""

    layer_index: int
    module_kind: ModuleKind

    def __post_init__(self):
        if self.layer_index < 0:
            raise InvalidCheckpoint(f"negative layer index: {self.layer_index}")

    def sort_key(self):
        return (self.layer_index, self.module_kind.code)


@dataclass
class FactorPair:
    """One low-rank factor pair: B (d_out x r) and A (r x d_in)."""

    B: np.ndarray
    A: np.ndarray

    def __post_init__(self):
        self.B = np.asarray(self.B)
        self.A = np.asarray(self.A)
        if self.B.ndim != 2 or self.A.ndim != 2:
            raise InvalidCheckpoint("factors must be 2-D matrices")
        if self.B.shape[1] != self.A.shape[0]:
            raise InvalidCheckpoint(
                f"rank mismatch between factors: B has {self.B.shape[1]} columns, "
                f"A has {self.A.shape[0]} rows"
            )
        r = self.B.shape[1]
        if r < 1:
            raise InvalidCheckpoint("rank must be at least 1")
        if self.B.shape[0] < r or self.A.shape[1] < r:
            raise InvalidCheckpoint(
                f"degenerate dimensions: d_out={self.B.shape[0]}, d_in={self.A.shape[1]}, r={r}"
            )
        if not (np.isfinite(self.B).all() and np.isfinite(self.A).all()):
            raise NonFiniteEntry("factor pair contains NaN or Inf")

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def rank(self) -> int:
        return self.B.shape[1]


@dataclass
class Label:
    """Checkpoint-level supervision: attribute bits, a score, a task id, or none."""

    kind: str = "none"  # multilabel | regression | task | none
    attributes: np.ndarray | None = None
    score: float | None = None
    task_id: str | None = None

    @classmethod
    def none(cls):
        return cls(kind="none")

    @classmethod
    def multilabel(cls, bits) -> "Label":
        bits = np.asarray(bits, dtype=np.int64)
        if bits.ndim != 1 or not np.isin(bits, (0, 1)).all():
            raise ManifestError("multilabel label must be a flat 0/1 vector")
        return cls(kind="multilabel", attributes=bits)

    @classmethod
    def regression(cls, score: float) -> "Label":
        score = float(score)
        if not 0.0 <= score <= 1.0:
            raise ManifestError(f"regression label out of [0,1]: {score}")
        return cls(kind="regression", score=score)

    @classmethod
    def task(cls, task_id: str) -> "Label":
        return cls(kind="task", task_id=str(task_id))

    def to_json(self):
        if self.kind == "multilabel":
            return [int(b) for b in self.attributes]
        if self.kind == "regression":
            return self.score
        if self.kind == "task":
            return self.task_id
        return None

    @classmethod
    def from_json(cls, value, schema: str) -> "Label":
        if value is None or schema == "unlabeled":
            return cls.none()
        if schema == "multilabel":
            return cls.multilabel(value)
        if schema == "regression":
            return cls.regression(value)
        if schema == "task_retrieval":
            return cls.task(value)
        raise ManifestError(f"unknown label schema: {schema!r}")


@dataclass
class LoraCheckpoint:
    """One adapter sample: ordered (PositionKey, FactorPair) list plus metadata.

    Positions are kept in canonical serialization order (ascending layer
    index, then module kind code) regardless of construction order, so
    downstream consumers never observe input ordering.
    """

    id: str
    positions: list[tuple[PositionKey, FactorPair]]
    label: Label = field(default_factory=Label.none)

    def __post_init__(self):
        if not self.positions:
            raise InvalidCheckpoint("checkpoint has no positions")
        self.positions = sorted(self.positions, key=lambda kv: kv[0].sort_key())
        keys = [k.sort_key() for k, _ in self.positions]
        if len(set(keys)) != len(keys):
            raise InvalidCheckpoint("duplicate position keys")
        ranks = {fp.rank for _, fp in self.positions}
        if len(ranks) != 1:
            raise MixedRank(f"positions carry mixed ranks: {sorted(ranks)}")

    @property
    def rank(self) -> int:
        return self.positions[0][1].rank


def _position_header(key: PositionKey, d_out: int, d_in: int, r: int) -> bytes:
    return struct.pack("<IBIII", key.layer_index, key.module_kind.code, d_out, d_in, r)


def write_checkpoint(ckpt: LoraCheckpoint, path) -> None:
    """Write a checkpoint to `path` in the LWC1 layout.

    The checkpoint is validated first; nothing is written on rejection.
    """
    path = Path(path)
    chunks = [LWC1_MAGIC, struct.pack("<I", len(ckpt.positions))]
    for key, fp in ckpt.positions:
        chunks.append(_position_header(key, fp.d_out, fp.d_in, fp.rank))
        chunks.append(np.ascontiguousarray(fp.B, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(fp.A, dtype="<f4").tobytes())
    path.write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise TruncatedPayload(
                f"{self.path}: needed {n} bytes at offset {self.off}, "
                f"file has {len(self.data)}"
            )
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def matrix(self, rows: int, cols: int) -> np.ndarray:
        raw = self.take(rows * cols * 4)
        m = np.frombuffer(raw, dtype="<f4").reshape(rows, cols).copy()
        if not np.isfinite(m).all():
            raise NonFiniteEntry(f"{self.path}: non-finite matrix entry")
        return m


def read_checkpoint(path) -> LoraCheckpoint:
    """Read an LWC1 file. Raises instead of returning a partially parsed checkpoint."""
    path = Path(path)
    rd = _Reader(path.read_bytes(), path)
    magic = rd.take(4)
    if magic != LWC1_MAGIC:
        raise BadMagic(f"{path}: expected {LWC1_MAGIC!r}, found {magic!r}")
    (count,) = struct.unpack("<I", rd.take(4))
    if count == 0:
        raise InvalidCheckpoint(f"{path}: zero positions")
    positions = []
    for _ in range(count):
        layer, kind, d_out, d_in, r = struct.unpack("<IBIII", rd.take(17))
        if r < 1 or d_out < r or d_in < r:
            raise InvalidCheckpoint(
                f"{path}: bad dimensions d_out={d_out}, d_in={d_in}, r={r}"
            )
        B = rd.matrix(d_out, r)
        A = rd.matrix(r, d_in)
        positions.append((PositionKey(layer, ModuleKind(kind)), FactorPair(B, A)))
    if rd.off != len(rd.data):
        raise InvalidCheckpoint(f"{path}: {len(rd.data) - rd.off} trailing bytes")
    return LoraCheckpoint(id=path.stem, positions=positions)


def write_canonical(keys, updates, path) -> None:
    """Write canonical updates (one per position key) in the LWC-C layout."""
    path = Path(path)
    chunks = [LWCC_MAGIC, struct.pack("<I", len(keys))]
    for key, cu in zip(keys, updates):
        d_out, r = cu.U.shape
        d_in = cu.V.shape[0]
        chunks.append(_position_header(key, d_out, d_in, r))
        chunks.append(np.ascontiguousarray(cu.U, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(cu.sigma, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(cu.V, dtype="<f4").tobytes())
    path.write_bytes(b"".join(chunks))


def read_canonical(path):
    """Read an LWC-C file -> list of (PositionKey, (U, sigma, V)) tuples."""
    path = Path(path)
    rd = _Reader(path.read_bytes(), path)
    magic = rd.take(4)
    if magic != LWCC_MAGIC:
        raise BadMagic(f"{path}: expected {LWCC_MAGIC!r}, found {magic!r}")
    (count,) = struct.unpack("<I", rd.take(4))
    out = []
    for _ in range(count):
        layer, kind, d_out, d_in, r = struct.unpack("<IBIII", rd.take(17))
        U = rd.matrix(d_out, r)
        sigma = rd.matrix(1, r)[0]
        Vm = rd.matrix(d_in, r)
        out.append((PositionKey(layer, ModuleKind(kind)), (U, sigma, Vm)))
    if rd.off != len(rd.data):
        raise InvalidCheckpoint(f"{path}: {len(rd.data) - rd.off} trailing bytes")
    return out


@dataclass
class ManifestEntry:
    id: str
    path: str
    split: str
    label: Label


@dataclass
class CollectionManifest:
    """Dataset-level index: entries, label schema, geometry, generation seed."""

    format_version: int
    label_schema: str
    label_dim: int
    rank: int
    layer_count: int
    entries: list[ManifestEntry]
    generator_seed: int | None = None

    def __post_init__(self):
        if self.label_schema not in LABEL_SCHEMAS:
            raise ManifestError(f"unknown label schema: {self.label_schema!r}")
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate checkpoint ids in manifest")
        for e in self.entries:
            if e.split not in SPLITS:
                raise ManifestError(f"unknown split {e.split!r} for {e.id}")
            if self.label_schema == "multilabel" and e.label.kind == "multilabel":
                if e.label.attributes.shape[0] != self.label_dim:
                    raise LabelDimMismatch(
                        f"{e.id}: label has {e.label.attributes.shape[0]} bits, "
                        f"manifest declares {self.label_dim}"
                    )

    def to_json(self) -> dict:
        return {
            "format_version": self.format_version,
            "label_schema": self.label_schema,
            "label_dim": self.label_dim,
            "rank": self.rank,
            "layer_count": self.layer_count,
            "checkpoints": [
                {"id": e.id, "path": e.path, "split": e.split, "label": e.label.to_json()}
                for e in self.entries
            ],
            "generator_seed": self.generator_seed,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "CollectionManifest":
        try:
            entries = [
                ManifestEntry(
                    id=str(c["id"]),
                    path=str(c["path"]),
                    split=str(c["split"]),
                    label=Label.from_json(c.get("label"), doc["label_schema"]),
                )
                for c in doc["checkpoints"]
            ]
            return cls(
                format_version=int(doc["format_version"]),
                label_schema=str(doc["label_schema"]),
                label_dim=int(doc["label_dim"]),
                rank=int(doc["rank"]),
                layer_count=int(doc["layer_count"]),
                entries=entries,
                generator_seed=doc.get("generator_seed"),
            )
        except KeyError as exc:
            raise ManifestError(f"manifest missing required key: {exc}") from exc


def write_manifest(manifest: CollectionManifest, path) -> None:
    Path(path).write_text(json.dumps(manifest.to_json(), indent=1) + "\n")


class CollectionAccessor:
    """Lazy by-id access to the checkpoints listed in a manifest.

    Files are parsed on demand; parsed checkpoints are not cached, so
    concurrent readers over distinct ids never share mutable state.
    """

    def __init__(self, manifest: CollectionManifest, root: Path):
        self.manifest = manifest
        self.root = Path(root)
        self._by_id = {e.id: e for e in manifest.entries}

    def ids(self) -> list[str]:
        return [e.id for e in self.manifest.entries]

    def split_ids(self, split: str) -> list[str]:
        return [e.id for e in self.manifest.entries if e.split == split]

    def __len__(self):
        return len(self.manifest.entries)

    def __contains__(self, ckpt_id: str):
        return ckpt_id in self._by_id

    def __getitem__(self, ckpt_id: str) -> LoraCheckpoint:
        entry = self._by_id[ckpt_id]
        ckpt = read_checkpoint(self.root / entry.path)
        if ckpt.rank != self.manifest.rank:
            raise MixedRank(
                f"{entry.id}: rank {ckpt.rank} != manifest rank {self.manifest.rank}"
            )
        for key, _ in ckpt.positions:
            if key.layer_index >= self.manifest.layer_count:
                raise ManifestError(
                    f"{entry.id}: layer index {key.layer_index} exceeds "
                    f"declared layer count {self.manifest.layer_count}"
                )
        return LoraCheckpoint(id=entry.id, positions=ckpt.positions, label=entry.label)

    def __iter__(self):
        for ckpt_id in self.ids():
            yield self[ckpt_id]


def load_collection(manifest_path) -> tuple[CollectionManifest, CollectionAccessor]:
    """Parse a manifest and return it with a lazy checkpoint accessor.

    Entry files are checked for existence eagerly; payloads are parsed
    lazily, on access.
    """
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    try:
        doc = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot parse manifest {manifest_path}: {exc}") from exc
    manifest = CollectionManifest.from_json(doc)
    root = manifest_path.parent
    for e in manifest.entries:
        if not (root / e.path).is_file():
            raise MissingEntryFile(f"{e.id}: missing file {root / e.path}")
    return manifest, CollectionAccessor(manifest, root)


def checkpoints_equal(a: LoraCheckpoint, b: LoraCheckpoint) -> bool:
    """Field-by-field equality with bit-identical float payloads."""
    if a.id != b.id or len(a.positions) != len(b.positions):
        return False
    for (ka, fa), (kb, fb) in zip(a.positions, b.positions):
        if ka != kb:
            return False
        if fa.B.tobytes() != fb.B.tobytes() or fa.A.tobytes() != fb.A.tobytes():
            return False
    return True
