"""Data model for multi-encoder embedding datasets and their file formats.

Binary layout (little-endian)::

    b"EMBG" | u16 version | u64 N | u64 D | N*D float64 row-major
    | str encoder_id | N * str sample_id | D * (str encoder_id, u64 column)

where ``str`` is a u32 byte length followed by UTF-8 bytes.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    BadMagic,
    DataError,
    DuplicateSlide,
    InconsistentLabel,
    MissingHeader,
    NonFiniteValue,
    NotEnoughTiles,
    RaggedRow,
    SampleCountMismatch,
    StatsDimensionMismatch,
    TileCountMismatch,
    TruncatedFile,
    UnknownLabel,
    VersionMismatch,
)

MAGIC = b"EMBG"
VERSION = 1
DEGENERATE_STD = 1e-12


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    """N x D features from one encoder, with per-column provenance."""

    encoder_id: str
    sample_ids: tuple
    values: np.ndarray
    provenance: tuple = None

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise DataError(f"embedding matrix must be 2-D and non-empty, got {values.shape}")
        if not np.isfinite(values).all():
            raise NonFiniteValue(f"{self.encoder_id}: matrix contains NaN or Inf")
        n, d = values.shape
        sample_ids = tuple(str(s) for s in self.sample_ids)
        if len(sample_ids) != n:
            raise SampleCountMismatch(f"{len(sample_ids)} sample ids for {n} rows")
        prov = self.provenance
        if prov is None:
            prov = tuple((self.encoder_id, j) for j in range(d))
        prov = tuple((str(e), int(c)) for e, c in prov)
        if len(prov) != d:
            raise DataError(f"provenance has {len(prov)} entries for {d} columns")
        if len(set(prov)) != d:
            raise DataError("provenance column indices must be unique per encoder")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "sample_ids", sample_ids)
        object.__setattr__(self, "provenance", prov)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other):
        if not isinstance(other, EmbeddingMatrix):
            return NotImplemented
        return (
            self.encoder_id == other.encoder_id
            and self.sample_ids == other.sample_ids
            and self.provenance == other.provenance
            and self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
        )

    __hash__ = None

    def take_rows(self, idx, sample_ids=None) -> "EmbeddingMatrix":
        idx = np.asarray(idx, dtype=np.intp)
        ids = sample_ids if sample_ids is not None else [self.sample_ids[i] for i in idx]
        return EmbeddingMatrix(self.encoder_id, ids, self.values[idx], self.provenance)

    def take_columns(self, cols, encoder_id=None) -> "EmbeddingMatrix":
        cols = np.asarray(cols, dtype=np.intp)
        return EmbeddingMatrix(
            encoder_id or self.encoder_id,
            self.sample_ids,
            self.values[:, cols],
            [self.provenance[c] for c in cols],
        )


def as_array(x) -> np.ndarray:
    """Accept an EmbeddingMatrix or anything array-like; return a float64 2-D array."""
    if isinstance(x, EmbeddingMatrix):
        return x.values
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    return a


# ---------------------------------------------------------------- CSV ----
def _parse_float(cell, path, line):
    try:
        v = float(cell)
    except ValueError:
        raise DataError(f"{path}:{line}: cannot parse {cell!r} as a number") from None
    if not math.isfinite(v):
        raise NonFiniteValue(f"{path}:{line}: non-finite value {cell!r}")
    return v


def load_embedding_csv(path, encoder_id=None) -> EmbeddingMatrix:
    """Read ``sample_id,f0,f1,...`` rows. The encoder id defaults to the file stem."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "sample_id" or len(header) < 2:
            raise MissingHeader(f"{path}: expected header 'sample_id,f0,...'")
        width = len(header)
        ids, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise RaggedRow(lineno, width, len(row), path)
            ids.append(row[0])
            rows.append([_parse_float(c, path, lineno) for c in row[1:]])
    if not rows:
        raise DataError(f"{path}: no data rows")
    return EmbeddingMatrix(encoder_id or path.stem, ids, np.array(rows))


def write_embedding_csv(m: EmbeddingMatrix, path) -> None:
    # repr() of a float round-trips exactly
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id"] + [f"f{j}" for j in range(m.d)])
        for sid, row in zip(m.sample_ids, m.values):
            w.writerow([sid] + [repr(float(v)) for v in row])


# ------------------------------------------------------------- binary ----
def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def write_embedding_binary(m: EmbeddingMatrix, path) -> None:
    parts = [
        MAGIC,
        struct.pack("<HQQ", VERSION, m.n, m.d),
        m.values.astype("<f8").tobytes(order="C"),
        _pack_str(m.encoder_id),
    ]
    parts += [_pack_str(s) for s in m.sample_ids]
    for enc, col in m.provenance:
        parts.append(_pack_str(enc))
        parts.append(struct.pack("<Q", col))
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFile(f"{self.path}: file ends at byte {len(self.buf)}, needed {self.pos + n}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def load_embedding_binary(path) -> EmbeddingMatrix:
    r = _Reader(Path(path).read_bytes(), path)
    if len(r.buf) < 4 or r.buf[:4] != MAGIC:
        raise BadMagic(f"{path}: not an EMBG file")
    r.take(4)
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {VERSION}")
    n, d = r.unpack("<QQ")
    values = np.frombuffer(r.take(8 * n * d), dtype="<f8").reshape(n, d)
    encoder_id = r.string()
    ids = [r.string() for _ in range(n)]
    prov = []
    for _ in range(d):
        enc = r.string()
        (col,) = r.unpack("<Q")
        prov.append((enc, col))
    if r.pos != len(r.buf):
        raise DataError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return EmbeddingMatrix(encoder_id, ids, values.astype(np.float64), prov)


def load_embedding(path, encoder_id=None) -> EmbeddingMatrix:
    """Dispatch on extension: ``.csv`` is text, anything else the binary format."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    if path.suffix.lower() == ".csv":
        return load_embedding_csv(path, encoder_id)
    m = load_embedding_binary(path)
    if encoder_id is not None and encoder_id != m.encoder_id:
        m = EmbeddingMatrix(encoder_id, m.sample_ids, m.values,
                            [(encoder_id, c) for _, c in m.provenance])
    return m


# ---------------------------------------------------------- datasets ----
LABEL_NAMES = {"0": 0, "1": 1, "low": 0, "high": 1}


def parse_label(raw, class_names=("low", "high")) -> int:
    if isinstance(raw, bool):
        raise UnknownLabel(f"unknown label {raw!r}")
    if isinstance(raw, (int, np.integer)) and raw in (0, 1):
        return int(raw)
    key = str(raw).strip().lower()
    names = {str(c).lower(): i for i, c in enumerate(class_names)}
    if key in names:
        return names[key]
    if key in LABEL_NAMES:
        return LABEL_NAMES[key]
    raise UnknownLabel(f"unknown label {raw!r}; expected 0/1 or one of {list(class_names)}")


def grid_coords(t: int) -> np.ndarray:
    side = max(1, math.ceil(math.sqrt(t)))
    i = np.arange(t)
    return np.stack([i // side, i % side], axis=1)


@dataclass(frozen=True, eq=False)
class SlideBag:
    slide_id: str
    patient_id: str
    label: int
    tiles: Mapping[str, np.ndarray]
    coords: np.ndarray = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise UnknownLabel(f"slide {self.slide_id}: label {self.label!r}")
        if not self.tiles:
            raise DataError(f"slide {self.slide_id}: no encoders")
        tiles = {}
        first = None
        for enc, mat in self.tiles.items():
            mat = _frozen(mat)
            if mat.ndim != 2 or mat.shape[0] < 1:
                raise DataError(f"slide {self.slide_id}/{enc}: need a non-empty T x D matrix")
            if not np.isfinite(mat).all():
                raise NonFiniteValue(f"slide {self.slide_id}/{enc}: non-finite tile values")
            if first is None:
                first = (enc, mat.shape[0])
            elif mat.shape[0] != first[1]:
                raise TileCountMismatch(self.slide_id, first[0], enc, first[1], mat.shape[0])
            tiles[enc] = mat
        t = first[1]
        coords = grid_coords(t) if self.coords is None else np.asarray(self.coords, dtype=np.int64)
        if coords.shape != (t, 2):
            raise DataError(f"slide {self.slide_id}: coords shape {coords.shape}, expected ({t}, 2)")
        if len({(int(r), int(c)) for r, c in coords}) != t:
            raise DataError(f"slide {self.slide_id}: duplicate tile coordinates")
        coords = coords.copy()
        coords.setflags(write=False)
        object.__setattr__(self, "tiles", tiles)
        object.__setattr__(self, "coords", coords)

    @property
    def n_tiles(self) -> int:
        return self.coords.shape[0]

    @property
    def encoders(self) -> list:
        return list(self.tiles)


@dataclass(frozen=True)
class BagDataset:
    slides: tuple
    class_names: tuple = ("low", "high")

    def __post_init__(self):
        slides = tuple(self.slides)
        seen = set()
        for s in slides:
            if s.slide_id in seen:
                raise DuplicateSlide(f"duplicate slide id {s.slide_id!r}")
            seen.add(s.slide_id)
        _check_patient_labels((s.patient_id, s.label) for s in slides)
        object.__setattr__(self, "slides", slides)
        object.__setattr__(self, "class_names", tuple(self.class_names))

    @property
    def encoders(self) -> list:
        return self.slides[0].encoders if self.slides else []

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.slides], dtype=np.int64)

    @property
    def patient_ids(self) -> list:
        return [s.patient_id for s in self.slides]

    def bags(self, encoder: str) -> list:
        return [s.tiles[encoder] for s in self.slides]

    def subset(self, slide_ids) -> "BagDataset":
        keep = set(slide_ids)
        return BagDataset(tuple(s for s in self.slides if s.slide_id in keep), self.class_names)

    def for_patients(self, patient_ids) -> "BagDataset":
        keep = set(patient_ids)
        return BagDataset(tuple(s for s in self.slides if s.patient_id in keep), self.class_names)


@dataclass(frozen=True)
class SlideVectorDataset:
    encoders: Mapping[str, EmbeddingMatrix]
    patient_ids: tuple
    labels: np.ndarray
    class_names: tuple = ("low", "high")

    def __post_init__(self):
        if not self.encoders:
            raise DataError("slide-vector dataset needs at least one encoder")
        mats = list(self.encoders.values())
        ids = mats[0].sample_ids
        for m in mats[1:]:
            if m.sample_ids != ids:
                raise SampleCountMismatch(f"encoder {m.encoder_id} rows are not aligned with {mats[0].encoder_id}")
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.shape != (len(ids),) or len(self.patient_ids) != len(ids):
            raise SampleCountMismatch("labels/patient ids do not match the number of slides")
        if not np.isin(labels, (0, 1)).all():
            raise UnknownLabel("labels must be 0 or 1")
        if len(set(ids)) != len(ids):
            raise DuplicateSlide("duplicate slide ids")
        _check_patient_labels(zip(self.patient_ids, labels))
        object.__setattr__(self, "encoders", dict(self.encoders))
        object.__setattr__(self, "patient_ids", tuple(self.patient_ids))
        object.__setattr__(self, "labels", labels)

    @property
    def slide_ids(self) -> tuple:
        return next(iter(self.encoders.values())).sample_ids

    def rows_for_patients(self, patient_ids) -> np.ndarray:
        keep = set(patient_ids)
        return np.array([i for i, p in enumerate(self.patient_ids) if p in keep], dtype=np.intp)


def _check_patient_labels(pairs) -> None:
    seen = {}
    for pid, lab in pairs:
        if seen.setdefault(pid, int(lab)) != int(lab):
            raise InconsistentLabel(f"patient {pid!r} has slides with different labels")


def load_manifest(path):
    """Load a JSON manifest into a BagDataset (``kind: "bags"``, the default)
    or a SlideVectorDataset (``kind: "slide_vectors"``, one row per slide file).

    Relative embedding paths are resolved against the manifest's directory.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    base = path.parent
    class_names = tuple(doc.get("class_names", ("low", "high")))
    kind = doc.get("kind", "bags")
    entries = doc.get("slides")
    if not isinstance(entries, list) or not entries:
        raise DataError(f"{path}: manifest has no slides")
    seen = set()
    parsed = []
    cache = {}
    for e in entries:
        try:
            sid, pid, raw_label, emb = e["slide_id"], e["patient_id"], e["label"], e["embeddings"]
        except KeyError as exc:
            raise DataError(f"{path}: slide entry missing field {exc}") from None
        if sid in seen:
            raise DuplicateSlide(f"duplicate slide id {sid!r}")
        seen.add(sid)
        label = parse_label(raw_label, class_names)
        mats = {enc: _cached_load(cache, base / p, enc) for enc, p in emb.items()}
        parsed.append((e, str(sid), str(pid), label, mats))

    if kind == "slide_vectors":
        encoders = list(parsed[0][4])
        per_enc = {enc: [] for enc in encoders}
        for e, sid, _, _, mats in parsed:
            if list(mats) != encoders:
                raise DataError(f"slide {sid}: encoder set differs from first slide")
            for enc, m in mats.items():
                if m.n != 1:
                    # shared per-encoder table: pick this slide's row by sample id
                    try:
                        row = m.sample_ids.index(sid)
                    except ValueError:
                        raise DataError(f"slide {sid}/{enc}: no row with that sample id in a {m.n}-row file") from None
                    m = m.take_rows([row])
                per_enc[enc].append(m)
        ids = [p[1] for p in parsed]
        mats = {
            enc: EmbeddingMatrix(enc, ids, np.vstack([m.values for m in ms]), ms[0].provenance)
            for enc, ms in per_enc.items()
        }
        return SlideVectorDataset(mats, [p[2] for p in parsed], [p[3] for p in parsed], class_names)
    if kind != "bags":
        raise DataError(f"{path}: unknown manifest kind {kind!r}")

    slides = []
    for e, sid, pid, label, mats in parsed:
        encs = list(mats)
        for other in encs[1:]:
            if mats[other].n != mats[encs[0]].n:
                raise TileCountMismatch(sid, encs[0], other, mats[encs[0]].n, mats[other].n)
        coords = None
        if e.get("coords_path"):
            coords = load_coords(base / e["coords_path"])
        slides.append(SlideBag(sid, pid, label, {k: m.values for k, m in mats.items()}, coords))
    return BagDataset(tuple(slides), class_names)


def _cached_load(cache, path, enc):
    key = (str(path), enc)
    if key not in cache:
        cache[key] = load_embedding(path, enc)
    return cache[key]


def load_coords(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        return np.array([[int(r["row"]), int(r["col"])] for r in rows], dtype=np.int64).reshape(-1, 2)
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: bad coordinate file ({exc})") from None


def write_manifest(path, dataset, paths: Mapping, kind="bags", coords_paths=None) -> None:
    """Write a manifest. ``paths[slide_id][encoder]`` gives the relative embedding path."""
    slides = []
    if kind == "bags":
        rows = [(s.slide_id, s.patient_id, s.label) for s in dataset.slides]
    else:
        rows = list(zip(dataset.slide_ids, dataset.patient_ids, dataset.labels.tolist()))
    for sid, pid, lab in rows:
        entry = {"slide_id": sid, "patient_id": pid, "label": int(lab), "embeddings": dict(paths[sid])}
        if coords_paths and sid in coords_paths:
            entry["coords_path"] = coords_paths[sid]
        slides.append(entry)
    doc = {"kind": kind, "class_names": list(dataset.class_names), "slides": slides}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------- subsampling ----
@dataclass(frozen=True)
class TileSample:
    """Paired tile subsample: the same tiles, in the same order, for every encoder."""

    matrices: dict
    labels: np.ndarray
    slide_ids: tuple
    tile_index: np.ndarray  # position of each tile inside its slide


def subsample_tiles(d: BagDataset, n: int, seed: int, encoders=None) -> TileSample:
    """Draw ``n`` tiles without replacement across the dataset; each keeps its slide label."""
    encoders = list(encoders or d.encoders)
    counts = np.array([s.n_tiles for s in d.slides], dtype=np.int64)
    total = int(counts.sum())
    if n < 1 or n > total:
        raise NotEnoughTiles(f"requested {n} tiles, dataset holds {total}")
    pick = np.random.default_rng(seed).permutation(total)[:n]
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    slide_of = np.repeat(np.arange(len(d.slides)), counts)[pick]
    within = pick - offsets[slide_of]
    ids = [f"{d.slides[s].slide_id}:{t}" for s, t in zip(slide_of, within)]
    mats = {}
    for enc in encoders:
        stacked = np.vstack([s.tiles[enc] for s in d.slides])
        mats[enc] = EmbeddingMatrix(enc, ids, stacked[pick])
    labels = np.array([d.slides[s].label for s in slide_of], dtype=np.int64)
    return TileSample(mats, labels, tuple(d.slides[s].slide_id for s in slide_of), within)


def all_tiles(d: BagDataset, encoders=None) -> TileSample:
    """Every tile in dataset order (no shuffling)."""
    encoders = list(encoders or d.encoders)
    counts = [s.n_tiles for s in d.slides]
    slide_of = np.repeat(np.arange(len(d.slides)), counts)
    within = np.concatenate([np.arange(c) for c in counts])
    ids = [f"{d.slides[s].slide_id}:{t}" for s, t in zip(slide_of, within)]
    mats = {enc: EmbeddingMatrix(enc, ids, np.vstack([s.tiles[enc] for s in d.slides])) for enc in encoders}
    labels = np.array([d.slides[s].label for s in slide_of], dtype=np.int64)
    return TileSample(mats, labels, tuple(d.slides[s].slide_id for s in slide_of), within)


def slide_means(d: BagDataset, encoders=None) -> SlideVectorDataset:
    """Aggregate each bag to its mean tile vector."""
    encoders = list(encoders or d.encoders)
    ids = [s.slide_id for s in d.slides]
    mats = {enc: EmbeddingMatrix(enc, ids, np.vstack([s.tiles[enc].mean(axis=0) for s in d.slides]))
            for enc in encoders}
    return SlideVectorDataset(mats, d.patient_ids, d.labels, d.class_names)


# ------------------------------------------------------ standardize ----
@dataclass(frozen=True)
class ColumnStats:
    mean: np.ndarray
    std: np.ndarray
    degenerate: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.degenerate is None:
            object.__setattr__(self, "degenerate", np.asarray(self.std) < DEGENERATE_STD)


def standardize(m, stats: ColumnStats | None = None):
    """Z-score columns with population std. Near-constant columns become zeros.

    Returns ``(standardized, stats)``; pass ``stats`` to reuse training statistics.
    """
    x = as_array(m)
    if stats is None:
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        # relative cutoff: constant columns of large magnitude carry round-off std
        scale = np.maximum(1.0, np.abs(x).max(axis=0))
        stats = ColumnStats(mean, std, std < DEGENERATE_STD * scale)
    elif len(stats.mean) != x.shape[1] or len(stats.std) != x.shape[1]:
        raise StatsDimensionMismatch(f"stats for {len(stats.mean)} columns, matrix has {x.shape[1]}")
    safe = np.where(stats.degenerate, 1.0, stats.std)
    z = (x - stats.mean) / safe
    z[:, stats.degenerate] = 0.0
    if isinstance(m, EmbeddingMatrix):
        z = EmbeddingMatrix(m.encoder_id, m.sample_ids, z, m.provenance)
    return z, stats


def check_paired(mats: Sequence) -> None:
    n = {as_array(m).shape[0] for m in mats}
    if len(n) != 1:
        raise SampleCountMismatch(f"row counts differ: {sorted(n)}")
    ids = [m.sample_ids for m in mats if isinstance(m, EmbeddingMatrix)]
    if ids and any(i != ids[0] for i in ids[1:]):
        raise SampleCountMismatch("matrices are not row-aligned (sample ids differ)")
