"""IDX ingestion and drift-scenario compilation.

A scenario turns a labeled image pool into an initialization set followed by
a fixed number of chunks, with change points given as chunk indices.  All
sampling goes through a seeded numpy Generator, so the same spec and pool
always give bit-identical streams.
"""
from __future__ import annotations

import gzip
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
FINISH_CHUNKS = 5


class StreamError(Exception):
    """Base class for data and scenario errors."""


class IDXParseError(StreamError, ValueError):
    pass


class WrongMagicError(IDXParseError):
    pass


class TruncatedFileError(IDXParseError):
    pass


class CountMismatchError(IDXParseError):
    pass


class ScenarioError(StreamError, ValueError):
    """Scenario spec is inconsistent or the pool cannot feed it."""


@dataclass
class LabeledImages:
    """A batch of images (N, H, W) in [0, 1] with integer labels (N,)."""
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 3 or len(self.images) != len(self.labels):
            raise StreamError(f"images {self.images.shape} do not pair with labels {self.labels.shape}")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "LabeledImages":
        return LabeledImages(self.images[idx], self.labels[idx])

    @staticmethod
    def concat(parts: Sequence["LabeledImages"]) -> "LabeledImages":
        return LabeledImages(np.concatenate([p.images for p in parts]),
                             np.concatenate([p.labels for p in parts]))


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------

def _read_bytes(path: str | Path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return raw


def _parse_header(raw: bytes, magic: int, ndims: int, path) -> tuple[int, ...]:
    need = 4 * (1 + ndims)
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: file too short for an IDX header")
    (got,) = struct.unpack_from(">I", raw, 0)
    if got != magic:
        raise WrongMagicError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    if len(raw) < need:
        raise TruncatedFileError(f"{path}: truncated IDX header")
    return struct.unpack_from(f">{ndims}I", raw, 4)


def read_idx_images(path: str | Path) -> np.ndarray:
    """u8 image array (N, rows, cols) from an IDX3 file."""
    raw = _read_bytes(path)
    n, rows, cols = _parse_header(raw, IMAGES_MAGIC, 3, path)
    body = raw[16:]
    if len(body) < n * rows * cols:
        raise TruncatedFileError(f"{path}: expected {n * rows * cols} pixel bytes, found {len(body)}")
    return np.frombuffer(body, np.uint8, n * rows * cols).reshape(n, rows, cols)


def read_idx_labels(path: str | Path) -> np.ndarray:
    raw = _read_bytes(path)
    (n,) = _parse_header(raw, LABELS_MAGIC, 1, path)
    body = raw[8:]
    if len(body) < n:
        raise TruncatedFileError(f"{path}: expected {n} label bytes, found {len(body)}")
    return np.frombuffer(body, np.uint8, n).astype(np.int64)


def load_idx(images_path: str | Path, labels_path: str | Path) -> LabeledImages:
    """Parse an IDX image/label pair; pixels are scaled to [0, 1]."""
    pixels = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(pixels) != len(labels):
        raise CountMismatchError(f"{images_path}: {len(pixels)} images but {labels_path}: {len(labels)} labels")
    return LabeledImages(pixels.astype(np.float32) / np.float32(255.0), labels)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write u8 images (N, rows, cols) and labels as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(struct.pack(">4I", IMAGES_MAGIC, *images.shape) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", LABELS_MAGIC, len(labels)) + labels.tobytes())


def _find(root: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        if (root / name).exists():
            return root / name
    raise FileNotFoundError(f"{root}: no file named {stem}[.gz]")


def load_mnist(root: str | Path) -> tuple[LabeledImages, LabeledImages]:
    """(train, test) from a directory holding the four standard MNIST files."""
    root = Path(root)
    train = load_idx(_find(root, "train-images-idx3-ubyte"), _find(root, "train-labels-idx1-ubyte"))
    test = load_idx(_find(root, "t10k-images-idx3-ubyte"), _find(root, "t10k-labels-idx1-ubyte"))
    return train, test


def load_pool(root: str | Path) -> LabeledImages:
    """Train and test split concatenated, the 70k-digit pool scenarios draw from."""
    return LabeledImages.concat(load_mnist(root))


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------

def transform_flip(images: np.ndarray) -> np.ndarray:
    """Mirror across both axes (a half turn).  Works on (H, W) or (N, H, W)."""
    return np.ascontiguousarray(np.asarray(images)[..., ::-1, ::-1])


def transform_rotate(images: np.ndarray, angle_degrees) -> np.ndarray:
    """Nearest-neighbour rotation about the image center, counterclockwise as displayed.

    ``angle_degrees`` is a scalar or one angle per image.  Source pixels that
    fall outside the grid become 0.
    """
    images = np.asarray(images)
    single = images.ndim == 2
    batch = images[None] if single else images
    n, h, w = batch.shape
    angles = np.broadcast_to(np.asarray(angle_degrees, dtype=np.float64), (n,))
    if np.any(np.abs(angles) > 360):
        raise ValueError("rotation angle must lie within [-360, 360]")
    theta = np.deg2rad(angles)[:, None, None]
    cos, sin = np.cos(theta), np.sin(theta)
    cr, cc = (h - 1) / 2.0, (w - 1) / 2.0
    rr, ccol = np.meshgrid(np.arange(h) - cr, np.arange(w) - cc, indexing="ij")
    # inverse map: output offset (dr, dc) came from the source rotated back by theta
    src_r = cos * rr + sin * ccol + cr
    src_c = -sin * rr + cos * ccol + cc
    src_r = np.rint(src_r).astype(np.int64)
    src_c = np.rint(src_c).astype(np.int64)
    inside = (src_r >= 0) & (src_r < h) & (src_c >= 0) & (src_c < w)
    idx_n = np.broadcast_to(np.arange(n)[:, None, None], inside.shape)
    out = np.zeros_like(batch)
    out[inside] = batch[idx_n[inside], src_r[inside], src_c[inside]]
    return out[0] if single else out


# ---------------------------------------------------------------------------
# scenario specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Flip:
    cp: int
    kind = "flip"


@dataclass(frozen=True)
class Rotate:
    ramp_start: int
    ramp_end: int
    max_degrees: float = 180.0
    kind = "rotate"

    @property
    def cp(self) -> int:
        return self.ramp_start


@dataclass(frozen=True)
class Appear:
    initial_classes: tuple
    cp: int
    kind = "appear"


@dataclass(frozen=True)
class Remap:
    label_map: tuple  # pairs (c, map(c))
    cp: int
    kind = "remap"


@dataclass(frozen=True)
class Transfer:
    first_classes: tuple
    second_classes: tuple
    cp: int
    kind = "transfer"


@dataclass(frozen=True)
class Reoccur:
    cp1: int
    cp2: int
    kind = "reoccur"


DriftKind = Flip | Rotate | Appear | Remap | Transfer | Reoccur
_KINDS = {k.kind: k for k in (Flip, Rotate, Appear, Remap, Transfer, Reoccur)}


def change_points_of(kind) -> list[int]:
    """Instance indices where drift begins."""
    if isinstance(kind, Reoccur):
        return [kind.cp1, kind.cp2]
    return [kind.cp]


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    drift: DriftKind
    init_count: int
    total: int
    chunks: int
    seed: int = 0

    def __post_init__(self):
        cps = change_points_of(self.drift)
        if self.chunks < 1:
            raise ScenarioError("chunks must be >= 1")
        if not self.init_count < cps[0]:
            raise ScenarioError(f"{self.name}: init_count {self.init_count} must precede the first change point {cps[0]}")
        if any(b <= a for a, b in zip(cps, cps[1:])) or cps[-1] > self.total:
            raise ScenarioError(f"{self.name}: change points {cps} must increase and stay within total {self.total}")
        if self.total - self.init_count < self.chunks:
            raise ScenarioError(f"{self.name}: {self.total - self.init_count} stream instances cannot fill {self.chunks} chunks")
        if isinstance(self.drift, Rotate) and self.drift.ramp_end < self.drift.ramp_start:
            raise ScenarioError("rotation ramp must end after it starts")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["drift"] = {"kind": self.drift.kind, **{k: _listify(v) for k, v in asdict(self.drift).items()}}
        return d

    @staticmethod
    def from_dict(d: dict) -> "ScenarioSpec":
        d = dict(d)
        drift = dict(d.pop("drift"))
        kind = drift.pop("kind")
        if kind not in _KINDS:
            raise ScenarioError(f"unknown scenario kind {kind!r}")
        for key in ("initial_classes", "first_classes", "second_classes"):
            if key in drift:
                drift[key] = tuple(int(c) for c in drift[key])
        if "label_map" in drift:
            lm = drift["label_map"]
            items = lm.items() if isinstance(lm, dict) else lm
            drift["label_map"] = tuple((int(a), int(b)) for a, b in items)
        return ScenarioSpec(drift=_KINDS[kind](**drift), **d)

    def canonical(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()


def _listify(v):
    if isinstance(v, tuple):
        return [_listify(x) for x in v]
    return v


def preset(name: str, seed: int = 0) -> ScenarioSpec:
    """Standard MNIST scenarios with the sizes used in the reference experiments."""
    low, high = tuple(range(5)), tuple(range(5, 10))
    table = {
        "mnist_flip": (Flip(70_000), 40_000, 140_000, 100),
        "mnist_rotate": (Rotate(35_000, 65_000, 180.0), 20_000, 70_000, 100),
        "mnist_appear": (Appear(low, 20_400), 15_000, 50_400, 100),
        "mnist_remap": (Remap(tuple(zip(low, high)), 35_700), 20_000, 70_000, 100),
        "mnist_transfer": (Transfer(low, high, 35_700), 20_000, 70_000, 100),
        "mnist_flip_reoccur": (Reoccur(35_000, 55_000), 20_000, 70_000, 100),
    }
    if name not in table:
        raise ScenarioError(f"unknown preset {name!r}; choose from {sorted(table)}")
    drift, init, total, chunks = table[name]
    return ScenarioSpec(name, drift, init, total, chunks, seed)


PRESETS = ("mnist_flip", "mnist_rotate", "mnist_appear", "mnist_remap", "mnist_transfer", "mnist_flip_reoccur")


# ---------------------------------------------------------------------------
# streams
# ---------------------------------------------------------------------------

@dataclass
class Stream:
    spec: ScenarioSpec
    init_set: LabeledImages
    chunks: list
    change_points: list
    num_classes: int
    instance_change_points: list = field(default_factory=list)

    @property
    def first_cp(self) -> int:
        return self.change_points[0]

    @property
    def chunk_sizes(self) -> list[int]:
        return [len(c) for c in self.chunks]

    def __len__(self) -> int:
        return len(self.chunks)


@dataclass(frozen=True)
class MetricsPhaseMap:
    adaptation_range: range
    finish_range: range


def chunk_sizes(stream_len: int, chunks: int) -> list[int]:
    """Floor size per chunk, remainder handed out one each from the front."""
    base, rem = divmod(stream_len, chunks)
    return [base + (1 if i < rem else 0) for i in range(chunks)]


def chunk_of_instance(spec: ScenarioSpec, instance_idx: int) -> int:
    """Index of the chunk containing stream position ``instance_idx``."""
    sizes = chunk_sizes(spec.total - spec.init_count, spec.chunks)
    bounds = np.cumsum([spec.init_count] + sizes)
    return int(min(np.searchsorted(bounds, instance_idx, side="right") - 1, spec.chunks - 1))


def rotation_schedule(spec: Rotate, instance_idx) -> np.ndarray | float:
    """Maximum absolute rotation at a stream position, a linear ramp."""
    idx = np.asarray(instance_idx, dtype=np.float64)
    if spec.ramp_end == spec.ramp_start:
        out = np.where(idx >= spec.ramp_end, spec.max_degrees, 0.0)
    else:
        frac = np.clip((idx - spec.ramp_start) / (spec.ramp_end - spec.ramp_start), 0.0, 1.0)
        out = frac * spec.max_degrees
    return float(out) if np.ndim(out) == 0 else out


def _cycled(pool_idx: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` draws from ``pool_idx`` without replacement, reshuffling when exhausted."""
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    if len(pool_idx) == 0:
        raise ScenarioError("empty class pool for a stream segment")
    parts, have = [], 0
    while have < count:
        take = rng.permutation(pool_idx)[: count - have]
        parts.append(take)
        have += len(take)
    return np.concatenate(parts)


def _fresh(pool_idx: np.ndarray, count: int, rng: np.random.Generator, what: str) -> np.ndarray:
    if count > len(pool_idx):
        raise ScenarioError(f"{what}: needs {count} distinct instances, pool has {len(pool_idx)}")
    return rng.permutation(pool_idx)[:count]


def build_scenario(dataset: LabeledImages, spec: ScenarioSpec) -> Stream:
    """Compile ``spec`` over ``dataset`` into an init set and labeled chunks.

    Positions before the first change point use distinct instances; later
    segments may revisit instances (reshuffled), since several scenarios are
    longer than the pool.
    """
    rng = np.random.default_rng(spec.seed)
    drift = spec.drift
    labels = dataset.labels
    all_idx = np.arange(len(dataset))
    cps = change_points_of(drift)
    cp = cps[0]
    classes_present = np.unique(labels)
    num_classes = int(classes_present.max()) + 1 if len(classes_present) else 0
    images = dataset.images
    out_labels = None

    if isinstance(drift, (Flip, Rotate, Reoccur)):
        if cp > len(all_idx):
            raise ScenarioError(f"{spec.name}: needs {cp} distinct pre-drift instances, pool has {len(all_idx)}")
        order = _cycled(all_idx, spec.total, rng)
        images = dataset.images[order]
        out_labels = labels[order]
        if isinstance(drift, Flip):
            images[cp:] = transform_flip(images[cp:])
        elif isinstance(drift, Reoccur):
            images[drift.cp1:drift.cp2] = transform_flip(images[drift.cp1:drift.cp2])
        else:
            pos = np.arange(spec.total)
            limits = rotation_schedule(drift, pos)
            angles = rng.uniform(-1.0, 1.0, size=spec.total) * limits
            moving = limits > 0
            images[moving] = transform_rotate(images[moving], angles[moving])
    elif isinstance(drift, Appear):
        initial = np.isin(labels, drift.initial_classes)
        pre = _fresh(all_idx[initial], cp, rng, f"{spec.name} initial classes")
        post = _cycled(all_idx, spec.total - cp, rng)
        order = np.concatenate([pre, post])
        images, out_labels = dataset.images[order], labels[order]
    elif isinstance(drift, Remap):
        src = [a for a, _ in drift.label_map]
        dst = [b for _, b in drift.label_map]
        if len(set(src)) != len(src) or len(set(dst)) != len(dst):
            raise ScenarioError("label_map must be one-to-one")
        inverse = dict(zip(dst, src))
        pre = _fresh(all_idx[np.isin(labels, src)], cp, rng, f"{spec.name} source classes")
        post = _cycled(all_idx[np.isin(labels, dst)], spec.total - cp, rng)
        order = np.concatenate([pre, post])
        images = dataset.images[order]
        out_labels = np.concatenate([labels[pre], [inverse[int(c)] for c in labels[post]]]).astype(np.int64)
        # labels are renumbered densely over the source classes
        dense = {c: i for i, c in enumerate(sorted(src))}
        out_labels = np.array([dense[int(c)] for c in out_labels], dtype=np.int64)
        num_classes = len(src)
    elif isinstance(drift, Transfer):
        pre = _fresh(all_idx[np.isin(labels, drift.first_classes)], cp, rng, f"{spec.name} first classes")
        post = _cycled(all_idx[np.isin(labels, drift.second_classes)], spec.total - cp, rng)
        order = np.concatenate([pre, post])
        images, out_labels = dataset.images[order], labels[order]
    else:  # pragma: no cover
        raise ScenarioError(f"unsupported drift {drift!r}")

    init = LabeledImages(images[:spec.init_count], out_labels[:spec.init_count])
    sizes = chunk_sizes(spec.total - spec.init_count, spec.chunks)
    bounds = np.cumsum([spec.init_count] + sizes)
    chunks = [LabeledImages(images[a:b], out_labels[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
    return Stream(spec, init, chunks, [chunk_of_instance(spec, c) for c in cps], num_classes, list(cps))


def phase_map(stream: Stream | int, first_cp: int | None = None) -> MetricsPhaseMap:
    """Adaptation phase [first CP, chunks - 5) and finish phase (last 5 chunks)."""
    if isinstance(stream, Stream):
        n = len(stream.chunks)
        first_cp = stream.change_points[0] if stream.change_points else None
    else:
        n = int(stream)
    if first_cp is None:
        raise ScenarioError("phase map needs at least one change point")
    if n < FINISH_CHUNKS + 1:
        raise ScenarioError(f"phase map needs at least {FINISH_CHUNKS + 1} chunks, got {n}")
    return MetricsPhaseMap(range(first_cp, max(first_cp, n - FINISH_CHUNKS)), range(n - FINISH_CHUNKS, n))


# ---------------------------------------------------------------------------
# stream cache container
# ---------------------------------------------------------------------------

CACHE_MAGIC = b"DRFT"
CACHE_VERSION = 1


def save_stream(stream: Stream, path: str | Path) -> None:
    """Write a DRFT cache file.

    Little-endian layout: magic, u32 version, u32-length spec JSON, u32 rows,
    u32 cols, u32 num_classes, u32 CP count + u32 chunk-index CPs, u32 CP
    count + u32 instance CPs, u32 init size, u32 chunk count + u32 sizes,
    then all pixels as u8 (value x 255) and all labels as u32.
    """
    spec_bytes = stream.spec.canonical()
    parts = [stream.init_set] + list(stream.chunks)
    h, w = stream.init_set.images.shape[1:]
    buf = bytearray(CACHE_MAGIC)
    buf += struct.pack("<II", CACHE_VERSION, len(spec_bytes)) + spec_bytes
    buf += struct.pack("<III", h, w, stream.num_classes)
    for cps in (stream.change_points, stream.instance_change_points):
        buf += struct.pack(f"<I{len(cps)}I", len(cps), *cps)
    buf += struct.pack("<I", len(stream.init_set))
    buf += struct.pack(f"<I{len(stream.chunks)}I", len(stream.chunks), *stream.chunk_sizes)
    for p in parts:
        buf += np.rint(p.images * 255.0).astype(np.uint8).tobytes()
    for p in parts:
        buf += p.labels.astype("<u4").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_stream(path: str | Path) -> Stream:
    data = Path(path).read_bytes()
    if data[:4] != CACHE_MAGIC:
        raise StreamError(f"{path}: not a DRFT stream cache")
    try:
        version, slen = struct.unpack_from("<II", data, 4)
        if version != CACHE_VERSION:
            raise StreamError(f"{path}: unsupported cache version {version}")
        off = 12
        spec = ScenarioSpec.from_dict(json.loads(data[off:off + slen]))
        off += slen
        h, w, num_classes = struct.unpack_from("<III", data, off)
        off += 12
        cp_lists = []
        for _ in range(2):
            (n,) = struct.unpack_from("<I", data, off)
            cp_lists.append(list(struct.unpack_from(f"<{n}I", data, off + 4)))
            off += 4 + 4 * n
        (init_n,) = struct.unpack_from("<I", data, off)
        (nchunks,) = struct.unpack_from("<I", data, off + 4)
        sizes = list(struct.unpack_from(f"<{nchunks}I", data, off + 8))
        off += 8 + 4 * nchunks
        counts = [init_n] + sizes
        total = sum(counts)
        if len(data) != off + total * h * w + 4 * total:
            raise StreamError(f"{path}: size does not match its chunk table")
        pixels = np.frombuffer(data, np.uint8, total * h * w, off).reshape(total, h, w)
        labels = np.frombuffer(data, "<u4", total, off + total * h * w).astype(np.int64)
    except StreamError:
        raise
    except (struct.error, ValueError, KeyError, TypeError) as exc:
        raise StreamError(f"{path}: corrupt or truncated stream cache ({exc})") from exc
    images = pixels.astype(np.float32) / np.float32(255.0)
    bounds = np.cumsum([0] + counts)
    segs = [LabeledImages(images[a:b], labels[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
    return Stream(spec, segs[0], segs[1:], cp_lists[0], num_classes, cp_lists[1])
