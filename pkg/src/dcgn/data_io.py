"""Feature files, JSON Lines manifests and a seeded synthetic corpus.

Feature file layout (little-endian)::

    b"DCGN" | u32 version=1 | u32 n | u32 d | n*d float32, row-major
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor_core import Tensor2

MAGIC = b"DCGN"
VERSION = 1
HEADER = struct.Struct("<4sIII")

_MASK = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15


class FormatError(ValueError):
    def __init__(self, message: str, offset: int, path=None):
        where = f"{path}: " if path is not None else ""
        super().__init__(f"{where}{message} (byte offset {offset})")
        self.offset = offset
        self.path = path


class ManifestError(ValueError):
    pass


# -- feature files -----------------------------------------------------------

def encode_features(matrix: Tensor2) -> bytes:
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {m.shape}")
    data = m.astype("<f4")
    if not np.all(np.isfinite(data)):
        raise ValueError("features must be finite at float32 precision")
    return HEADER.pack(MAGIC, VERSION, m.shape[0], m.shape[1]) + data.tobytes(order="C")


def decode_features(blob: bytes, path=None) -> Tensor2:
    if len(blob) < HEADER.size:
        raise FormatError(f"file too short for header ({len(blob)} bytes)", len(blob), path)
    magic, version, n, d = HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0, path)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4, path)
    end = HEADER.size + 4 * n * d
    if end > len(blob):
        raise FormatError(
            f"header declares {n}x{d} values but payload ends at {len(blob)}", end, path)
    if end < len(blob):
        raise FormatError(f"{len(blob) - end} trailing bytes after payload", end, path)
    values = np.frombuffer(blob, dtype="<f4", count=n * d, offset=HEADER.size)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise FormatError("non-finite value", HEADER.size + 4 * int(bad[0]), path)
    return values.astype(np.float64).reshape(n, d)


def write_features(path, matrix: Tensor2) -> None:
    Path(path).write_bytes(encode_features(matrix))


def read_features(path) -> Tensor2:
    return decode_features(Path(path).read_bytes(), path)


def read_header(path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        blob = fh.read(HEADER.size)
    if len(blob) < HEADER.size:
        raise FormatError("file too short for header", len(blob), path)
    magic, version, n, d = HEADER.unpack(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0, path)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4, path)
    return n, d


# -- manifests ---------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    id: str
    path: Path
    labels: tuple[int, ...]


def write_manifest(path, entries: list[ManifestEntry], base_dir=None) -> None:
    base = Path(base_dir) if base_dir is not None else Path(path).parent
    with open(path, "w") as fh:
        for e in entries:
            rel = os.path.relpath(e.path, base)
            fh.write(json.dumps({"id": e.id, "path": rel, "labels": list(e.labels)}) + "\n")


def load_manifest(path, num_classes: int | None = None, check_paths: bool = True) -> list[ManifestEntry]:
    """Parse a manifest; relative paths resolve against the manifest's directory."""
    path = Path(path)
    base = path.parent
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                ex_id, rel, labels = str(rec["id"]), rec["path"], rec["labels"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ManifestError(f"{path}:{lineno}: malformed record ({exc})") from None
            if ex_id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate id {ex_id!r}")
            seen.add(ex_id)
            if not all(isinstance(c, int) and c >= 0 for c in labels):
                raise ManifestError(f"{path}:{lineno}: labels must be non-negative integers")
            if num_classes is not None and any(c >= num_classes for c in labels):
                raise ManifestError(
                    f"{path}:{lineno}: label index >= num_classes ({num_classes})")
            full = Path(rel) if os.path.isabs(rel) else base / rel
            if check_paths and not full.exists():
                raise ManifestError(f"{path}:{lineno}: missing feature file {full}")
            entries.append(ManifestEntry(ex_id, full, tuple(sorted(set(labels)))))
    return entries


# -- deterministic random stream ---------------------------------------------

def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, index: int) -> int:
    """Independent 64-bit seed for the ``index``-th sub-stream of ``seed``."""
    z = np.array([(seed + (index + 1) * GAMMA) & _MASK], dtype=np.uint64)
    return int(_mix(z)[0])


class SplitMix64:
    """Counter-based splitmix64: output i is mix(seed + (i+1) * gamma).

    Normals come from Box-Muller on pairs of uniforms, so streams are
    identical on every platform.
    """

    def __init__(self, seed: int):
        self.seed = seed & _MASK
        self.counter = 0

    def next_u64(self, count: int) -> np.ndarray:
        i = np.arange(self.counter + 1, self.counter + count + 1, dtype=np.uint64)
        self.counter += count
        with np.errstate(over="ignore"):
            return _mix(np.uint64(self.seed) + i * np.uint64(GAMMA))

    def uniform(self, count: int) -> np.ndarray:
        return (self.next_u64(count) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def integers(self, low: int, high: int, count: int = 1) -> np.ndarray:
        """Uniform integers in [low, high] inclusive."""
        span = high - low + 1
        return low + np.minimum(np.floor(self.uniform(count) * span), span - 1).astype(np.int64)

    def normal(self, count: int) -> np.ndarray:
        pairs = (count + 1) // 2
        u = self.uniform(2 * pairs)
        u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(2.0 * math.pi * u2)
        z[1::2] = r * np.sin(2.0 * math.pi * u2)
        return z[:count]


# -- synthetic corpus --------------------------------------------------------

@dataclass
class SynthSpec:
    num_classes: int
    dim: int
    prototypes_per_class: int = 1
    shots_per_video: tuple[int, int] = (2, 4)
    frames_per_shot: tuple[int, int] = (8, 16)
    noise_std: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1 or self.dim < 1 or self.prototypes_per_class < 1:
            raise ValueError("num_classes, dim and prototypes_per_class must be positive")
        for name in ("shots_per_video", "frames_per_shot"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} must satisfy 1 <= low <= high, got {(lo, hi)}")
            setattr(self, name, (int(lo), int(hi)))
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


_PROTOTYPE_SALT = 0x5EED_0F_C1A55


def make_prototypes(spec: SynthSpec) -> np.ndarray:
    """Unit vectors, shape (num_classes, prototypes_per_class, dim)."""
    stream = SplitMix64(derive_seed(spec.seed ^ _PROTOTYPE_SALT, 0))
    count = spec.num_classes * spec.prototypes_per_class
    while True:
        raw = stream.normal(count * spec.dim).reshape(count, spec.dim)
        norms = np.linalg.norm(raw, axis=1, keepdims=True)
        if np.all(norms > 0):
            protos = raw / norms
            # Distinctness is a formality for continuous draws, but check it.
            if count == 1 or np.max(np.abs(np.triu(protos @ protos.T, 1))) < 1 - 1e-9:
                return protos.reshape(spec.num_classes, spec.prototypes_per_class, spec.dim)


@dataclass
class SynthVideo:
    frames: np.ndarray
    labels: tuple[int, ...]
    shot_classes: list[int]
    cuts: list[int]


def synth_video(spec: SynthSpec, prototypes: np.ndarray, index: int) -> SynthVideo:
    stream = SplitMix64(derive_seed(spec.seed, index))
    n_shots = int(stream.integers(*spec.shots_per_video)[0])
    classes: list[int] = []
    pieces = []
    cuts = []
    prev_proto = None
    total = 0
    for _ in range(n_shots):
        # Consecutive shots never reuse the same prototype, so every join is a real change.
        while True:
            cls = int(stream.integers(0, spec.num_classes - 1)[0])
            which = int(stream.integers(0, spec.prototypes_per_class - 1)[0])
            if (cls, which) != prev_proto or spec.num_classes * spec.prototypes_per_class == 1:
                break
        prev_proto = (cls, which)
        length = int(stream.integers(*spec.frames_per_shot)[0])
        noise = stream.normal(length * spec.dim).reshape(length, spec.dim) * spec.noise_std
        pieces.append(prototypes[cls, which][None, :] + noise)
        classes.append(cls)
        if total:
            cuts.append(total)
        total += length
    return SynthVideo(np.vstack(pieces), tuple(sorted(set(classes))), classes, cuts)


def synth_corpus(spec: SynthSpec, count: int, out_dir, *, offset: int = 0,
                 manifest_name: str = "manifest.jsonl") -> Path:
    """Write ``count`` videos and their manifest; returns the manifest path.

    Video ``i`` is generated from a seed derived from (spec.seed, offset + i),
    so disjoint offsets give disjoint splits over the same prototypes.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    out = Path(out_dir)
    (out / "videos").mkdir(parents=True, exist_ok=True)
    prototypes = make_prototypes(spec)
    entries = []
    for i in range(offset, offset + count):
        video = synth_video(spec, prototypes, i)
        vid = f"v{i:06d}"
        path = out / "videos" / f"{vid}.dcgn"
        write_features(path, video.frames)
        entries.append(ManifestEntry(vid, path, video.labels))
    manifest = out / manifest_name
    write_manifest(manifest, entries)
    return manifest
