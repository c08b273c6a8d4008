"""On-disk containers: datasets, checkpoints and exported feature grids.

Every container is a directory holding a JSON manifest and one flat binary
file of tensors.  A tensor blob is::

    b"BTNS" | uint32 ndim | uint32 dims[ndim] | float32 data   (little-endian)

The manifest records, per tensor, the file name, byte offset and length of
the blob and its 64-bit FNV-1a checksum (hex).  See docs/manifest.md for the
field-by-field schema.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from filelock import FileLock

from ._kernels import fnv1a64
from .core import BrainSample, DataError, EncoderConfig, FeatureGrid, SubjectSpec, validate_dataset

FORMAT_VERSION = 1
MAGIC = b"BTNS"
CHECKPOINT_MANIFEST = "checkpoint.json"
CHECKPOINT_BLOBS = "tensors.bin"
DATASET_BLOBS = "data.bin"
FEATURES_MANIFEST = "features.json"
FEATURES_BLOBS = "features.bin"


class ChecksumError(DataError):
    pass


class VersionError(DataError):
    pass


# --------------------------------------------------------------------------
# blob encoding
# --------------------------------------------------------------------------

def encode_tensor(arr) -> bytes:
    a = np.array(arr, dtype="<f4", order="C")  # ascontiguousarray would promote 0-d to 1-d
    header = MAGIC + struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape)
    return header + a.tobytes()


def decode_tensor(blob: bytes | memoryview) -> np.ndarray:
    blob = memoryview(blob)
    if bytes(blob[:4]) != MAGIC:
        raise DataError("bad tensor magic")
    (ndim,) = struct.unpack_from("<I", blob, 4)
    shape = struct.unpack_from(f"<{ndim}I", blob, 8)
    start = 8 + 4 * ndim
    count = int(np.prod(shape)) if ndim else 1
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
    return data.reshape(shape).astype(np.float32)


class BlobWriter:
    """Appends tensor blobs to an in-memory buffer and hands back manifest refs."""

    def __init__(self, file_name: str):
        self.file_name = file_name
        self.buf = io.BytesIO()

    def add(self, arr) -> dict:
        blob = encode_tensor(arr)
        offset = self.buf.tell()
        self.buf.write(blob)
        return {
            "file": self.file_name,
            "offset": offset,
            "length": len(blob),
            "shape": list(np.shape(arr)),
            "fnv1a64": f"{fnv1a64(blob):016x}",
        }

    def write(self, directory: Path) -> None:
        (directory / self.file_name).write_bytes(self.buf.getvalue())


class BlobReader:
    def __init__(self, directory: Path):
        self.directory = directory
        self._files: dict[str, bytes] = {}

    def _file(self, name: str) -> bytes:
        if name not in self._files:
            path = self.directory / name
            if not path.exists():
                raise DataError(f"missing tensor file: {path}")
            self._files[name] = path.read_bytes()
        return self._files[name]

    def read(self, ref: dict) -> np.ndarray:
        data = self._file(ref["file"])
        start, length = int(ref["offset"]), int(ref["length"])
        if start + length > len(data):
            raise DataError(f"tensor ref past end of {ref['file']}")
        blob = memoryview(data)[start:start + length]
        if f"{fnv1a64(blob):016x}" != ref["fnv1a64"]:
            raise ChecksumError(f"checksum mismatch in {ref['file']} at offset {start}")
        arr = decode_tensor(blob)
        if list(arr.shape) != list(ref["shape"]):
            raise DataError(f"shape header {arr.shape} disagrees with manifest {ref['shape']}")
        return arr


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _read_manifest(path: Path) -> dict:
    try:
        m = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest is not valid JSON: {path}: {exc}") from None
    if m.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"{path}: format_version {m.get('format_version')!r}, expected {FORMAT_VERSION}")
    return m


def _locked(directory: Path) -> FileLock:
    directory.mkdir(parents=True, exist_ok=True)
    return FileLock(str(directory / ".write.lock"))


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    config: EncoderConfig
    specs: list[SubjectSpec]
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def encoder(self):
        from .encoder import BrainEncoder, load_parameter_arrays

        state = BrainEncoder(self.config, self.specs)
        load_parameter_arrays(state, self.params)
        return state

    @classmethod
    def from_encoder(cls, state, optimizer=None, provenance=None) -> "Checkpoint":
        from .encoder import parameter_arrays

        return cls(
            config=state.config,
            specs=list(state.specs.values()),
            params=parameter_arrays(state),
            optimizer=dict(optimizer or {}),
            provenance=dict(provenance or {}),
        )

    def perceiver_digest(self) -> str:
        """Short digest of the shared-encoder parameters; equal iff they are bitwise equal."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            if name.startswith("perceiver."):
                h.update(name.encode())
                h.update(f"{fnv1a64(np.ascontiguousarray(self.params[name], dtype='<f4')):016x}".encode())
        return h.hexdigest()[:16]


def save_checkpoint(state, path) -> Path:
    """Write a Checkpoint (or a bare BrainEncoder) to directory ``path``."""
    ckpt = state if isinstance(state, Checkpoint) else Checkpoint.from_encoder(state)
    path = Path(path)
    writer = BlobWriter(CHECKPOINT_BLOBS)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "checkpoint",
        "encoder_config": ckpt.config.to_dict(),
        "subjects": [s.to_dict() for s in ckpt.specs],
        "params": {name: writer.add(ckpt.params[name]) for name in sorted(ckpt.params)},
        "optimizer": {name: writer.add(ckpt.optimizer[name]) for name in sorted(ckpt.optimizer)},
        "provenance": ckpt.provenance,
    }
    with _locked(path):
        writer.write(path)
        _write_json(path / CHECKPOINT_MANIFEST, manifest)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    m = _read_manifest(path / CHECKPOINT_MANIFEST)
    if m.get("kind") != "checkpoint":
        raise DataError(f"{path} is not a checkpoint")
    reader = BlobReader(path)
    return Checkpoint(
        config=EncoderConfig.from_dict(m["encoder_config"]),
        specs=[SubjectSpec.from_dict(s) for s in m["subjects"]],
        params={k: reader.read(ref) for k, ref in m["params"].items()},
        optimizer={k: reader.read(ref) for k, ref in m.get("optimizer", {}).items()},
        provenance=m.get("provenance", {}),
    )


def load_encoder(path):
    return load_checkpoint(path).encoder()


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

@dataclass
class Dataset:
    specs: list[SubjectSpec]
    train: list[BrainSample]
    test: list[BrainSample]

    def split(self, name: str) -> list[BrainSample]:
        return {"train": self.train, "test": self.test}[name]


def _sample_record(s: BrainSample, writer: BlobWriter) -> dict:
    return {
        "subject_id": s.subject_id,
        "stimulus_id": s.stimulus_id,
        "voxels": writer.add(s.voxels),
        "target": None if s.target is None else writer.add(s.target.values),
    }


def _annotation_payload(samples: Sequence[BrainSample]) -> Optional[dict]:
    """COCO-style records keyed by stimulus id; None when nothing is annotated."""
    images, boxes, caps = {}, [], []
    for s in samples:
        if s.stimulus_id is None or s.stimulus_id in images:
            continue
        if s.boxes is None and s.captions is None:
            continue
        images[s.stimulus_id] = {"id": s.stimulus_id}
        for label, x1, y1, x2, y2 in s.boxes or ():
            boxes.append({"image_id": s.stimulus_id, "category": label, "bbox": [x1, y1, x2, y2]})
        for c in s.captions or ():
            caps.append({"image_id": s.stimulus_id, "caption": c})
    if not images:
        return None
    return {"images": list(images.values()), "annotations": boxes, "captions": caps}


def save_dataset(
    directory,
    specs: Sequence[SubjectSpec],
    train: Sequence[BrainSample],
    test: Sequence[BrainSample] = (),
    extra: Optional[dict] = None,
) -> Path:
    directory = Path(directory)
    writer = BlobWriter(DATASET_BLOBS)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "dataset",
        "subjects": [s.to_dict() for s in specs],
        "splits": {
            "train": [_sample_record(s, writer) for s in train],
            "test": [_sample_record(s, writer) for s in test],
        },
        "annotations": None,
    }
    ann = _annotation_payload(list(train) + list(test))
    with _locked(directory):
        if ann is not None:
            manifest["annotations"] = "annotations.json"
            _write_json(directory / "annotations.json", ann)
        if extra:
            manifest["extra"] = extra
        writer.write(directory)
        _write_json(directory / "manifest.json", manifest)
    return directory / "manifest.json"


def load_annotations(path) -> dict[str, dict]:
    """Read a COCO-style annotation file into {stimulus_id: {"boxes": [...], "captions": [...]}}."""
    try:
        ann = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"annotation file not found: {path}") from None
    out: dict[str, dict] = {str(img["id"]): {"boxes": [], "captions": []} for img in ann.get("images", [])}
    for a in ann.get("annotations", []):
        out.setdefault(str(a["image_id"]), {"boxes": [], "captions": []})["boxes"].append(
            (a["category"], *map(float, a["bbox"])))
    for c in ann.get("captions", []):
        out.setdefault(str(c["image_id"]), {"boxes": [], "captions": []})["captions"].append(c["caption"])
    return out


def load_dataset(manifest_path, average_repeats: bool = False) -> Dataset:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    m = _read_manifest(manifest_path)
    if m.get("kind", "dataset") != "dataset":
        raise DataError(f"{manifest_path} is not a dataset manifest")
    root = manifest_path.parent
    specs = [SubjectSpec.from_dict(s) for s in m["subjects"]]
    reader = BlobReader(root)
    ann = load_annotations(root / m["annotations"]) if m.get("annotations") else {}

    def build(rec) -> BrainSample:
        a = ann.get(rec.get("stimulus_id"), {})
        target = rec.get("target")
        return BrainSample(
            subject_id=rec["subject_id"],
            voxels=reader.read(rec["voxels"]),
            target=None if target is None else FeatureGrid(reader.read(target)),
            boxes=tuple(a["boxes"]) if a.get("boxes") else None,
            captions=tuple(a["captions"]) if a.get("captions") else None,
            stimulus_id=rec.get("stimulus_id"),
        )

    splits = {name: [build(r) for r in m["splits"].get(name, [])] for name in ("train", "test")}
    for name, samples in splits.items():
        report = validate_dataset(samples, specs)
        if not report.ok:
            raise DataError(f"{name} split failed validation:\n{report}")
    _check_shared_test(splits["test"])
    if average_repeats:
        splits = {k: average_repetitions(v) for k, v in splits.items()}
    return Dataset(specs, splits["train"], splits["test"])


def _check_shared_test(test: Sequence[BrainSample]) -> None:
    per: dict[str, set] = {}
    for s in test:
        per.setdefault(s.subject_id, set()).add(s.stimulus_id)
    stim_sets = list(per.values())
    if stim_sets and any(st != stim_sets[0] for st in stim_sets[1:]):
        raise DataError("test split must list the same stimuli for every subject")


def average_repetitions(samples: Sequence[BrainSample]) -> list[BrainSample]:
    """Average voxel vectors of repeated (subject, stimulus) presentations.

    Samples without a stimulus id are passed through.  Order follows first
    appearance.
    """
    groups: dict[tuple, list[BrainSample]] = {}
    passthrough = []
    order = []
    for i, s in enumerate(samples):
        if s.stimulus_id is None:
            passthrough.append((i, s))
            continue
        key = (s.subject_id, s.stimulus_id)
        if key not in groups:
            groups[key] = []
            order.append((i, key))
        groups[key].append(s)
    merged = []
    for i, key in order:
        reps = groups[key]
        first = reps[0]
        merged.append((i, BrainSample(
            subject_id=first.subject_id,
            voxels=np.mean([r.voxels for r in reps], axis=0).astype(first.voxels.dtype),
            target=first.target,
            boxes=first.boxes,
            captions=first.captions,
            stimulus_id=first.stimulus_id,
        )))
    return [s for _, s in sorted(merged + passthrough, key=lambda t: t[0])]


def dataset_manifest_summary(manifest_path) -> dict:
    m = _read_manifest(Path(manifest_path))
    return {
        "format_version": m["format_version"],
        "subjects": m["subjects"],
        "train": len(m["splits"].get("train", [])),
        "test": len(m["splits"].get("test", [])),
        "annotations": m.get("annotations"),
    }


# --------------------------------------------------------------------------
# feature export for the language-model bridge
# --------------------------------------------------------------------------

def export_features(grids: Sequence[FeatureGrid], path, ids: Optional[Sequence[str]] = None,
                    grid_shape: tuple[int, int] = (0, 0)) -> Path:
    """Stack grids into one (N, T, D) tensor with a manifest.

    An empty list writes a valid container of shape (0, *grid_shape).
    """
    path = Path(path)
    grids = list(grids)
    if grids:
        shapes = {g.shape for g in grids}
        if len(shapes) != 1:
            raise ValueError(f"grids have differing shapes: {sorted(shapes)}")
        stack = np.stack([g.values for g in grids]).astype(np.float32)
    else:
        stack = np.zeros((0, *grid_shape), dtype=np.float32)
    if ids is not None and len(ids) != len(grids):
        raise ValueError("ids must match grids one-to-one")
    writer = BlobWriter(FEATURES_BLOBS)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "features",
        "count": int(stack.shape[0]),
        "grid_shape": list(stack.shape[1:]),
        "ids": list(ids) if ids is not None else None,
        "features": writer.add(stack),
    }
    with _locked(path):
        writer.write(path)
        _write_json(path / FEATURES_MANIFEST, manifest)
    return path


def import_features(path) -> tuple[list[FeatureGrid], Optional[list[str]]]:
    path = Path(path)
    m = _read_manifest(path / FEATURES_MANIFEST)
    stack = BlobReader(path).read(m["features"])
    return [FeatureGrid(g) for g in stack], m.get("ids")


def features_header(path) -> dict:
    m = _read_manifest(Path(path) / FEATURES_MANIFEST)
    return {"count": m["count"], "grid_shape": tuple(m["grid_shape"])}
