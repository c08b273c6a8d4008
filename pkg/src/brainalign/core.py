"""Domain types, configuration and the RNG contract shared across the package."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Optional

import numpy as np


class BrainAlignError(Exception):
    """Base class for package errors."""

    exit_code = 2


class DataError(BrainAlignError):
    exit_code = 2


class NumericError(BrainAlignError):
    exit_code = 3


# --------------------------------------------------------------------------
# RNG
# --------------------------------------------------------------------------

def new_rng(seed: int) -> np.random.Generator:
    """PCG64 stream; identical draws for identical seeds on every platform."""
    if seed < 0:
        raise ValueError("seed must be unsigned")
    return np.random.Generator(np.random.PCG64(seed))


def child_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63 - 1))


# --------------------------------------------------------------------------
# Domain types
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SubjectSpec:
    subject_id: str
    voxel_dim: int

    def __post_init__(self):
        if not isinstance(self.subject_id, str) or not self.subject_id:
            raise ValueError("subject_id must be a non-empty string")
        if "." in self.subject_id:
            # parameter names are dotted paths
            raise ValueError(f"subject_id {self.subject_id!r} may not contain '.'")
        if int(self.voxel_dim) < 1:
            raise ValueError(f"voxel_dim must be >= 1, got {self.voxel_dim}")

    def to_dict(self) -> dict:
        return {"subject_id": self.subject_id, "voxel_dim": int(self.voxel_dim)}

    @classmethod
    def from_dict(cls, d: dict) -> "SubjectSpec":
        return cls(str(d["subject_id"]), int(d["voxel_dim"]))


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    """Fixed (tokens x channels) feature matrix."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64 if np.asarray(self.values).dtype == np.float64 else np.float32)
        if v.ndim != 2:
            raise ValueError(f"FeatureGrid needs a 2-D matrix, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("FeatureGrid values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def tokens(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def __eq__(self, other):
        if not isinstance(other, FeatureGrid):
            return NotImplemented
        return self.values.dtype == other.values.dtype and np.array_equal(self.values, other.values)

    def to_dict(self) -> dict:
        return {
            "tokens": self.tokens,
            "channels": self.channels,
            "dtype": str(self.values.dtype),
            "values": self.values.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureGrid":
        arr = np.asarray(d["values"], dtype=d.get("dtype", "float32"))
        return cls(arr.reshape(int(d["tokens"]), int(d["channels"])))


Box = tuple[str, float, float, float, float]


@dataclass(frozen=True, eq=False)
class BrainSample:
    """One fMRI response with its optional alignment target and annotations.

    ``stimulus_id`` identifies the viewed image; it ties repetitions together
    and pairs brain rows with target rows during retrieval.
    """

    subject_id: str
    voxels: np.ndarray
    target: Optional[FeatureGrid] = None
    boxes: Optional[tuple[Box, ...]] = None
    captions: Optional[tuple[str, ...]] = None
    stimulus_id: Optional[str] = None

    def __post_init__(self):
        v = np.array(self.voxels, dtype=np.float32 if np.asarray(self.voxels).dtype != np.float64 else np.float64)
        v = v.reshape(-1)
        v.setflags(write=False)
        object.__setattr__(self, "voxels", v)
        if self.boxes is not None:
            object.__setattr__(
                self,
                "boxes",
                tuple((str(b[0]), float(b[1]), float(b[2]), float(b[3]), float(b[4])) for b in self.boxes),
            )
        if self.captions is not None:
            object.__setattr__(self, "captions", tuple(str(c) for c in self.captions))

    def __eq__(self, other):
        if not isinstance(other, BrainSample):
            return NotImplemented
        return (
            self.subject_id == other.subject_id
            and self.voxels.dtype == other.voxels.dtype
            and np.array_equal(self.voxels, other.voxels)
            and self.target == other.target
            and self.boxes == other.boxes
            and self.captions == other.captions
            and self.stimulus_id == other.stimulus_id
        )

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "stimulus_id": self.stimulus_id,
            "dtype": str(self.voxels.dtype),
            "voxels": self.voxels.tolist(),
            "target": None if self.target is None else self.target.to_dict(),
            "boxes": None if self.boxes is None else [list(b) for b in self.boxes],
            "captions": None if self.captions is None else list(self.captions),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BrainSample":
        return cls(
            subject_id=d["subject_id"],
            voxels=np.asarray(d["voxels"], dtype=d.get("dtype", "float32")),
            target=None if d.get("target") is None else FeatureGrid.from_dict(d["target"]),
            boxes=None if d.get("boxes") is None else tuple(tuple(b) for b in d["boxes"]),
            captions=None if d.get("captions") is None else tuple(d["captions"]),
            stimulus_id=d.get("stimulus_id"),
        )


# --------------------------------------------------------------------------
# Configs
# --------------------------------------------------------------------------

class _ConfigMixin:
    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
        return cls(**d)

    def override(self, **kwargs):
        return replace(self, **{k: v for k, v in kwargs.items() if v is not None})


@dataclass(frozen=True)
class EncoderConfig(_ConfigMixin):
    token_count: int = 256          # L
    token_dim: int = 1024           # D
    subject_token_count: int = 5    # M
    latent_query_count: int = 256   # T_out
    encoder_depth: int = 4
    attention_heads: int = 8
    output_channels: int = 1024     # D_t
    ff_mult: int = 4

    def __post_init__(self):
        for f in fields(self):
            if int(getattr(self, f.name)) < 0:
                raise ValueError(f"{f.name} must be non-negative")
        for name in ("token_count", "token_dim", "subject_token_count", "latent_query_count",
                     "attention_heads", "output_channels", "ff_mult"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.token_dim % self.attention_heads:
            raise ValueError("token_dim must be divisible by attention_heads")

    @property
    def grid_shape(self) -> tuple[int, int]:
        return (self.latent_query_count, self.output_channels)


LOSS_KINDS = ("mse_encoder", "nce_encoder")
SCHEDULES = ("one_cycle", "constant")


@dataclass(frozen=True)
class TrainConfig(_ConfigMixin):
    batch_size: int = 256
    theta: float = 0.5
    epochs: int = 240
    lr_max: float = 3e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.95
    seed: int = 0
    loss: str = "mse_encoder"
    schedule: str = "one_cycle"
    strategy: str = "ours"
    grad_clip: float = 1.0
    val_fraction: float = 0.02

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must lie in [0, 1], got {self.theta}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr_max < 0:
            raise ValueError("lr_max must be >= 0")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")


PRESET_DIR = Path(__file__).with_name("presets")


CONFIG_DIR_ENV = "BRAINALIGN_CONFIG_DIR"


def load_preset(name: str) -> dict:
    """Read a named preset or any JSON config path.

    Bare names are looked up in ``$BRAINALIGN_CONFIG_DIR`` first, then among
    the bundled presets (``desk``, ``full``).
    """
    path = Path(name)
    if not path.suffix:
        candidates = [PRESET_DIR / f"{name}.json"]
        if os.environ.get(CONFIG_DIR_ENV):
            candidates.insert(0, Path(os.environ[CONFIG_DIR_ENV]) / f"{name}.json")
        path = next((c for c in candidates if c.exists()), candidates[-1])
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"config {path} is not valid JSON: {exc}") from None


def configs_from_dict(d: dict) -> tuple[EncoderConfig, TrainConfig]:
    return EncoderConfig.from_dict(d.get("encoder", {})), TrainConfig.from_dict(d.get("train", {}))


# --------------------------------------------------------------------------
# Validation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Issue:
    kind: str          # unknown_subject | length_mismatch | bad_box | duplicate_subject | non_finite | target_shape
    index: int         # sample index, -1 for spec-level issues
    message: str


@dataclass
class ValidationReport:
    issues: list[Issue] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues

    def kinds(self) -> list[str]:
        return [i.kind for i in self.issues]

    def __len__(self):
        return len(self.issues)

    def __str__(self):
        if self.ok:
            return "dataset admissible"
        return "\n".join(f"[{i.kind}] #{i.index}: {i.message}" for i in self.issues)


def box_problem(box: Iterable[float]) -> Optional[str]:
    x1, y1, x2, y2 = (float(c) for c in box)
    if not all(math.isfinite(c) for c in (x1, y1, x2, y2)):
        return "non-finite coordinate"
    if not all(0.0 <= c <= 1.0 for c in (x1, y1, x2, y2)):
        return "coordinate outside [0, 1]"
    if x1 >= x2 or y1 >= y2:
        return "degenerate box (x1>=x2 or y1>=y2)"
    return None


def validate_dataset(samples: list[BrainSample], specs: list[SubjectSpec]) -> ValidationReport:
    report = ValidationReport()
    dims: dict[str, int] = {}
    for spec in specs:
        if spec.subject_id in dims:
            report.issues.append(Issue("duplicate_subject", -1, f"subject {spec.subject_id!r} listed twice"))
        dims[spec.subject_id] = spec.voxel_dim

    target_shape = None
    for i, s in enumerate(samples):
        if s.subject_id not in dims:
            report.issues.append(Issue("unknown_subject", i, f"subject {s.subject_id!r} has no spec"))
        elif s.voxels.shape[0] != dims[s.subject_id]:
            report.issues.append(Issue(
                "length_mismatch", i,
                f"{s.voxels.shape[0]} voxels, spec {s.subject_id!r} expects {dims[s.subject_id]}"))
        if not np.all(np.isfinite(s.voxels)):
            report.issues.append(Issue("non_finite", i, "voxels contain NaN/inf"))
        if s.target is not None:
            if target_shape is None:
                target_shape = s.target.shape
            elif s.target.shape != target_shape:
                report.issues.append(Issue("target_shape", i, f"target {s.target.shape} != {target_shape}"))
        for box in s.boxes or ():
            problem = box_problem(box[1:])
            if problem:
                report.issues.append(Issue("bad_box", i, f"{box}: {problem}"))
    return report
