"""Synthetic multi-subject world with a known generative map.

Gallery grids live in a ``latent_dim``-dimensional subspace of the flattened
grid space: ``flat(g) = sqrt(n / d) * A z`` with ``A`` an (n x d) matrix with
orthonormal columns and ``z ~ N(0, I_d)``, so every grid entry has unit
variance.  Subject k observes ``G_k flat(g) + sigma_k * eps``; ``G_k`` has
orthonormal columns when ``voxel_dim >= n`` and orthonormal rows otherwise.
All stored arrays are float32 so worlds round-trip through the tensor
container exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import BrainSample, DataError, FeatureGrid, SubjectSpec
from .datahub import FORMAT_VERSION, BlobReader, BlobWriter, _locked, _read_manifest, _write_json
from .eval.retrieval import retrieval_forward

WORLD_MANIFEST = "world.json"


@dataclass
class SyntheticWorld:
    latent_dim: int
    grid_shape: tuple[int, int]
    specs: list[SubjectSpec]
    maps: list[np.ndarray]      # G_k, (voxel_dim_k, n)
    sigmas: list[float]
    mixing: np.ndarray          # A, (n, latent_dim)
    gallery: np.ndarray         # (gallery_size, T_out, D_t)

    @property
    def flat_dim(self) -> int:
        return self.grid_shape[0] * self.grid_shape[1]

    def subject_index(self, subject_id: str) -> int:
        return [s.subject_id for s in self.specs].index(subject_id)

    def stimulus_id(self, item: int) -> str:
        return f"img{item:05d}"

    def observe(self, k: int, items: np.ndarray, rng: Optional[np.random.Generator]) -> np.ndarray:
        """Voxel responses of subject k to gallery items: (len(items), voxel_dim)."""
        flat = self.gallery[items].reshape(len(items), -1).astype(np.float64)
        clean = flat @ self.maps[k].T.astype(np.float64)
        if self.sigmas[k] > 0:
            clean = clean + self.sigmas[k] * rng.standard_normal(clean.shape)
        return clean.astype(np.float32)


def _orthonormal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    if rows >= cols:
        q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
        return q * np.sign(np.diag(r))
    q, r = np.linalg.qr(rng.standard_normal((cols, rows)))
    return (q * np.sign(np.diag(r))).T


def make_world(
    K: int,
    voxel_dims: Sequence[int],
    grid_shape: tuple[int, int],
    gallery_size: int,
    sigma,
    rng: np.random.Generator,
    latent_dim: int = 64,
    subject_ids: Optional[Sequence[str]] = None,
) -> SyntheticWorld:
    if K < 1 or len(voxel_dims) != K:
        raise ValueError(f"need K >= 1 and exactly K voxel dims, got K={K}, dims={list(voxel_dims)}")
    if any(int(d) < 1 for d in voxel_dims) or min(grid_shape) < 1 or gallery_size < 1 or latent_dim < 1:
        raise ValueError("all dimensions must be positive")
    sigmas = [float(sigma)] * K if np.isscalar(sigma) else [float(s) for s in sigma]
    if len(sigmas) != K or any(s < 0 for s in sigmas):
        raise ValueError("sigma must be a non-negative scalar or one value per subject")
    n = grid_shape[0] * grid_shape[1]
    d = min(latent_dim, n)
    ids = list(subject_ids) if subject_ids is not None else [f"S{k + 1}" for k in range(K)]
    specs = [SubjectSpec(sid, int(v)) for sid, v in zip(ids, voxel_dims)]

    mixing = _orthonormal(rng, n, d).astype(np.float32)
    z = rng.standard_normal((gallery_size, d))
    gallery = (np.sqrt(n / d) * z @ mixing.T.astype(np.float64)).astype(np.float32)
    maps = [_orthonormal(rng, int(v), n).astype(np.float32) for v in voxel_dims]
    return SyntheticWorld(d, tuple(grid_shape), specs, maps, sigmas, mixing,
                          gallery.reshape(gallery_size, *grid_shape))


def _samples(world: SyntheticWorld, k: int, items: np.ndarray, rng) -> list[BrainSample]:
    vox = world.observe(k, items, rng)
    sid = world.specs[k].subject_id
    return [BrainSample(sid, vox[j], FeatureGrid(world.gallery[i]), stimulus_id=world.stimulus_id(int(i)))
            for j, i in enumerate(items)]


def sample_dataset(world: SyntheticWorld, n_per_subject: int, rng: np.random.Generator,
                   items: Optional[Sequence[int]] = None) -> list[BrainSample]:
    """``n_per_subject`` samples per subject, gallery items drawn uniformly with replacement."""
    pool = np.arange(len(world.gallery)) if items is None else np.asarray(items)
    out = []
    for k in range(len(world.specs)):
        if n_per_subject == 0:
            continue
        out.extend(_samples(world, k, pool[rng.integers(0, pool.size, size=n_per_subject)], rng))
    return out


def paired_dataset(world: SyntheticWorld, items: Sequence[int], rng: np.random.Generator,
                   subjects: Optional[Sequence[str]] = None) -> list[BrainSample]:
    """Every listed gallery item once per subject (shared-stimulus design)."""
    items = np.asarray(items, dtype=np.int64)
    keep = subjects if subjects is not None else [s.subject_id for s in world.specs]
    out = []
    for k, spec in enumerate(world.specs):
        if spec.subject_id in keep:
            out.extend(_samples(world, k, items, rng))
    return out


def split_items(world: SyntheticWorld, n_test: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Seeded (train_items, test_items) partition of the gallery."""
    perm = rng.permutation(len(world.gallery))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def pinv_decoder(world: SyntheticWorld, k: int) -> np.ndarray:
    """(n, voxel_dim) map recovering the flattened grid from subject k's voxels.

    Pseudo-inverse of the effective map from latent code to voxels, lifted
    back to grid space; exact on noiseless data in both the expanding and
    the compressing regime.
    """
    A = world.mixing.astype(np.float64) * np.sqrt(world.flat_dim / world.latent_dim)
    M = world.maps[k].astype(np.float64) @ A
    return A @ np.linalg.pinv(M)


def oracle_ceiling(world: SyntheticWorld, pool: int, rng: np.random.Generator,
                   items: Optional[Sequence[int]] = None, trials: int = 30,
                   per_subject: bool = False):
    """Forward retrieval accuracy of the pseudo-inverse decoder on fresh noisy samples.

    Averages over subjects unless ``per_subject``.
    """
    items = np.arange(len(world.gallery)) if items is None else np.asarray(items)
    if pool > items.size:
        raise ValueError(f"pool {pool} larger than the {items.size} evaluation items")
    truth = world.gallery[items].reshape(items.size, -1).astype(np.float64)
    accs = {}
    for k, spec in enumerate(world.specs):
        vox = world.observe(k, items, rng).astype(np.float64)
        decoded = vox @ pinv_decoder(world, k).T
        accs[spec.subject_id] = retrieval_forward(decoded, truth, pool, trials, rng)
    return accs if per_subject else float(np.mean(list(accs.values())))


def save_world(world: SyntheticWorld, directory) -> Path:
    directory = Path(directory)
    writer = BlobWriter("world.bin")
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "world",
        "latent_dim": world.latent_dim,
        "grid_shape": list(world.grid_shape),
        "subjects": [s.to_dict() for s in world.specs],
        "sigmas": world.sigmas,
        "mixing": writer.add(world.mixing),
        "gallery": writer.add(world.gallery),
        "maps": [writer.add(m) for m in world.maps],
    }
    with _locked(directory):
        writer.write(directory)
        _write_json(directory / WORLD_MANIFEST, manifest)
    return directory


def load_world(directory) -> SyntheticWorld:
    directory = Path(directory)
    m = _read_manifest(directory / WORLD_MANIFEST)
    if m.get("kind") != "world":
        raise DataError(f"{directory} does not hold a synthetic world")
    r = BlobReader(directory)
    return SyntheticWorld(
        latent_dim=int(m["latent_dim"]),
        grid_shape=tuple(m["grid_shape"]),
        specs=[SubjectSpec.from_dict(s) for s in m["subjects"]],
        maps=[r.read(ref) for ref in m["maps"]],
        sigmas=[float(s) for s in m["sigmas"]],
        mixing=r.read(m["mixing"]),
        gallery=r.read(m["gallery"]),
    )
