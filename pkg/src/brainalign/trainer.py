"""Alignment training, contrastive retrieval loss, LR schedule and subject adaptation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import (BrainSample, DataError, NumericError, SubjectSpec, TrainConfig, child_seed,
                   new_rng, validate_dataset)
from .datahub import Checkpoint, config_hash
from .encoder import BrainEncoder
from .sampler import batches_per_epoch, compose_batch

log = logging.getLogger(__name__)

ADAPT_MODES = ("frozen", "finetuned")
DEFAULT_RATIOS = (0.05, 0.1, 0.2, 0.3, 0.5, 0.8, 1.0)


@dataclass(frozen=True)
class LossConfig:
    kind: str = "mse_encoder"
    temperature: float = 0.07
    mixco_enabled: bool = False
    mixco_alpha: float = 0.2

    def __post_init__(self):
        if self.kind not in ("mse_encoder", "nce_encoder"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.mixco_alpha <= 0:
            raise ValueError("mixco_alpha must be > 0")


@dataclass(frozen=True)
class AdaptationConfig:
    mode: str = "finetuned"
    data_ratio: float = 1.0
    base_checkpoint: Optional[str] = None

    def __post_init__(self):
        if self.mode not in ADAPT_MODES:
            raise ValueError(f"mode must be one of {ADAPT_MODES}")
        if not 0.0 < self.data_ratio <= 1.0:
            raise ValueError("data_ratio must lie in (0, 1]")


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def final_loss(self, window: int = 1) -> float:
        if not self.steps:
            return float("nan")
        return float(np.mean([r["loss"] for r in self.steps[-window:]]))

    def records(self) -> Iterable[dict]:
        for r in self.steps:
            yield {"type": "step", **r}
        for r in self.epochs:
            yield {"type": "epoch", **r}

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    def __eq__(self, other):
        return isinstance(other, TrainLog) and self.to_jsonl() == other.to_jsonl()


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def mse_loss(pred, target) -> torch.Tensor:
    """Mean over all elements of the squared difference."""
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


def infonce_loss(
    brain,
    image,
    temperature: float = 0.07,
    rng: Optional[np.random.Generator] = None,
    mixco: bool = False,
    alpha: float = 0.2,
) -> torch.Tensor:
    """Symmetric InfoNCE between paired rows of ``brain`` and ``image``.

    Rows are L2-normalised and compared with ``brain @ image.T / temperature``;
    the loss is the cross-entropy against the diagonal, averaged over the
    brain->image and image->brain directions.  With ``mixco`` every brain row
    is mixed with a shuffled partner, ``lam * b_i + (1 - lam) * b_perm(i)``
    with ``lam ~ Beta(alpha, alpha)``, and its target row puts ``lam`` on i
    and ``1 - lam`` on perm(i).
    """
    brain = torch.as_tensor(brain)
    image = torch.as_tensor(image, dtype=brain.dtype)
    brain = brain.reshape(brain.shape[0], -1)
    image = image.reshape(image.shape[0], -1)
    n = brain.shape[0]
    if n < 2:
        raise ValueError("InfoNCE needs at least two pairs")
    if brain.shape != image.shape:
        raise ValueError(f"shape mismatch: {tuple(brain.shape)} vs {tuple(image.shape)}")
    if (brain.norm(dim=1) == 0).any() or (image.norm(dim=1) == 0).any():
        raise ValueError("zero-norm row")

    targets = torch.eye(n, dtype=brain.dtype)
    if mixco:
        if rng is None:
            raise ValueError("mixco needs an rng")
        lam = torch.as_tensor(rng.beta(alpha, alpha, size=n), dtype=brain.dtype)
        perm = torch.as_tensor(rng.permutation(n))
        brain = lam[:, None] * brain + (1 - lam[:, None]) * brain[perm]
        targets = torch.diag(lam)
        targets[torch.arange(n), perm] += 1 - lam

    b = F.normalize(brain, dim=1)
    v = F.normalize(image, dim=1)
    logits = b @ v.T / temperature
    fwd = -(targets * logits.log_softmax(dim=1)).sum(dim=1).mean()
    bwd = -(targets.T * logits.T.log_softmax(dim=1)).sum(dim=1).mean()
    return (fwd + bwd) / 2


# --------------------------------------------------------------------------
# schedule
# --------------------------------------------------------------------------

WARMUP_SHARE = 0.3
START_DIV = 25.0
END_DIV = 1e4


def one_cycle_lr(step: int, total_steps: int, lr_max: float) -> float:
    """Cosine warm-up from lr_max/25 to lr_max over the first 30% of steps,
    then cosine decay to lr_max/1e4 at the final step."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    start, end = lr_max / START_DIV, lr_max / END_DIV
    peak = WARMUP_SHARE * total_steps
    if step <= peak:
        frac = step / peak if peak > 0 else 1.0
        return start + (lr_max - start) * (1 - math.cos(math.pi * frac)) / 2
    span = (total_steps - 1) - peak
    frac = (step - peak) / span if span > 0 else 1.0
    return end + (lr_max - end) * (1 + math.cos(math.pi * frac)) / 2


def learning_rate(cfg: TrainConfig, step: int, total_steps: int) -> float:
    if cfg.schedule == "constant":
        return cfg.lr_max
    return one_cycle_lr(step, total_steps, cfg.lr_max)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class _SubjectData:
    x: torch.Tensor
    y: torch.Tensor


def _group(samples: Sequence[BrainSample], order: Sequence[str]) -> dict[str, _SubjectData]:
    by: dict[str, list[BrainSample]] = {sid: [] for sid in order}
    for s in samples:
        by[s.subject_id].append(s)
    out = {}
    for sid, items in by.items():
        if not items:
            continue
        x = torch.from_numpy(np.stack([s.voxels for s in items]).astype(np.float32))
        y = torch.from_numpy(np.stack([s.target.values for s in items]).astype(np.float32))
        out[sid] = _SubjectData(x, y)
    return out


def split_validation(samples: Sequence[BrainSample], fraction: float, rng) -> tuple[list, list]:
    """Seeded per-subject hold-out of ``floor(fraction * n)`` samples."""
    by: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        by.setdefault(s.subject_id, []).append(i)
    val_idx = set()
    for sid in by:
        idx = by[sid]
        k = int(math.floor(fraction * len(idx)))
        if k and len(idx) - k >= 1:
            val_idx.update(np.asarray(idx)[rng.permutation(len(idx))[:k]].tolist())
    train = [s for i, s in enumerate(samples) if i not in val_idx]
    val = [s for i, s in enumerate(samples) if i in val_idx]
    return train, val


def _encode_groups(state: BrainEncoder, parts: list[tuple[str, torch.Tensor]]) -> torch.Tensor:
    tokens = torch.cat([state.tokenize(sid, x) for sid, x in parts])
    return state.encode(tokens)


def _optimizer_arrays(opt: torch.optim.Optimizer, names: dict[int, str]) -> dict[str, np.ndarray]:
    out = {}
    for p, st in opt.state.items():
        name = names[id(p)]
        for key, val in st.items():
            out[f"{name}.{key}"] = np.asarray(torch.as_tensor(val).detach().cpu().numpy(), dtype=np.float32)
    return out


def train_align(
    state: BrainEncoder,
    dataset: Sequence[BrainSample],
    train_cfg: TrainConfig,
    loss_cfg: Optional[LossConfig] = None,
    sampler_strategy: Optional[str] = None,
    trainable: Optional[Callable[[str], bool]] = None,
    progress: Optional[Callable[[dict], None]] = None,
) -> tuple[Checkpoint, TrainLog]:
    """Train ``state`` in place to map voxels onto their target grids.

    Batches are composed by the cross-subject sampler; the optimizer is AdamW
    with the configured betas and weight decay, gradients are clipped to
    ``grad_clip`` global norm and the step size follows the configured
    schedule.  ``trainable(name)`` restricts which parameters are updated
    (the others are excluded from the optimizer entirely, so they stay
    bitwise unchanged).
    """
    loss_cfg = loss_cfg or LossConfig(kind=train_cfg.loss)
    strategy = sampler_strategy or train_cfg.strategy
    samples = list(dataset)
    if any(s.target is None for s in samples):
        raise DataError("every training sample needs a target grid")
    report = validate_dataset(samples, list(state.specs.values()))
    if not report.ok:
        raise DataError(f"training data failed validation:\n{report}")
    grid = state.config.grid_shape
    bad = [i for i, s in enumerate(samples) if s.target.shape != grid]
    if bad:
        raise DataError(f"sample {bad[0]} target shape {samples[bad[0]].target.shape} != encoder grid {grid}")

    rng = new_rng(train_cfg.seed)
    train, val = split_validation(samples, train_cfg.val_fraction, new_rng(child_seed(rng)))
    order = [sid for sid in state.specs if any(s.subject_id == sid for s in train)]
    data = _group(train, order)
    val_data = _group(val, order)
    sizes = {sid: data[sid].x.shape[0] for sid in order}

    trainable = trainable or (lambda name: True)
    names = {}
    params = []
    for name, p in state.named_parameters():
        keep = trainable(name)
        p.requires_grad_(keep)
        if keep:
            params.append(p)
            names[id(p)] = name

    log_out = TrainLog()
    steps_per_epoch = batches_per_epoch(sizes, train_cfg.batch_size) if sizes else 0
    total = steps_per_epoch * train_cfg.epochs
    opt = torch.optim.AdamW(params, lr=train_cfg.lr_max, betas=(train_cfg.beta1, train_cfg.beta2),
                            weight_decay=train_cfg.weight_decay) if params else None
    loss_rng = new_rng(child_seed(rng))
    step = 0
    state.train()
    for epoch in range(train_cfg.epochs):
        for _ in range(steps_per_epoch):
            plan = compose_batch(sizes, train_cfg.batch_size, train_cfg.theta, strategy, rng)
            parts, targets = [], []
            for code, sid in enumerate(plan.subject_ids):
                rows = torch.from_numpy(plan.indices[plan.subjects == code])
                if rows.numel():
                    parts.append((sid, data[sid].x[rows]))
                    targets.append(data[sid].y[rows])
            pred = _encode_groups(state, parts)
            target = torch.cat(targets)
            if loss_cfg.kind == "mse_encoder":
                loss = mse_loss(pred, target)
            else:
                loss = infonce_loss(pred, target, loss_cfg.temperature, loss_rng,
                                    loss_cfg.mixco_enabled, loss_cfg.mixco_alpha)
            if not torch.isfinite(loss):
                raise NumericError(
                    f"non-finite loss {loss.item()} at step {step} (epoch {epoch}, dominant {plan.dominant_subject})")
            lr = learning_rate(train_cfg, step, total)
            if opt is not None:
                for group in opt.param_groups:
                    group["lr"] = lr
                opt.zero_grad(set_to_none=True)
                loss.backward()
                if train_cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(params, train_cfg.grad_clip)
                opt.step()
            rec = {"step": step, "epoch": epoch, "loss": loss.item(), "lr": lr, "dominant": plan.dominant_subject}
            log_out.steps.append(rec)
            step += 1
        ep = {"epoch": epoch, "train_loss": float(np.mean([r["loss"] for r in log_out.steps[-steps_per_epoch:]]))}
        if val_data:
            ep["val_mse"] = validation_mse(state, val_data)
        log_out.epochs.append(ep)
        if progress:
            progress(ep)
    state.eval()
    for p in state.parameters():
        p.requires_grad_(True)

    provenance = {
        "seed": train_cfg.seed,
        "config_hash": config_hash({"encoder": state.config.to_dict(), "train": train_cfg.to_dict(),
                                    "loss": asdict(loss_cfg), "strategy": strategy}),
        "subject_ids": list(state.specs),
        "train_config": train_cfg.to_dict(),
        "loss_config": asdict(loss_cfg),
        "strategy": strategy,
        "steps": step,
    }
    opt_state = _optimizer_arrays(opt, names) if opt is not None else {}
    return Checkpoint.from_encoder(state, opt_state, provenance), log_out


@torch.no_grad()
def validation_mse(state: BrainEncoder, groups: dict[str, _SubjectData]) -> float:
    total, count = 0.0, 0
    for sid, d in groups.items():
        pred = state(sid, d.x)
        total += float(((pred - d.y) ** 2).sum())
        count += d.y.numel()
    return total / count if count else float("nan")


@torch.no_grad()
def predict(state: BrainEncoder, samples: Sequence[BrainSample], chunk: int = 256) -> np.ndarray:
    """Encoder output for every sample, in input order: (N, T_out, D_t)."""
    out = np.zeros((len(samples), *state.config.grid_shape), dtype=np.float32)
    by: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        by.setdefault(s.subject_id, []).append(i)
    for sid, idx in by.items():
        x = torch.from_numpy(np.stack([samples[i].voxels for i in idx]).astype(np.float32))
        for start in range(0, len(idx), chunk):
            out[idx[start:start + chunk]] = state(sid, x[start:start + chunk]).numpy()
    return out


def dataset_mse(state: BrainEncoder, samples: Sequence[BrainSample]) -> float:
    pred = predict(state, samples)
    target = np.stack([s.target.values for s in samples])
    return float(np.mean((pred.astype(np.float64) - target) ** 2))


# --------------------------------------------------------------------------
# adaptation
# --------------------------------------------------------------------------

def subsample(samples: Sequence[BrainSample], ratio: float, rng) -> list[BrainSample]:
    n = len(samples)
    k = max(1, int(round(ratio * n))) if n else 0
    keep = np.sort(rng.permutation(n)[:k])
    return [samples[i] for i in keep]


def adapt_subject(
    base: Checkpoint,
    new_spec: SubjectSpec,
    new_data: Sequence[BrainSample],
    cfg: AdaptationConfig,
    train_cfg: TrainConfig,
    loss_cfg: Optional[LossConfig] = None,
) -> tuple[Checkpoint, TrainLog]:
    """Register a new subject on a trained encoder and fit it on a fraction of its data.

    The new tokenizer always starts from a fresh init.  ``frozen`` trains only
    that tokenizer; ``finetuned`` also updates the shared perceiver.  The
    tokenizers of previously registered subjects see no data here and are
    left untouched in both modes.
    """
    if new_spec.subject_id in {s.subject_id for s in base.specs}:
        raise ValueError(f"subject {new_spec.subject_id!r} is already registered in the base checkpoint")
    state = base.encoder()
    rng = new_rng(train_cfg.seed)
    state.add_subject(new_spec, new_rng(child_seed(rng)))
    subset = subsample([s for s in new_data if s.subject_id == new_spec.subject_id],
                       cfg.data_ratio, new_rng(child_seed(rng)))
    prefix = f"tokenizers.{new_spec.subject_id}."
    if cfg.mode == "frozen":
        def trainable(name):
            return name.startswith(prefix)
    else:
        def trainable(name):
            return name.startswith(prefix) or name.startswith("perceiver.")
    ckpt, log_out = train_align(state, subset, train_cfg, loss_cfg, trainable=trainable)
    ckpt.provenance.update({
        "adaptation": {"mode": cfg.mode, "data_ratio": cfg.data_ratio, "subject_id": new_spec.subject_id,
                       "n_samples": len(subset), "base_checkpoint": cfg.base_checkpoint,
                       "base_config_hash": base.provenance.get("config_hash")},
    })
    return ckpt, log_out
