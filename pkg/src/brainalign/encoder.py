"""Subject tokenizers and the shared perceiver-style encoder.

Each subject owns a dense projection ``voxels -> L x D`` plus ``M`` learnable
subject tokens that are prepended to the projected tokens.  A shared stack
then reads the ``(M + L) x D`` sequence through one cross-attention block
(learned latent queries attend to the tokens), refines the latents with
``encoder_depth`` self-attention blocks and maps each latent to ``D_t``
output channels.  All blocks are pre-norm residual.
"""

from __future__ import annotations

import copy
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import EncoderConfig, FeatureGrid, SubjectSpec, new_rng

INIT_STD = 0.02


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> torch.Tensor:
    """Truncated normal at +-2 std, drawn from a numpy stream so init is platform-stable."""
    n = int(np.prod(shape))
    out = rng.standard_normal(n)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return torch.from_numpy((out * std).astype(np.float32).reshape(shape))


class SubjectTokenizer(nn.Module):
    def __init__(self, voxel_dim: int, cfg: EncoderConfig):
        super().__init__()
        self.voxel_dim = voxel_dim
        self.L, self.D = cfg.token_count, cfg.token_dim
        self.proj = nn.Linear(voxel_dim, self.L * self.D)
        self.subject_tokens = nn.Parameter(torch.zeros(cfg.subject_token_count, self.D))

    def forward(self, voxels: torch.Tensor) -> torch.Tensor:
        """(N, voxel_dim) -> (N, M + L, D)"""
        x = self.proj(voxels).view(voxels.shape[0], self.L, self.D)
        s = self.subject_tokens.unsqueeze(0).expand(voxels.shape[0], -1, -1)
        return torch.cat([s, x], dim=1)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(dim, dim, bias=False)
        self.to_v = nn.Linear(dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        h = self.heads
        q = self.to_q(x).view(b, n, h, d // h).transpose(1, 2)
        k = self.to_k(context).view(b, context.shape[1], h, d // h).transpose(1, 2)
        v = self.to_v(context).view(b, context.shape[1], h, d // h).transpose(1, 2)
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.to_out(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * mult)
        self.fc2 = nn.Linear(dim * mult, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class CrossBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mult: int):
        super().__init__()
        self.norm_latents = nn.LayerNorm(dim)
        self.norm_tokens = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, mult)

    def forward(self, latents, tokens):
        latents = latents + self.attn(self.norm_latents(latents), self.norm_tokens(tokens))
        return latents + self.ff(self.norm_ff(latents))


class SelfBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mult: int):
        super().__init__()
        self.norm_attn = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, mult)

    def forward(self, x):
        y = self.norm_attn(x)
        x = x + self.attn(y, y)
        return x + self.ff(self.norm_ff(x))


class PerceiverEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        D = cfg.token_dim
        self.latents = nn.Parameter(torch.zeros(cfg.latent_query_count, D))
        self.cross = CrossBlock(D, cfg.attention_heads, cfg.ff_mult)
        self.layers = nn.ModuleList(
            SelfBlock(D, cfg.attention_heads, cfg.ff_mult) for _ in range(cfg.encoder_depth))
        self.norm_out = nn.LayerNorm(D)
        self.head = nn.Linear(D, cfg.output_channels)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """(N, T_in, D) -> (N, T_out, D_t)"""
        x = self.latents.unsqueeze(0).expand(tokens.shape[0], -1, -1)
        x = self.cross(x, tokens)
        for layer in self.layers:
            x = layer(x)
        return self.head(self.norm_out(x))


class BrainEncoder(nn.Module):
    """Encoder state: config, one tokenizer per registered subject, one shared perceiver."""

    def __init__(self, cfg: EncoderConfig, specs: Sequence[SubjectSpec]):
        super().__init__()
        if not specs:
            raise ValueError("at least one SubjectSpec is required")
        ids = [s.subject_id for s in specs]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate subject_id in {ids}")
        self.config = cfg
        self.specs = {s.subject_id: s for s in specs}
        self.tokenizers = nn.ModuleDict({s.subject_id: SubjectTokenizer(s.voxel_dim, cfg) for s in specs})
        self.perceiver = PerceiverEncoder(cfg)

    @property
    def subject_ids(self) -> list[str]:
        return list(self.specs)

    def add_subject(self, spec: SubjectSpec, rng: np.random.Generator) -> None:
        if spec.subject_id in self.specs:
            raise ValueError(f"subject {spec.subject_id!r} already registered")
        tok = SubjectTokenizer(spec.voxel_dim, self.config).to(self._dtype())
        _init_module(tok, rng)
        self.specs[spec.subject_id] = spec
        self.tokenizers[spec.subject_id] = tok

    def _dtype(self):
        return self.perceiver.latents.dtype

    def _check(self, subject_id: str, voxels: torch.Tensor) -> None:
        if subject_id not in self.specs:
            raise KeyError(f"unknown subject {subject_id!r}")
        if voxels.shape[-1] != self.specs[subject_id].voxel_dim:
            raise ValueError(
                f"subject {subject_id!r} expects {self.specs[subject_id].voxel_dim} voxels, got {voxels.shape[-1]}")

    def tokenize(self, subject_id: str, voxels: torch.Tensor) -> torch.Tensor:
        self._check(subject_id, voxels)
        return self.tokenizers[subject_id](voxels)

    def encode(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-1] != self.config.token_dim:
            raise ValueError(f"token width {tokens.shape[-1]} != {self.config.token_dim}")
        return self.perceiver(tokens)

    def forward(self, subject_id: str, voxels: torch.Tensor) -> torch.Tensor:
        return self.encode(self.tokenize(subject_id, voxels))

    def forward_mixed(self, subject_ids: Sequence[str], voxels: Sequence[torch.Tensor]) -> torch.Tensor:
        """Encode a batch whose rows may come from different subjects.

        Rows are grouped per subject for tokenization, then run through the
        perceiver in their original order.
        """
        tokens = [None] * len(subject_ids)
        groups: dict[str, list[int]] = {}
        for i, sid in enumerate(subject_ids):
            groups.setdefault(sid, []).append(i)
        for sid, idx in groups.items():
            x = torch.stack([voxels[i] for i in idx])
            t = self.tokenize(sid, x)
            for j, i in enumerate(idx):
                tokens[i] = t[j]
        return self.encode(torch.stack(tokens))


def _init_module(module: nn.Module, rng: np.random.Generator) -> None:
    # named_parameters order is deterministic, so is the draw order
    with torch.no_grad():
        for name, p in module.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if isinstance(_owner(module, name), nn.LayerNorm):
                p.fill_(1.0 if leaf == "weight" else 0.0)
            elif leaf == "bias":
                p.zero_()
            else:
                p.copy_(trunc_normal(rng, tuple(p.shape)).to(p.dtype))


def _owner(root: nn.Module, param_name: str) -> nn.Module:
    mod = root
    for part in param_name.split(".")[:-1]:
        mod = getattr(mod, part)
    return mod


# --------------------------------------------------------------------------
# functional surface
# --------------------------------------------------------------------------

def init_encoder(config: EncoderConfig, specs: Sequence[SubjectSpec], rng: np.random.Generator) -> BrainEncoder:
    state = BrainEncoder(config, specs)
    _init_module(state, rng)
    return state


def _as_tensor(x, state: BrainEncoder) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(state._dtype())
    return torch.as_tensor(np.array(x), dtype=state._dtype())


@torch.no_grad()
def tokenize(state: BrainEncoder, subject_id: str, voxels) -> torch.Tensor:
    v = _as_tensor(voxels, state)
    return state.tokenize(subject_id, v.unsqueeze(0))[0]


@torch.no_grad()
def encode(state: BrainEncoder, tokens) -> FeatureGrid:
    t = _as_tensor(tokens, state)
    return FeatureGrid(state.encode(t.unsqueeze(0))[0].numpy())


@torch.no_grad()
def forward(state: BrainEncoder, subject_id: str, voxels) -> FeatureGrid:
    v = _as_tensor(voxels, state)
    return FeatureGrid(state(subject_id, v.unsqueeze(0))[0].numpy())


@torch.no_grad()
def forward_batch(state: BrainEncoder, subject_id: str, voxels, chunk: int = 256) -> np.ndarray:
    """Encode an (N, voxel_dim) matrix for one subject; returns (N, T_out, D_t)."""
    v = _as_tensor(voxels, state)
    outs = [state(subject_id, v[i:i + chunk]) for i in range(0, v.shape[0], chunk)]
    if not outs:
        return np.zeros((0, *state.config.grid_shape), dtype=np.float32)
    return torch.cat(outs).numpy()


def count_parameters(state: nn.Module) -> int:
    return sum(p.numel() for p in state.parameters())


def perceiver_layer_parameters(state: BrainEncoder) -> int:
    return sum(p.numel() for p in state.perceiver.layers.parameters())


def gradient_check(
    state: BrainEncoder,
    sample,
    eps: float = 1e-5,
    n_checks: int = 64,
    seed: int = 0,
    loss_scale: float = 1.0,
    frozen: Iterable[str] = (),
) -> float:
    """Max relative error between autograd and central differences.

    Runs on a float64 copy of ``state``.  ``n_checks`` scalar coordinates are
    drawn uniformly from the parameters that take part in this sample's
    forward pass (the sample's tokenizer and the perceiver).  Names in
    ``frozen`` have ``requires_grad`` turned off; their analytic gradient is
    then taken as zero and compared against the numerical one.
    """
    from .trainer import mse_loss

    if sample.target is None:
        raise ValueError("gradient_check needs a sample with a target grid")
    model = copy.deepcopy(state).double()
    frozen = set(frozen)
    for name, p in model.named_parameters():
        p.requires_grad_(name not in frozen)
    x = torch.as_tensor(np.array(sample.voxels), dtype=torch.float64).unsqueeze(0)
    y = torch.as_tensor(np.array(sample.target.values), dtype=torch.float64).unsqueeze(0)

    def loss_fn():
        return loss_scale * mse_loss(model(sample.subject_id, x), y)

    model.zero_grad()
    loss_fn().backward()

    prefix = f"tokenizers.{sample.subject_id}."
    params = [(n, p) for n, p in model.named_parameters() if n.startswith(prefix) or n.startswith("perceiver.")]
    sizes = np.array([p.numel() for _, p in params])
    rng = new_rng(seed)
    flat_picks = rng.choice(int(sizes.sum()), size=min(n_checks, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    with torch.no_grad():
        for flat in np.sort(flat_picks):
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            name, p = params[k]
            idx = int(flat - offsets[k])
            view = p.data.view(-1)
            analytic = 0.0 if p.grad is None else float(p.grad.view(-1)[idx])
            orig = float(view[idx])
            view[idx] = orig + eps
            up = float(loss_fn())
            view[idx] = orig - eps
            down = float(loss_fn())
            view[idx] = orig
            numeric = (up - down) / (2 * eps)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
            worst = max(worst, rel)
    return worst


def analytic_gradients(state: BrainEncoder, sample, loss_scale: float = 1.0) -> dict[str, torch.Tensor]:
    """Autograd gradients of the sample's MSE loss, keyed by parameter name (float64)."""
    from .trainer import mse_loss

    model = copy.deepcopy(state).double()
    x = torch.as_tensor(np.array(sample.voxels), dtype=torch.float64).unsqueeze(0)
    y = torch.as_tensor(np.array(sample.target.values), dtype=torch.float64).unsqueeze(0)
    model.zero_grad()
    (loss_scale * mse_loss(model(sample.subject_id, x), y)).backward()
    return {n: (p.grad.clone() if p.grad is not None else torch.zeros_like(p)) for n, p in model.named_parameters()}


def parameter_arrays(state: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in state.state_dict().items()}


def load_parameter_arrays(state: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    sd = state.state_dict()
    missing = set(sd) - set(arrays)
    extra = set(arrays) - set(sd)
    if missing or extra:
        raise ValueError(f"parameter mismatch; missing={sorted(missing)} unexpected={sorted(extra)}")
    state.load_state_dict({k: torch.from_numpy(np.array(arrays[k], dtype=np.float32)) for k in sd})

