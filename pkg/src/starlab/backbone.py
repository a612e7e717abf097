"""Shared transformer for both generation paradigms.

One architecture serves two modes: "ar" applies a causal attention mask and
pins the diffusion-time input to 0; "nar" attends bidirectionally and is
conditioned on a scalar corruption time t in [0, 1]. The two modes have
identical parameter sets, so checkpoints are mode-portable.

Time conditioning wiring: t -> sinusoidal features (cond_dim) -> 2-layer MLP
-> a conditioning vector that is (a) added to the token+position embeddings
and (b) mapped by zero-initialized per-block linears to scale/shift
modulation of the affine-free layer norms. The additive path (a) keeps the
conditioning live from the first gradient step; the modulation path (b)
starts as the identity.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError

MODES = ("ar", "nar")


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int
    max_len: int
    d_model: int = 384
    n_blocks: int = 12
    n_heads: int = 6
    dropout: float = 0.1
    cond_dim: int = 4
    mode: str = "nar"
    tie_embeddings: bool = True  # GPT-2-style shared input/output embedding

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.cond_dim % 2:
            raise ConfigError("cond_dim must be even (sin/cos feature pairs)")
        if min(self.vocab_size, self.max_len, self.d_model, self.n_blocks, self.n_heads) < 1:
            raise ConfigError("vocab_size, max_len, d_model, n_blocks, n_heads must be >= 1")

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ActivationTrace:
    """Per-layer hidden states of one forward pass; layer 0 is the embedding output."""

    layers: list[torch.Tensor]

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def __getitem__(self, layer: int) -> torch.Tensor:
        return self.layers[layer]


def parameter_count(config: BackboneConfig) -> int:
    """Closed-form size of the parameter set (mode-independent)."""
    d, v, m, c, b = config.d_model, config.vocab_size, config.max_len, config.cond_dim, config.n_blocks
    emb = v * d + m * d
    time_mlp = (c * d + d) + (d * d + d)
    per_block = 16 * d * d + 13 * d  # mod(4d) + qkv(3d) + proj(d) + fc(4d) + out(d) with biases
    per_block += config.n_heads * (2 * m - 1)  # relative attention bias table
    head = 0 if config.tie_embeddings else v * d
    final = (2 * d * d + 2 * d) + head  # final modulation + bias-free head
    return emb + time_mlp + b * per_block + final


class _Block(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        d = config.d_model
        self.n_heads = config.n_heads
        self.max_len = config.max_len
        self.ln1 = nn.LayerNorm(d, elementwise_affine=False)
        self.ln2 = nn.LayerNorm(d, elementwise_affine=False)
        self.mod = nn.Linear(d, 4 * d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.fc = nn.Linear(d, 4 * d)
        self.out = nn.Linear(4 * d, d)
        # learned additive attention bias per head and relative offset
        self.rel_bias = nn.Parameter(torch.zeros(config.n_heads, 2 * config.max_len - 1))
        self.drop1 = nn.Dropout(config.dropout)
        self.drop2 = nn.Dropout(config.dropout)

    def forward(self, x: torch.Tensor, cond: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
        bsz, length, d = x.shape
        hd = d // self.n_heads
        shift1, scale1, shift2, scale2 = self.mod(F.silu(cond))[:, None, :].chunk(4, dim=-1)

        h = self.ln1(x) * (1 + scale1) + shift1
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        q = q.view(bsz, length, self.n_heads, hd).transpose(1, 2)
        k = k.view(bsz, length, self.n_heads, hd).transpose(1, 2)
        v = v.view(bsz, length, self.n_heads, hd).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        pos = torch.arange(length, device=x.device)
        offsets = pos[None, :] - pos[:, None] + self.max_len - 1
        att = att + self.rel_bias[:, offsets]
        if mask is not None:
            att = att + mask
        att = att.softmax(dim=-1)
        h = (att @ v).transpose(1, 2).reshape(bsz, length, d)
        x = x + self.drop1(self.proj(h))

        h = self.ln2(x) * (1 + scale2) + shift2
        x = x + self.drop2(self.out(F.gelu(self.fc(h))))
        return x


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.tok_emb = nn.Embedding(config.vocab_size, d)
        self.pos_emb = nn.Embedding(config.max_len, d)
        self.emb_drop = nn.Dropout(config.dropout)
        self.time_fc1 = nn.Linear(config.cond_dim, d)
        self.time_fc2 = nn.Linear(d, d)
        self.blocks = nn.ModuleList(_Block(config) for _ in range(config.n_blocks))
        self.ln_f = nn.LayerNorm(d, elementwise_affine=False)
        self.mod_f = nn.Linear(d, 2 * d)
        self.head = nn.Linear(d, config.vocab_size, bias=False)
        if config.tie_embeddings:
            self.head.weight = self.tok_emb.weight
        # patched by mode-isomorphism probes; everything else reads config.mode
        self.attention = "causal" if config.mode == "ar" else "full"

    @property
    def dtype(self) -> torch.dtype:
        return self.tok_emb.weight.dtype

    def _cond(self, t, batch: int) -> torch.Tensor:
        device = self.tok_emb.weight.device
        if not torch.is_tensor(t):
            t = torch.tensor(float(t))
        t = t.to(device=device, dtype=self.dtype)
        if t.dim() == 0:
            t = t.expand(batch)
        if t.shape != (batch,):
            raise ValueError(f"t must be scalar or shape ({batch},), got {tuple(t.shape)}")
        half = self.config.cond_dim // 2
        freqs = torch.logspace(0, 2, half, base=10.0, device=device, dtype=self.dtype)
        angle = t[:, None] * freqs[None, :]
        feats = torch.cat([torch.sin(angle), torch.cos(angle)], dim=-1)
        return self.time_fc2(F.silu(self.time_fc1(feats)))

    def forward(
        self,
        tokens: torch.Tensor,
        t: float | torch.Tensor = 0.0,
        capture: bool = False,
    ):
        """Per-position logits [batch, len, vocab]; optionally the hidden-state trace.

        AR mode ignores t (the conditioning input is pinned to 0).
        """
        squeeze = tokens.dim() == 1
        if squeeze:
            tokens = tokens[None, :]
        bsz, length = tokens.shape
        if length > self.config.max_len:
            raise ValueError(f"sequence length {length} exceeds max_len={self.config.max_len}")
        if self.config.mode == "ar":
            t = 0.0
        cond = self._cond(t, bsz)
        pos = torch.arange(length, device=tokens.device)
        x = self.emb_drop(self.tok_emb(tokens) + self.pos_emb(pos)[None, :, :] + cond[:, None, :])
        trace = [x] if capture else None

        if self.attention == "causal":
            mask = torch.full((length, length), float("-inf"), dtype=self.dtype, device=tokens.device)
            mask = torch.triu(mask, diagonal=1)
        else:
            mask = None
        for block in self.blocks:
            x = block(x, cond, mask)
            if capture:
                trace.append(x)

        shift, scale = self.mod_f(F.silu(cond))[:, None, :].chunk(2, dim=-1)
        logits = self.head(self.ln_f(x) * (1 + scale) + shift)
        if squeeze:
            logits = logits[0]
            if capture:
                trace = [h[0] for h in trace]
        if capture:
            return logits, ActivationTrace([h.detach() for h in trace])
        return logits


def init_backbone(config: BackboneConfig, seed: int) -> Backbone:
    """Deterministically initialized model, returned in eval mode (dropout off)."""
    import os

    model = Backbone(config)
    gen = torch.Generator().manual_seed(seed)
    d = config.d_model
    resid_std = 0.02 / math.sqrt(2 * config.n_blocks)
    mimetic = os.environ.get("STARLAB_MIMETIC", "0") == "1"
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "rel_bias" in name:
                if os.environ.get("STARLAB_RELBIAS_INIT", "zeros") == "alibi":
                    offsets = torch.arange(2 * config.max_len - 1) - (config.max_len - 1)
                    slopes = torch.tensor([2.0 ** -(i + 1) for i in range(config.n_heads)])
                    p.copy_(-slopes[:, None] * offsets.abs()[None, :].float())
                else:
                    p.zero_()
            elif ".mod." in name or "mod_f" in name or name.endswith(".bias"):
                p.zero_()
            elif name.endswith("tok_emb.weight") and mimetic and config.vocab_size <= d:
                q = torch.empty(d, d)
                torch.nn.init.orthogonal_(q, generator=gen)
                p.copy_(q[: config.vocab_size, :])
            elif name.endswith("qkv.weight") and mimetic:
                shared = torch.empty(d, d).normal_(0.0, 0.1, generator=gen)
                p[:d, :] = shared
                p[d : 2 * d, :] = shared
                p[2 * d :, :].normal_(0.0, 0.02, generator=gen)
            elif name.endswith("qkv.weight") and os.environ.get("STARLAB_QKV_INIT") == "xavier":
                p.normal_(0.0, 1.0 / math.sqrt(d), generator=gen)
            elif name.endswith("proj.weight") or name.endswith("out.weight"):
                p.normal_(0.0, resid_std, generator=gen)
            else:
                p.normal_(0.0, 0.02, generator=gen)
    model.eval()
    return model


def save_checkpoint(model: Backbone, path: str | Path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": 1,
            "config": asdict(model.config),
            "config_hash": model.config.hash(),
            "params": model.state_dict(),
            "extra": extra or {},
        },
        path,
    )
    return path


def load_checkpoint(path: str | Path, map_location: str = "cpu") -> tuple[Backbone, dict]:
    blob = torch.load(Path(path), map_location=map_location, weights_only=False)
    if blob.get("format_version") != 1:
        raise ValueError(f"{path}: unsupported checkpoint format {blob.get('format_version')!r}")
    config = BackboneConfig(**blob["config"])
    if config.hash() != blob["config_hash"]:
        raise ValueError(f"{path}: config hash mismatch; checkpoint is corrupt or config drifted")
    model = Backbone(config)
    model.load_state_dict(blob["params"])
    model.eval()
    return model, blob.get("extra", {})
