"""ViT encoder with a four-tap top-down pyramid decoder and two output heads.

The encoder is a pre-norm ViT with a CLS token and a learned positional
table.  Token states after blocks ``tap_layers`` (CLS stripped) are reshaped
to grids, projected laterally and fused from the deepest tap down:

    P_last = L_last
    P_l    = Dropout(GELU(Conv3x3(L_l + Upsample(P_next))))

``P`` of the shallowest tap is projected to class logits and bilinearly
upsampled to the input size.  The diagnosis head reads the final CLS token:
``softmax(W2 GELU(W1 LN(cls)))``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 56
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 12
    num_heads: int = 4
    mlp_ratio: float = 4.0
    decoder_channels: int = 32
    tap_layers: tuple[int, ...] = (3, 6, 9, 12)
    num_seg_classes: int = 4
    num_disease_classes: int = 5
    dropout: float = 0.1
    in_chans: int = 3
    pretrained: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "tap_layers", tuple(int(t) for t in self.tap_layers))
        if self.image_size % self.patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed dim {self.embed_dim} not divisible by {self.num_heads} heads")
        taps = self.tap_layers
        if len(taps) != 4:
            raise ValueError(f"exactly four tap layers are required, got {taps}")
        if list(taps) != sorted(set(taps)):
            raise ValueError(f"tap layers must be strictly ascending, got {taps}")
        if taps[0] < 1 or taps[-1] > self.depth:
            raise ValueError(f"tap layers {taps} must lie in [1, {self.depth}]")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tap_layers"] = list(self.tap_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown model fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def full(cls, **kw) -> "ModelConfig":
        """ViT-B/14 sized configuration at 224x224."""
        base = dict(image_size=224, patch_size=14, embed_dim=768, depth=12, num_heads=12,
                    decoder_channels=256)
        base.update(kw)
        return cls(**base)


def parameter_count(cfg: ModelConfig) -> int:
    d, c, k = cfg.embed_dim, cfg.decoder_channels, cfg.num_seg_classes
    hid, p, n = cfg.mlp_hidden, cfg.patch_size, cfg.num_patches
    embed = cfg.in_chans * p * p * d + d + d + (n + 1) * d
    block = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (d * hid + hid) + (hid * d + d)
    decoder = 4 * (d * c + c) + 3 * (9 * c * c + c) + (c * k + k)
    diag = 2 * d + (d * d + d) + (d * cfg.num_disease_classes + cfg.num_disease_classes)
    return embed + cfg.depth * block + decoder + diag


@dataclass
class PredictionBundle:
    seg_logits: torch.Tensor  # (B, K, S, S)
    seg_probs: torch.Tensor
    disease_logits: torch.Tensor  # (B, K_dis)
    disease_probs: torch.Tensor
    cls_token: torch.Tensor  # (B, D)


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.last_weights: torch.Tensor | None = None
        self.keep_weights = False

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        if self.keep_weights:
            self.last_weights = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, hidden: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        h = self.drop(F.gelu(self.fc1(self.norm2(x))))
        return x + self.drop(self.fc2(h))


class CardiacViT(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d, c = cfg.embed_dim, cfg.decoder_channels
        self.patch_proj = nn.Conv2d(cfg.in_chans, d, cfg.patch_size, stride=cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_patches + 1, d))
        self.blocks = nn.ModuleList(
            Block(d, cfg.num_heads, cfg.mlp_hidden, cfg.dropout) for _ in range(cfg.depth)
        )
        self.lateral = nn.ModuleList(nn.Conv2d(d, c, 1) for _ in cfg.tap_layers)
        # fusion[i] refines tap i (shallow to deep) using the level above it
        self.fusion = nn.ModuleList(nn.Conv2d(c, c, 3, padding=1) for _ in cfg.tap_layers[:-1])
        self.seg_head = nn.Conv2d(c, cfg.num_seg_classes, 1)
        self.diag_norm = nn.LayerNorm(d)
        self.diag_fc1 = nn.Linear(d, d)
        self.diag_fc2 = nn.Linear(d, cfg.num_disease_classes)
        self.drop = nn.Dropout(cfg.dropout)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d)):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    # -- encoder ---------------------------------------------------------

    def patch_embed(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 3, S, S) -> (B, N + 1, D) with CLS first, row-major patches."""
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != cfg.in_chans or x.shape[-1] != cfg.image_size \
                or x.shape[-2] != cfg.image_size:
            raise ValueError(
                f"expected (B, {cfg.in_chans}, {cfg.image_size}, {cfg.image_size}), got {tuple(x.shape)}"
            )
        tok = self.patch_proj(x).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        return torch.cat([cls, tok], dim=1) + self.pos_embed

    def encode(self, tokens: torch.Tensor) -> tuple[list[torch.Tensor], torch.Tensor]:
        """Run all blocks; return tap token states (CLS stripped) and the final CLS."""
        if tokens.shape[1] != self.cfg.num_patches + 1:
            raise ValueError(f"expected {self.cfg.num_patches + 1} tokens, got {tokens.shape[1]}")
        taps = []
        z = tokens
        for i, blk in enumerate(self.blocks, start=1):
            z = blk(z)
            if i in self.cfg.tap_layers:
                taps.append(z[:, 1:])
        return taps, z[:, 0]

    # -- decoder ---------------------------------------------------------

    def decode(self, grids: list[torch.Tensor]) -> torch.Tensor:
        """Fuse four (B, D, g, g) grids top-down; returns the shallowest level."""
        lat = [F.gelu(conv(g)) for conv, g in zip(self.lateral, grids)]
        p = lat[-1]
        for i in range(len(lat) - 2, -1, -1):
            up = p if p.shape[-2:] == lat[i].shape[-2:] else F.interpolate(
                p, size=lat[i].shape[-2:], mode="bilinear", align_corners=False
            )
            p = self.drop(F.gelu(self.fusion[i](lat[i] + up)))
        return p

    def forward(self, x: torch.Tensor) -> PredictionBundle:
        cfg = self.cfg
        taps, cls = self.encode(self.patch_embed(x))
        grids = [tokens_to_grid(t) for t in taps]
        p3 = self.decode(grids)
        logits = F.interpolate(
            self.seg_head(p3), size=(cfg.image_size, cfg.image_size), mode="bilinear",
            align_corners=False,
        )
        d_logits = self.diag_fc2(F.gelu(self.diag_fc1(self.diag_norm(cls))))
        return PredictionBundle(
            seg_logits=logits,
            seg_probs=torch.softmax(logits, dim=1),
            disease_logits=d_logits,
            disease_probs=torch.softmax(d_logits, dim=1),
            cls_token=cls,
        )

    def encoder_parameters(self, n_blocks: int | None = None):
        """Patch embedding, CLS, positional table and the first ``n_blocks`` blocks."""
        n = self.cfg.depth if n_blocks is None else n_blocks
        yield from self.patch_proj.parameters()
        yield self.cls_token
        yield self.pos_embed
        for blk in self.blocks[:n]:
            yield from blk.parameters()


def tokens_to_grid(tokens: torch.Tensor) -> torch.Tensor:
    """(..., N, D) row-major tokens -> (..., D, g, g)."""
    n, d = tokens.shape[-2:]
    g = math.isqrt(n)
    if g * g != n:
        raise ValueError(f"{n} tokens do not form a square grid")
    lead = tokens.shape[:-2]
    return tokens.reshape(*lead, g, g, d).movedim(-1, -3)


def grid_to_tokens(grid: torch.Tensor) -> torch.Tensor:
    d, g, _ = grid.shape[-3:]
    return grid.movedim(-3, -1).reshape(*grid.shape[:-3], g * g, d)


# thin functional aliases over the module


def patch_embed(x: torch.Tensor, model: CardiacViT) -> torch.Tensor:
    return model.patch_embed(x)


def encoder_forward(tokens: torch.Tensor, model: CardiacViT) -> tuple[list[torch.Tensor], torch.Tensor]:
    taps, cls = model.encode(tokens)
    for t in taps:
        if not torch.isfinite(t).all():
            raise FloatingPointError("non-finite encoder activations")
    return taps, cls


def pyramid_decode(grids: list[torch.Tensor], model: CardiacViT) -> torch.Tensor:
    for g in grids:
        if g.shape[-3] != model.cfg.embed_dim:
            raise ValueError(f"tap has {g.shape[-3]} channels, decoder expects {model.cfg.embed_dim}")
    return model.decode(grids)


def forward(x: torch.Tensor, model: CardiacViT) -> PredictionBundle:
    out = model(x)
    if not (torch.isfinite(out.seg_logits).all() and torch.isfinite(out.disease_logits).all()):
        raise FloatingPointError("non-finite model outputs")
    return out


def build_model(cfg: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> CardiacViT:
    torch.manual_seed(seed)
    model = CardiacViT(cfg).to(dtype)
    if cfg.pretrained:
        load_pretrained(model, cfg.pretrained)
    return model


def load_pretrained(model: CardiacViT, path: str | Path, prefix_map: dict[str, str] | None = None) -> list[str]:
    """Copy matching tensors from a saved state dict into the encoder.

    ``prefix_map`` renames source prefixes (e.g. ``{"blocks.": "blocks."}``)
    before matching.  Tensors whose name or shape does not match are skipped.
    Returns the names that were loaded.
    """
    src = torch.load(Path(path), map_location="cpu", weights_only=True)
    if "state_dict" in src:
        src = src["state_dict"]
    own = model.state_dict()
    loaded = []
    for name, tensor in src.items():
        for a, b in (prefix_map or {}).items():
            if name.startswith(a):
                name = b + name[len(a):]
        if name in own and own[name].shape == tensor.shape:
            own[name] = tensor.to(own[name].dtype)
            loaded.append(name)
    model.load_state_dict(own)
    return loaded


def save_config(cfg: ModelConfig, path: Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
