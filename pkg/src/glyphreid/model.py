"""Online network: patch-based image encoder, text encoder, text-guided
cross-modal encoder, projection heads and the four task classifiers.

The cross-modal encoder is asymmetric by construction: text supplies the
queries, image features supply keys and values, so fused sequences always
have text length.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ContractError, VocabularyError


@dataclass(frozen=True)
class ModelConfig:
    image_layers: int = 4
    text_layers: int = 2
    cross_layers: int = 2
    hidden_dim: int = 64
    heads: int = 4
    ffn_mult: int = 4
    image_side: int = 16
    patch_side: int = 8
    proj_dim: int = 32
    vocab_size: int = 35
    max_len: int = 16
    tau_init: float = 0.07

    def validate(self) -> None:
        if self.hidden_dim % self.heads != 0:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}"
            )
        if self.cross_layers < 1:
            raise ConfigError("cross_layers must be >= 1")
        if self.proj_dim > self.hidden_dim:
            raise ConfigError("proj_dim must be <= hidden_dim")
        if self.image_side % self.patch_side != 0:
            raise ConfigError("image_side must be divisible by patch_side")

    @property
    def n_patches(self) -> int:
        return (self.image_side // self.patch_side) ** 2


class SelfAttentionBlock(nn.Module):
    """Pre-LN transformer block: self-attention + feed-forward."""

    def __init__(self, dim: int, heads: int, ffn_mult: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_mult * dim), nn.GELU(), nn.Linear(ffn_mult * dim, dim)
        )

    def forward(self, x, key_padding_mask=None):
        h = self.norm1(x)
        a, _ = self.attn(h, h, h, key_padding_mask=key_padding_mask, need_weights=False)
        x = x + a
        x = x + self.ffn(self.norm2(x))
        return x


class CrossAttentionBlock(nn.Module):
    """Self-attention over text, then cross-attention text -> image, then FFN."""

    def __init__(self, dim: int, heads: int, ffn_mult: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm3 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_mult * dim), nn.GELU(), nn.Linear(ffn_mult * dim, dim)
        )

    def forward(self, text, image, text_padding_mask=None):
        h = self.norm1(text)
        a, _ = self.self_attn(
            h, h, h, key_padding_mask=text_padding_mask, need_weights=False
        )
        text = text + a
        h = self.norm2(text)
        c, _ = self.cross_attn(h, image, image, need_weights=False)
        text = text + c
        text = text + self.ffn(self.norm3(text))
        return text


class ImageEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Linear(cfg.patch_side**2, cfg.hidden_dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.hidden_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.n_patches + 1, cfg.hidden_dim))
        self.blocks = nn.ModuleList(
            SelfAttentionBlock(cfg.hidden_dim, cfg.heads, cfg.ffn_mult)
            for _ in range(cfg.image_layers)
        )
        self.norm = nn.LayerNorm(cfg.hidden_dim)

    def patchify(self, pixels: torch.Tensor) -> torch.Tensor:
        b = pixels.shape[0]
        s, p = self.cfg.image_side, self.cfg.patch_side
        if pixels.shape[-2:] != (s, s):
            raise ContractError(
                f"expected pixels of shape (*, {s}, {s}), got {tuple(pixels.shape)}"
            )
        g = s // p
        x = pixels.reshape(b, g, p, g, p).permute(0, 1, 3, 2, 4)
        return x.reshape(b, g * g, p * p)

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        x = self.patch_embed(self.patchify(pixels))
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class TextEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.hidden_dim)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.max_len, cfg.hidden_dim))
        self.blocks = nn.ModuleList(
            SelfAttentionBlock(cfg.hidden_dim, cfg.heads, cfg.ffn_mult)
            for _ in range(cfg.text_layers)
        )
        self.norm = nn.LayerNorm(cfg.hidden_dim)

    def forward(self, tokens: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        if int(tokens.max()) >= self.cfg.vocab_size or int(tokens.min()) < 0:
            raise VocabularyError("token id out of vocabulary range")
        # padded token ids must not leak into the sequence: zero them before
        # embedding so the pad mask is the single source of truth
        safe = tokens.masked_fill(pad_mask, 0)
        x = self.embed(safe) + self.pos_embed[:, : tokens.shape[1]]
        x = x * (~pad_mask).unsqueeze(-1)
        for blk in self.blocks:
            x = blk(x, key_padding_mask=pad_mask)
        return self.norm(x)


class CrossEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(
            CrossAttentionBlock(cfg.hidden_dim, cfg.heads, cfg.ffn_mult)
            for _ in range(cfg.cross_layers)
        )
        self.norm = nn.LayerNorm(cfg.hidden_dim)

    def forward(self, text_seq, image_seq, text_padding_mask=None):
        x = text_seq
        for blk in self.blocks:
            x = blk(x, image_seq, text_padding_mask=text_padding_mask)
        return self.norm(x)


class RetrievalModel(nn.Module):
    """Dual encoders + cross encoder + projections + task heads."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        super().__init__()
        self.cfg = cfg
        self.image_encoder = ImageEncoder(cfg)
        self.text_encoder = TextEncoder(cfg)
        self.cross_encoder = CrossEncoder(cfg)
        self.image_proj = nn.Linear(cfg.hidden_dim, cfg.proj_dim)
        self.text_proj = nn.Linear(cfg.hidden_dim, cfg.proj_dim)
        self.itm_head = nn.Linear(cfg.hidden_dim, 2)
        self.prd_head = nn.Linear(cfg.hidden_dim, 2)
        self.mlm_head = nn.Linear(cfg.hidden_dim, cfg.vocab_size)
        self.rtd_head = nn.Linear(cfg.hidden_dim, 2)
        # learnable contrastive temperature, clamped at use sites
        self.temperature = nn.Parameter(torch.tensor(float(cfg.tau_init)))
        self.apply(self._init_weights)
        # symmetry breaking: learned position/class tokens start small but
        # nonzero so degenerate inputs cannot zero the whole forward pass
        nn.init.normal_(self.image_encoder.cls_token, std=0.02)
        nn.init.normal_(self.image_encoder.pos_embed, std=0.02)
        nn.init.normal_(self.text_encoder.pos_embed, std=0.02)

    @staticmethod
    def _init_weights(module: nn.Module) -> None:
        if isinstance(module, (nn.Linear, nn.Embedding)):
            nn.init.normal_(module.weight, std=0.02)
            if isinstance(module, nn.Linear) and module.bias is not None:
                nn.init.zeros_(module.bias)

    @property
    def head_parameters(self) -> list[nn.Parameter]:
        """Task-classifier parameters (the fast learning-rate group)."""
        mods = [self.itm_head, self.prd_head, self.mlm_head, self.rtd_head]
        return [p for m in mods for p in m.parameters()]

    def tau(self) -> torch.Tensor:
        return self.temperature.clamp(1e-3, 0.5)

    def encode_image(self, pixels: torch.Tensor) -> torch.Tensor:
        return self.image_encoder(pixels)

    def encode_text(self, tokens: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        return self.text_encoder(tokens, pad_mask)

    def fuse(self, image_seq, text_seq, text_pad_mask=None) -> torch.Tensor:
        return self.cross_encoder(text_seq, image_seq, text_padding_mask=text_pad_mask)

    def project(self, cls_vec: torch.Tensor, side: str) -> torch.Tensor:
        if side not in ("image", "text"):
            raise ContractError(f"side must be 'image' or 'text', got {side!r}")
        proj = self.image_proj if side == "image" else self.text_proj
        out = proj(cls_vec)
        norms = out.norm(dim=-1, keepdim=True)
        if bool((norms < 1e-8).any()):
            raise ContractError("projection collapsed to zero norm")
        return out / norms

    # heads: *_logits for losses, *_probabilities for the simplex contract
    def itm_logits(self, f_cls):
        return self.itm_head(f_cls)

    def prd_logits(self, f_cls):
        return self.prd_head(f_cls)

    def mlm_logits(self, f_tokens):
        return self.mlm_head(f_tokens)

    def rtd_logits(self, f_tokens):
        return self.rtd_head(f_tokens)

    def itm_probabilities(self, f_cls):
        return F.softmax(self.itm_head(f_cls), dim=-1)

    def prd_probabilities(self, f_cls):
        return F.softmax(self.prd_head(f_cls), dim=-1)

    def mlm_probabilities(self, f_tokens):
        return F.softmax(self.mlm_head(f_tokens), dim=-1)

    def rtd_probabilities(self, f_tokens):
        return F.softmax(self.rtd_head(f_tokens), dim=-1)


# ---------------------------------------------------------------------------
# checkpoint format: single .npz archive with a JSON config echo plus one
# named float array per parameter (online "online/", momentum "momentum/")
# ---------------------------------------------------------------------------

def save_checkpoint(
    path: str | Path,
    model: RetrievalModel,
    momentum_model: nn.Module | None = None,
    step: int = 0,
    extra: dict | None = None,
) -> None:
    arrays = {
        f"online/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()
    }
    if momentum_model is not None:
        arrays.update(
            {
                f"momentum/{k}": v.detach().cpu().numpy()
                for k, v in momentum_model.state_dict().items()
            }
        )
    meta = {
        "config": asdict(model.cfg),
        "step": int(step),
        "extra": extra or {},
    }
    arrays["__meta__"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with io.BytesIO() as buf:
        np.savez(buf, **arrays)
        path.write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path):
    """Returns (model, momentum_model_or_None, step, extra)."""
    data = np.load(Path(path), allow_pickle=False)
    meta = json.loads(bytes(data["__meta__"]).decode())
    cfg = ModelConfig(**meta["config"])
    model = RetrievalModel(cfg)
    online = {
        k.split("/", 1)[1]: torch.from_numpy(data[k])
        for k in data.files
        if k.startswith("online/")
    }
    model.load_state_dict(online)
    momentum_model = None
    momentum = {
        k.split("/", 1)[1]: torch.from_numpy(data[k])
        for k in data.files
        if k.startswith("momentum/")
    }
    if momentum:
        momentum_model = RetrievalModel(cfg)
        momentum_model.load_state_dict(momentum)
        for p in momentum_model.parameters():
            p.requires_grad_(False)
    return model, momentum_model, meta["step"], meta["extra"]
