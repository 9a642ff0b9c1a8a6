"""Miniature mask-classification network.

A small convolutional backbone (stride 4) feeds two branches: a pixel
decoder that upsamples back to input resolution to produce per-pixel
embeddings, and a transformer decoder in which N learned query embeddings
attend to the backbone features to produce per-proposal embeddings.
Each proposal yields a class distribution (linear + softmax over K+1) and
a binary mask (sigmoid of the dot product between its projected embedding
and every pixel embedding). A separate pixel-pair MLP (SimNet) scores
whether two pixels belong to the same semantic class.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from functools import lru_cache
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class ModelConfig:
    embed_dim: int = 32                   # C
    num_queries: int = 12                 # N
    num_classes: int = 12                 # K (semantic classes)
    backbone_channels: tuple = (16, 32, 32)
    decoder_layers: int = 2
    decoder_heads: int = 4
    decoder_ffn_dim: int = 64
    simnet_hidden: int = 64
    simnet_layers: int = 6                # FC layers including the output one

    def validate(self):
        if self.embed_dim <= 0 or self.num_queries <= 0:
            raise ValueError("embed_dim and num_queries must be positive")
        if self.num_classes < 2:
            raise ValueError("need at least 2 semantic classes")
        if self.embed_dim % self.decoder_heads != 0:
            raise ValueError("embed_dim must divide evenly across heads")
        if self.embed_dim % 4 != 0:
            raise ValueError("embed_dim must be a multiple of 4 for the "
                             "2D positional encoding")


class ModelOutputs(NamedTuple):
    """Single-image outputs; shapes follow the C/N/K/H/W convention."""

    e_prop: torch.Tensor       # C x N proposal embeddings
    e_pix: torch.Tensor        # C x H x W pixel embeddings
    class_probs: torch.Tensor  # (K+1) x N, each column a distribution
    mask_scores: torch.Tensor  # N x H x W in (0, 1)


@lru_cache(maxsize=16)
def _sincos_position_encoding(dim: int, h: int, w: int) -> torch.Tensor:
    """Fixed 2D sine/cosine encoding, shape (dim, h, w), float64."""
    quarter = dim // 4
    freqs = torch.exp(-np.log(10000.0) * torch.arange(quarter, dtype=torch.float64)
                      / max(quarter, 1))
    ys = torch.arange(h, dtype=torch.float64)[:, None] * freqs[None, :]
    xs = torch.arange(w, dtype=torch.float64)[:, None] * freqs[None, :]
    enc = torch.zeros(dim, h, w, dtype=torch.float64)
    enc[0 * quarter:1 * quarter] = torch.sin(ys).T[:, :, None].expand(-1, h, w)
    enc[1 * quarter:2 * quarter] = torch.cos(ys).T[:, :, None].expand(-1, h, w)
    enc[2 * quarter:3 * quarter] = torch.sin(xs).T[:, None, :].expand(-1, h, w)
    enc[3 * quarter:4 * quarter] = torch.cos(xs).T[:, None, :].expand(-1, h, w)
    return enc


def _conv_block(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    groups = min(8, cout)
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.GroupNorm(groups, cout),
        nn.GELU(),
    )


class SimNet(nn.Module):
    """Pixel-pair similarity scorer: stacked FC layers ending in a sigmoid."""

    def __init__(self, embed_dim: int, hidden: int, layers: int):
        super().__init__()
        widths = [2 * embed_dim] + [hidden] * (layers - 1) + [1]
        mods = []
        for i in range(layers):
            mods.append(nn.Linear(widths[i], widths[i + 1]))
            if i < layers - 1:
                mods.append(nn.ReLU())
        self.net = nn.Sequential(*mods)
        self.in_dim = 2 * embed_dim

    def forward(self, pair_embeddings: torch.Tensor) -> torch.Tensor:
        """Score pair embeddings shaped (2C, ...) -> scores shaped (...)."""
        if pair_embeddings.shape[0] != self.in_dim:
            raise ValueError(
                f"pair embeddings must have leading dimension {self.in_dim}, "
                f"got {pair_embeddings.shape[0]}")
        flat = pair_embeddings.reshape(self.in_dim, -1).T
        scores = torch.sigmoid(self.net(flat)).squeeze(-1)
        return scores.reshape(pair_embeddings.shape[1:])


class SegModel(nn.Module):
    """Backbone + pixel decoder + query decoder + classification/mask heads."""

    STRIDE = 4

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        c1, c2, c3 = config.backbone_channels
        cdim = config.embed_dim

        self.backbone = nn.Sequential(
            _conv_block(3, c1),
            _conv_block(c1, c2, stride=2),
            _conv_block(c2, c2),
            _conv_block(c2, c3, stride=2),
            _conv_block(c3, c3),
        )

        # Pixel decoder: project to C, then two upsample+conv stages back
        # to input resolution. The final conv is unactivated.
        self.pix_proj = _conv_block(c3, cdim)
        self.pix_up1 = _conv_block(cdim, cdim)
        self.pix_up2 = nn.Conv2d(cdim, cdim, 3, padding=1)

        self.mem_proj = nn.Conv2d(c3, cdim, 1)
        self.queries = nn.Parameter(torch.randn(config.num_queries, cdim) * 0.1)
        layer = nn.TransformerDecoderLayer(
            d_model=cdim, nhead=config.decoder_heads,
            dim_feedforward=config.decoder_ffn_dim,
            dropout=0.0, activation="gelu", batch_first=True)
        self.decoder = nn.TransformerDecoder(layer, config.decoder_layers)

        self.classifier = nn.Linear(cdim, config.num_classes + 1)
        self.mask_head = nn.Sequential(
            nn.Linear(cdim, cdim), nn.GELU(),
            nn.Linear(cdim, cdim), nn.GELU(),
            nn.Linear(cdim, cdim))
        self.simnet = SimNet(cdim, config.simnet_hidden, config.simnet_layers)

    @property
    def query_embeddings(self) -> torch.Tensor:
        """Shared learned query embeddings, shape (C, N)."""
        return self.queries.T

    def _check_resolution(self, h: int, w: int):
        if h % self.STRIDE or w % self.STRIDE or h < 2 * self.STRIDE or w < 2 * self.STRIDE:
            raise ValueError(
                f"input resolution {h}x{w} must be a multiple of the backbone "
                f"stride {self.STRIDE} and at least {2 * self.STRIDE}")

    def forward_batch(self, images: torch.Tensor) -> tuple:
        """Run a (B, 3, H, W) batch.

        Returns (e_prop, e_pix, class_probs, mask_scores) with a leading
        batch dimension each.
        """
        b, _, h, w = images.shape
        self._check_resolution(h, w)
        feats = self.backbone(images)

        pix = self.pix_proj(feats)
        pix = self.pix_up1(F.interpolate(pix, scale_factor=2, mode="bilinear",
                                         align_corners=False))
        e_pix = self.pix_up2(F.interpolate(pix, scale_factor=2, mode="bilinear",
                                           align_corners=False))

        mem = self.mem_proj(feats)
        pos = _sincos_position_encoding(self.config.embed_dim,
                                        feats.shape[2], feats.shape[3])
        mem = mem + pos.to(dtype=mem.dtype, device=mem.device)
        mem = mem.flatten(2).transpose(1, 2)               # B x S x C
        tgt = self.queries.unsqueeze(0).expand(b, -1, -1)  # B x N x C
        e_prop = self.decoder(tgt, mem)                    # B x N x C

        class_probs = torch.softmax(self.classifier(e_prop), dim=-1)
        mask_scores = self._mask_scores(e_prop, e_pix)
        return (e_prop.transpose(1, 2), e_pix,
                class_probs.transpose(1, 2), mask_scores)

    def _mask_scores(self, e_prop_bnc: torch.Tensor,
                     e_pix: torch.Tensor) -> torch.Tensor:
        proj = self.mask_head(e_prop_bnc)                  # B x N x C
        logits = torch.einsum("bnc,bchw->bnhw", proj, e_pix)
        return torch.sigmoid(logits)

    def forward(self, image) -> ModelOutputs:
        """Single image (H, W, 3) array or tensor -> ModelOutputs."""
        if isinstance(image, np.ndarray):
            dtype = next(self.parameters()).dtype
            image = torch.as_tensor(image, dtype=dtype)
        batch = image.permute(2, 0, 1).unsqueeze(0)
        e_prop, e_pix, probs, masks = self.forward_batch(batch)
        return ModelOutputs(e_prop[0], e_pix[0], probs[0], masks[0])

    def classify_proposals(self, e_prop: torch.Tensor) -> torch.Tensor:
        """(C, N) proposal embeddings -> (K+1, N) class probabilities."""
        return torch.softmax(self.classifier(e_prop.T), dim=-1).T

    def compute_masks(self, e_prop: torch.Tensor,
                      e_pix: torch.Tensor) -> torch.Tensor:
        """(C, N) and (C, H, W) -> (N, H, W) sigmoid mask scores."""
        proj = self.mask_head(e_prop.T)                    # N x C
        logits = torch.einsum("nc,chw->nhw", proj, e_pix)
        return torch.sigmoid(logits)


def save_checkpoint(path: str, model: SegModel, extra: dict | None = None):
    """Write parameters plus the embedded model config (and extras)."""
    payload = {
        "config_json": json.dumps(asdict(model.config)),
        "state_dict": model.state_dict(),
    }
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)


def load_checkpoint(path: str, dtype: torch.dtype = torch.float32) -> tuple:
    """Load (model, extra); parameter shapes are validated against config."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    cfg_dict = json.loads(payload["config_json"])
    cfg_dict["backbone_channels"] = tuple(cfg_dict["backbone_channels"])
    model = SegModel(ModelConfig(**cfg_dict)).to(dtype)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload.get("extra", {})
