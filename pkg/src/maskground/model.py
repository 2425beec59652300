"""The vision model: multi-scale conv extractor with lateral fusion, twin
projection heads, learnable positional embeddings, stacked query-to-image
cross-attention, mask prediction, and mask-weighted region pooling.

Feature maps use channels-last (B, H', W', D) outside the conv stacks;
queries are (B, N, D). The mask grid is the input resolution divided by 4.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import MASK_STRIDE, MaskProposalSet, Sample


@dataclass(frozen=True)
class ModelConfig:
    """Architecture dimensions; fixed at construction time."""

    num_proposals: int = 16          # N
    embed_dim: int = 64              # D (regions and words share it)
    num_blocks: int = 3              # T stacked cross-attention blocks
    fused_dim: int = 64              # width of the fused feature map
    num_heads: int = 4
    ffn_multiplier: int = 2
    base_mask_hw: tuple[int, int] = (16, 16)
    stage_channels: tuple[int, int, int, int, int] = (16, 32, 48, 64, 64)
    stem_convs: int = 1
    stage_convs: int = 2
    # Without normalization a from-scratch conv stack emits feature maps with
    # one dominant shared direction, and cosine-based grounding goes flat;
    # group norm plus spatially centered alignment features restore the
    # variation a pretrained/batch-normed backbone would carry.
    norm_groups: int = 4
    center_alignment_features: bool = True
    query_init_std: float = 0.02
    init_tau_inverse: float = 10.0

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if min(self.num_proposals, self.num_blocks, self.fused_dim) < 1:
            raise ValueError("num_proposals, num_blocks, fused_dim must be >= 1")

    def to_dict(self) -> dict:
        return {
            "num_proposals": self.num_proposals,
            "embed_dim": self.embed_dim,
            "num_blocks": self.num_blocks,
            "fused_dim": self.fused_dim,
            "num_heads": self.num_heads,
            "ffn_multiplier": self.ffn_multiplier,
            "base_mask_hw": list(self.base_mask_hw),
            "stage_channels": list(self.stage_channels),
            "stem_convs": self.stem_convs,
            "stage_convs": self.stage_convs,
            "norm_groups": self.norm_groups,
            "center_alignment_features": self.center_alignment_features,
            "query_init_std": self.query_init_std,
            "init_tau_inverse": self.init_tau_inverse,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        kwargs = dict(obj)
        kwargs["base_mask_hw"] = tuple(kwargs["base_mask_hw"])
        kwargs["stage_channels"] = tuple(kwargs["stage_channels"])
        return cls(**kwargs)


@dataclass
class FeatureBundle:
    """Fused map plus the two head outputs; f_s_pe = f_s + positional table."""

    fused: torch.Tensor   # (B, H', W', D_f)
    f_s: torch.Tensor     # (B, H', W', D)
    f_z: torch.Tensor     # (B, H', W', D)
    f_s_pe: torch.Tensor  # (B, H', W', D)


@dataclass
class ForwardResult:
    masks: torch.Tensor            # (B, N, H', W') sigmoid outputs
    features: torch.Tensor         # (B, N, D) pooled region features
    queries: torch.Tensor          # (B, N, D) final mask queries
    bundle: FeatureBundle
    attentions: list[torch.Tensor] = field(default_factory=list)


def predict_masks(q: torch.Tensor, f_s_pe: torch.Tensor) -> torch.Tensor:
    """Sigmoid of the query/feature dot product: s[n, i, j] =
    sigmoid(<q[n], f_s_pe[i, j]>). Accepts batched or unbatched inputs."""
    if q.ndim == 2 and f_s_pe.ndim == 3:
        return predict_masks(q[None], f_s_pe[None])[0]
    if q.ndim != 3 or f_s_pe.ndim != 4 or q.shape[-1] != f_s_pe.shape[-1]:
        raise ValueError(f"shape mismatch: q {tuple(q.shape)}, "
                         f"f_s_pe {tuple(f_s_pe.shape)}")
    logits = torch.einsum("bnd,bhwd->bnhw", q, f_s_pe)
    return torch.sigmoid(logits)


def pool_region_features(s: torch.Tensor, f_z: torch.Tensor) -> torch.Tensor:
    """Unnormalized mask-weighted pooling: z[n, d] = sum_ij s[n,i,j] * f_z[i,j,d]."""
    if s.ndim == 3 and f_z.ndim == 3:
        return pool_region_features(s[None], f_z[None])[0]
    if s.ndim != 4 or f_z.ndim != 4 or s.shape[-2:] != f_z.shape[1:3]:
        raise ValueError(f"shape mismatch: s {tuple(s.shape)}, f_z {tuple(f_z.shape)}")
    return torch.einsum("bnhw,bhwd->bnd", s, f_z)


class _ProjectionHead(nn.Module):
    """fc layer then three 3x3 convs; the two heads share this architecture
    but never parameters. The alignment head subtracts the spatial mean of
    its output so pooled region features are not dominated by one shared
    direction."""

    def __init__(self, in_dim: int, out_dim: int, center: bool = False):
        super().__init__()
        self.center = center
        self.fc = nn.Conv2d(in_dim, out_dim, kernel_size=1)
        self.conv1 = nn.Conv2d(out_dim, out_dim, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(out_dim, out_dim, kernel_size=3, padding=1)
        self.conv3 = nn.Conv2d(out_dim, out_dim, kernel_size=3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # (B, C, H, W)
        x = F.gelu(self.fc(x))
        x = F.gelu(self.conv1(x))
        x = F.gelu(self.conv2(x))
        x = self.conv3(x)
        if self.center:
            x = x - x.mean(dim=(2, 3), keepdim=True)
        return x


def _group_norm(channels: int, groups: int) -> nn.Module:
    if groups <= 0:
        return nn.Identity()
    return nn.GroupNorm(math.gcd(groups, channels), channels)


class Extractor(nn.Module):
    """Strided conv stages at strides 4/8/16/32 with lateral 1x1 projections
    summed at the stride-4 grid."""

    def __init__(self, channels: Sequence[int], fused_dim: int, groups: int,
                 stem_convs: int = 1, stage_convs: int = 2):
        super().__init__()
        c0, c1, c2, c3, c4 = channels
        def block(cin, cout, stride=1):
            return [nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
                    _group_norm(cout, groups), nn.GELU()]
        def stage(cin, cout):
            layers = block(cin, cout, stride=2)
            for _ in range(stage_convs - 1):
                layers += block(cout, cout)
            return nn.Sequential(*layers)
        stem_layers = block(3, c0, stride=2)
        for _ in range(stem_convs - 1):
            stem_layers += block(c0, c0)
        self.stem = nn.Sequential(*stem_layers)
        self.stage2 = stage(c0, c1)
        self.stage3 = stage(c1, c2)
        self.stage4 = stage(c2, c3)
        self.stage5 = nn.Sequential(*block(c3, c4, stride=2))
        self.lateral = nn.ModuleList(
            [nn.Conv2d(c, fused_dim, 1) for c in (c1, c2, c3, c4)])

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # (B, 3, H, W)
        p2 = self.stage2(self.stem(x))
        p3 = self.stage3(p2)
        p4 = self.stage4(p3)
        p5 = self.stage5(p4)
        out = self.lateral[0](p2)
        for lat, p in zip(self.lateral[1:], (p3, p4, p5)):
            out = out + F.interpolate(lat(p), size=out.shape[-2:], mode="nearest")
        return out


class CrossAttentionBlock(nn.Module):
    """One query-to-image cross-attention block with a feed-forward
    transform; both sublayers are residual. No query self-attention."""

    def __init__(self, dim: int, num_heads: int, ffn_multiplier: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.ln_attn = nn.LayerNorm(dim)
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.ln_ffn = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_multiplier * dim), nn.GELU(),
                                 nn.Linear(ffn_multiplier * dim, dim))

    def attend(self, q: torch.Tensor, kv: torch.Tensor
               ) -> tuple[torch.Tensor, torch.Tensor]:
        """Multi-head attention of queries over all spatial positions.

        Returns (context after the output projection, attention weights of
        shape (B, heads, N, HW); each weight row sums to 1).
        """
        b, n, d = q.shape
        hw = kv.shape[1]
        def split(t, length):
            return t.view(b, length, self.num_heads, self.head_dim).transpose(1, 2)
        qh = split(self.q_proj(q), n)
        kh = split(self.k_proj(kv), hw)
        vh = split(self.v_proj(kv), hw)
        logits = (qh @ kh.transpose(-1, -2)) / math.sqrt(self.head_dim)
        weights = torch.softmax(logits, dim=-1)
        context = (weights @ vh).transpose(1, 2).reshape(b, n, d)
        return self.out_proj(context), weights

    def forward(self, q: torch.Tensor, kv: torch.Tensor,
                need_weights: bool = False
                ) -> tuple[torch.Tensor, torch.Tensor | None]:
        context, weights = self.attend(self.ln_attn(q), kv)
        q = q + context
        q = q + self.ffn(self.ln_ffn(q))
        return q, (weights if need_weights else None)


class VisionModel(nn.Module):
    """Mask-proposal model: image -> N soft masks + N region features."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.extractor = Extractor(config.stage_channels, config.fused_dim,
                                   config.norm_groups, config.stem_convs,
                                   config.stage_convs)
        self.head_s = _ProjectionHead(config.fused_dim, config.embed_dim)
        self.head_z = _ProjectionHead(config.fused_dim, config.embed_dim,
                                      center=config.center_alignment_features)
        h0, w0 = config.base_mask_hw
        self.pos_embed = nn.Parameter(torch.zeros(h0, w0, config.embed_dim))
        self.initial_queries = nn.Parameter(
            torch.empty(config.num_proposals, config.embed_dim)
            .normal_(0.0, config.query_init_std))
        self.blocks = nn.ModuleList(
            [CrossAttentionBlock(config.embed_dim, config.num_heads,
                                 config.ffn_multiplier)
             for _ in range(config.num_blocks)])
        self.log_tau = nn.Parameter(
            torch.tensor(-math.log(config.init_tau_inverse)))

    @property
    def tau(self) -> torch.Tensor:
        """Shared softmax temperature; positive by construction."""
        return self.log_tau.exp()

    def extract_features(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> fused map (B, H/4, W/4, D_f). H, W must be
        divisible by 32."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"image size {h}x{w} must be divisible by 32")
        fused = self.extractor(images)
        return fused.permute(0, 2, 3, 1)

    def positional_table(self, hw: tuple[int, int],
                         dtype: torch.dtype) -> torch.Tensor:
        """The learnable positional table, bilinearly resized when the mask
        grid differs from the base grid."""
        pe = self.pos_embed.to(dtype)
        if tuple(pe.shape[:2]) == tuple(hw):
            return pe
        resized = F.interpolate(pe.permute(2, 0, 1)[None], size=hw,
                                mode="bilinear", align_corners=False)
        return resized[0].permute(1, 2, 0)

    def project_heads(self, fused: torch.Tensor) -> FeatureBundle:
        """Fused map -> (f_s, f_z, f_s_pe); separate parameters, identical
        architecture."""
        chw = fused.permute(0, 3, 1, 2)
        f_s = self.head_s(chw).permute(0, 2, 3, 1)
        f_z = self.head_z(chw).permute(0, 2, 3, 1)
        pe = self.positional_table(f_s.shape[1:3], f_s.dtype)
        return FeatureBundle(fused=fused, f_s=f_s, f_z=f_z, f_s_pe=f_s + pe)

    def run_queries(self, f_s_pe: torch.Tensor, need_weights: bool = False
                    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Iterate the stacked cross-attention blocks from the initial
        queries; returns final queries and (optionally) per-block weights."""
        b = f_s_pe.shape[0]
        kv = f_s_pe.reshape(b, -1, f_s_pe.shape[-1])
        q = self.initial_queries.to(f_s_pe.dtype)[None].expand(b, -1, -1)
        attentions: list[torch.Tensor] = []
        for block in self.blocks:
            q, weights = block(q, kv, need_weights=need_weights)
            if need_weights:
                attentions.append(weights)
        return q, attentions

    def forward(self, images: torch.Tensor,
                need_weights: bool = False) -> ForwardResult:
        fused = self.extract_features(images)
        bundle = self.project_heads(fused)
        q, attentions = self.run_queries(bundle.f_s_pe, need_weights)
        s = predict_masks(q, bundle.f_s_pe)
        z = pool_region_features(s, bundle.f_z)
        return ForwardResult(masks=s, features=z, queries=q, bundle=bundle,
                             attentions=attentions)


def build_vision_model(config: ModelConfig, seed: int) -> VisionModel:
    """Construct a model with a reproducible initialization."""
    torch.manual_seed(seed)
    model = VisionModel(config)
    with torch.no_grad():
        model.pos_embed.zero_()
        model.initial_queries.normal_(0.0, config.query_init_std)
    return model


def image_to_tensor(image: np.ndarray, dtype: torch.dtype = torch.float32
                    ) -> torch.Tensor:
    """(H, W, 3) [0,1] array -> (3, H, W) tensor."""
    # Copy: domain arrays are frozen (read-only) and torch wants writable.
    return torch.from_numpy(np.array(image)).permute(2, 0, 1).to(dtype)


def stack_images(samples: Sequence[Sample],
                 dtype: torch.dtype = torch.float32) -> torch.Tensor:
    sizes = {s.image.shape for s in samples}
    if len(sizes) != 1:
        raise ValueError(f"cannot batch mixed image sizes: {sorted(sizes)}")
    return torch.stack([image_to_tensor(s.image, dtype) for s in samples])


def to_proposal_set(result: ForwardResult, index: int = 0) -> MaskProposalSet:
    """Convert one batch element to the numpy proposal representation.

    Sigmoid outputs are clamped away from exact 0/1 so the strict open
    interval invariant survives float32 saturation.
    """
    masks = result.masks[index].detach().cpu().numpy().astype(np.float32)
    masks = np.clip(masks, 1e-6, 1.0 - 1e-6)
    feats = result.features[index].detach().cpu().numpy().astype(np.float32)
    return MaskProposalSet(masks=masks, features=feats)


def mask_grid_for_image(h: int, w: int) -> tuple[int, int]:
    return (h // MASK_STRIDE, w // MASK_STRIDE)
