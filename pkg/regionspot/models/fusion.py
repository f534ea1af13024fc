"""
regionspot/models/fusion.py - Region Knowledge-Integration Module

Projects position-aware tokens into the ViL feature space and refines them through
pre-norm blocks of [self-attention over regions -> cross-attention into the semantic
feature map -> feed-forward]. These are the only trainable weights besides the logit scale.
"""

import hashlib
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict, Field, model_validator

from regionspot.core.exceptions import InvalidInputError, NumericalError, ShapeError
from regionspot.models.encoders import PositionAwareTokenSet, SemanticFeatureMap


class FusionConfig(BaseModel):
    """Architecture of the fusion head, stored in every checkpoint."""

    model_config = ConfigDict(extra="forbid")

    depth: int = Field(default=3, ge=1, description="Number of fusion blocks")
    c_dim: int = Field(default=256, ge=1, description="Projected feature dimension C")
    num_heads: int = Field(default=4, ge=1)
    use_class_token: bool = Field(default=True, description="Append the ViL class token as an extra key/value row")
    use_self_attention: bool = Field(default=True, description="Let region tokens of one image attend to each other")
    ffn_expansion: int = Field(default=4, ge=1)

    @model_validator(mode="after")
    def _heads_divide_width(self) -> "FusionConfig":
        if self.c_dim % self.num_heads:
            raise ValueError(f"c_dim {self.c_dim} is not divisible by num_heads {self.num_heads}")
        return self


@dataclass
class RegionSemanticTokens:
    """Fusion output, one row per region."""

    tokens: np.ndarray

    @property
    def count(self) -> int:
        return int(self.tokens.shape[0])


@dataclass
class AttentionRecord:
    """Head-averaged cross-attention of one block; rows are probability vectors."""

    weights: np.ndarray
    layer_index: int
    includes_class_token: bool

    def grid_weights(self) -> np.ndarray:
        """Rows without the class-token column, renormalized for display."""
        weights = self.weights[:, :-1] if self.includes_class_token else self.weights
        totals = weights.sum(axis=1, keepdims=True)
        return weights / np.where(totals > 0, totals, 1.0)


def _check_finite(tensor: torch.Tensor, stage: str) -> torch.Tensor:
    if not torch.isfinite(tensor).all():
        raise NumericalError(f"Non-finite values after {stage}", details={"stage": stage})
    return tensor


class CrossAttention(nn.Module):
    """
    Region queries attend to the semantic feature map.

    One head computes softmax(q k^T / sqrt(C)) v over the memory rows; with several heads
    each head scales by sqrt(C / num_heads) and the head outputs are concatenated.
    """

    def __init__(self, c_dim: int, kv_dim: int, num_heads: int):
        super().__init__()
        self.c_dim = c_dim
        self.num_heads = num_heads
        self.d_head = c_dim // num_heads
        self.w_q = nn.Linear(c_dim, c_dim)
        self.w_k = nn.Linear(kv_dim, c_dim, bias=False)
        self.w_v = nn.Linear(kv_dim, c_dim)

    def forward(self, queries: torch.Tensor, memory: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        n, m = queries.shape[0], memory.shape[0]
        if m == 0:
            raise InvalidInputError("Cross-attention needs at least one key/value row")

        # (N, C) -> (h, N, d_head)
        q = self.w_q(queries).view(n, self.num_heads, self.d_head).transpose(0, 1)
        k = self.w_k(memory).view(m, self.num_heads, self.d_head).transpose(0, 1)
        v = self.w_v(memory).view(m, self.num_heads, self.d_head).transpose(0, 1)

        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.d_head)
        attention = _check_finite(scores.softmax(dim=-1), "cross-attention softmax")

        out = (attention @ v).transpose(0, 1).reshape(n, self.c_dim)
        return _check_finite(out, "cross-attention"), attention.mean(dim=0)


class SelfAttention(nn.Module):
    """Multi-head self-attention over the region tokens of one image."""

    def __init__(self, c_dim: int, num_heads: int):
        super().__init__()
        self.c_dim = c_dim
        self.num_heads = num_heads
        self.d_head = c_dim // num_heads
        self.w_q = nn.Linear(c_dim, c_dim)
        self.w_k = nn.Linear(c_dim, c_dim, bias=False)
        self.w_v = nn.Linear(c_dim, c_dim)
        self.w_o = nn.Linear(c_dim, c_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n = x.shape[0]
        q = self.w_q(x).view(n, self.num_heads, self.d_head).transpose(0, 1)
        k = self.w_k(x).view(n, self.num_heads, self.d_head).transpose(0, 1)
        v = self.w_v(x).view(n, self.num_heads, self.d_head).transpose(0, 1)
        attention = ((q @ k.transpose(-2, -1)) / math.sqrt(self.d_head)).softmax(dim=-1)
        out = (attention @ v).transpose(0, 1).reshape(n, self.c_dim)
        return self.w_o(out)


class FeedForward(nn.Module):
    def __init__(self, c_dim: int, expansion: int):
        super().__init__()
        self.fc1 = nn.Linear(c_dim, c_dim * expansion)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(c_dim * expansion, c_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class FusionBlock(nn.Module):
    """Pre-norm [self-attention -> cross-attention -> feed-forward], each residual."""

    def __init__(self, config: FusionConfig, kv_dim: int):
        super().__init__()
        self.use_self_attention = config.use_self_attention
        if config.use_self_attention:
            self.norm_self = nn.LayerNorm(config.c_dim)
            self.self_attn = SelfAttention(config.c_dim, config.num_heads)
        self.norm_cross = nn.LayerNorm(config.c_dim)
        self.cross_attn = CrossAttention(config.c_dim, kv_dim, config.num_heads)
        self.norm_ffn = nn.LayerNorm(config.c_dim)
        self.ffn = FeedForward(config.c_dim, config.ffn_expansion)

    def forward(self, x: torch.Tensor, memory: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if self.use_self_attention:
            x = x + self.self_attn(self.norm_self(x))
        attended, weights = self.cross_attn(self.norm_cross(x), memory)
        x = x + attended
        x = x + self.ffn(self.norm_ffn(x))
        return x, weights


class RegionSpotFusion(nn.Module):
    """Projector plus the block stack."""

    def __init__(self, config: FusionConfig, d_loc: int, d_vil: int):
        super().__init__()
        self.config = config
        self.d_loc = d_loc
        self.d_vil = d_vil
        self.projector = nn.Linear(d_loc, config.c_dim)
        self.blocks = nn.ModuleList([FusionBlock(config, d_vil) for _ in range(config.depth)])
        self.final_norm = nn.LayerNorm(config.c_dim)

    @property
    def dtype(self) -> torch.dtype:
        return self.projector.weight.dtype

    def reset_parameters(self, seed: int) -> None:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, unit norm gains."""
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, nn.Linear):
                    bound = 1.0 / math.sqrt(module.in_features)
                    module.weight.copy_(
                        torch.empty(module.weight.shape, dtype=torch.float32).uniform_(
                            -bound, bound, generator=generator
                        )
                    )
                    if module.bias is not None:
                        module.bias.zero_()
                elif isinstance(module, nn.LayerNorm):
                    module.weight.fill_(1.0)
                    module.bias.zero_()

    def build_memory(self, feature_map: SemanticFeatureMap) -> torch.Tensor:
        """Key/value rows: grid tokens, plus the class token when configured."""
        feature_map.validate()
        rows = feature_map.grid_tokens
        if self.config.use_class_token:
            rows = np.concatenate([rows, feature_map.class_token[None, :]], axis=0)
        if rows.shape[1] != self.d_vil:
            raise ShapeError("Feature map width does not match the fusion key/value width",
                             expected=self.d_vil, actual=int(rows.shape[1]))
        return torch.as_tensor(rows, dtype=self.dtype)

    def forward(
        self, position_tokens: torch.Tensor, memory: torch.Tensor
    ) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        if position_tokens.shape[-1] != self.d_loc:
            raise ShapeError("Position-aware token width does not match the projector",
                             expected=self.d_loc, actual=int(position_tokens.shape[-1]))
        x = _check_finite(self.projector(position_tokens), "projector")
        attention: List[torch.Tensor] = []
        if x.shape[0] == 0:
            return x, attention
        for block in self.blocks:
            x, weights = block(x, memory)
            attention.append(weights)
        return _check_finite(self.final_norm(x), "fusion output"), attention


# =============================================================================
# OPERATIONS
# =============================================================================

def init_fusion_parameters(config: FusionConfig, seed: int, d_loc: int, d_vil: int) -> RegionSpotFusion:
    """Build a fusion module with deterministic seeded weights."""
    fusion = RegionSpotFusion(config, d_loc=d_loc, d_vil=d_vil)
    fusion.reset_parameters(seed)
    return fusion


def project_position_tokens(tokens: PositionAwareTokenSet, projector: nn.Linear) -> torch.Tensor:
    """Apply the projector row-wise; N = 0 gives a 0 x C result."""
    width = int(tokens.tokens.shape[1]) if tokens.tokens.ndim == 2 else -1
    if width != projector.in_features:
        raise ShapeError("Position-aware token width does not match the projector",
                         expected=projector.in_features, actual=width)
    if not np.all(np.isfinite(tokens.tokens)):
        raise InvalidInputError("Position-aware tokens are not finite")
    return projector(torch.as_tensor(tokens.tokens, dtype=projector.weight.dtype))


def cross_attention(
    queries: torch.Tensor,
    feature_map: SemanticFeatureMap,
    attention: CrossAttention,
    use_class_token: bool,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Run a free-standing CrossAttention layer on a feature map; returns (output, head-averaged weights)."""
    feature_map.validate()
    rows = feature_map.grid_tokens
    if use_class_token:
        rows = np.concatenate([rows, feature_map.class_token[None, :]], axis=0)
    if not torch.isfinite(queries).all():
        raise InvalidInputError("Queries are not finite")
    memory = torch.as_tensor(rows, dtype=attention.w_k.weight.dtype)
    return attention(queries, memory)


def fusion_forward(
    fusion: RegionSpotFusion,
    tokens: PositionAwareTokenSet,
    feature_map: SemanticFeatureMap,
    return_attention: bool = False,
) -> Tuple[RegionSemanticTokens, Optional[List[AttentionRecord]]]:
    """
    Run the fusion head on one image without tracking gradients.

    Args:
        fusion: Fusion module
        tokens: Position-aware tokens of the image's boxes
        feature_map: Semantic feature map of the same image
        return_attention: Also return one AttentionRecord per block

    Returns:
        (region semantic tokens, attention records or None)
    """
    with torch.no_grad():
        memory = fusion.build_memory(feature_map)
        out, weights = fusion(torch.as_tensor(tokens.tokens, dtype=fusion.dtype), memory)

    records = None
    if return_attention:
        records = [
            AttentionRecord(
                weights=w.double().numpy(),
                layer_index=index,
                includes_class_token=fusion.config.use_class_token,
            )
            for index, w in enumerate(weights)
        ]
    return RegionSemanticTokens(tokens=out.numpy()), records


def parameter_checksum(module: nn.Module) -> str:
    """sha256 over parameter names and float32 bytes, in state-dict order."""
    digest = hashlib.sha256()
    for name, value in module.state_dict().items():
        digest.update(name.encode("utf-8"))
        digest.update(value.detach().to(torch.float32).contiguous().numpy().tobytes())
    return digest.hexdigest()
