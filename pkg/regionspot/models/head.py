"""
regionspot/models/head.py - Trainable RegionSpot Head

Fusion module plus the alignment logit scale. Everything trainable in the system
lives here; the encoders stay outside the module graph.
"""

from typing import List, Sequence, Tuple

import torch
import torch.nn as nn

from regionspot.models.alignment import matching_logits
from regionspot.models.fusion import FusionConfig, RegionSpotFusion


class RegionSpotHead(nn.Module):
    """Fusion blocks and the region-text temperature."""

    def __init__(
        self,
        config: FusionConfig,
        d_loc: int,
        d_vil: int,
        temperature_init: float = 14.3,
        learn_temperature: bool = True,
        seed: int = 0,
    ):
        super().__init__()
        self.fusion = RegionSpotFusion(config, d_loc=d_loc, d_vil=d_vil)
        self.fusion.reset_parameters(seed)
        self.logit_scale = nn.Parameter(
            torch.tensor(float(temperature_init), dtype=torch.float32), requires_grad=learn_temperature
        )

    @property
    def config(self) -> FusionConfig:
        return self.fusion.config

    def forward(
        self, position_tokens: torch.Tensor, memory: torch.Tensor, text_embeddings: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor, List[torch.Tensor]]:
        """Returns (logits N x K, region tokens N x C, per-block attention)."""
        tokens, attention = self.fusion(position_tokens, memory)
        logits = matching_logits(tokens, text_embeddings.to(tokens.dtype), self.logit_scale)
        return logits, tokens, attention

    def forward_batch(
        self, images: Sequence[Tuple[torch.Tensor, torch.Tensor]], text_embeddings: torch.Tensor
    ) -> List[torch.Tensor]:
        """Logits per image for (position tokens, memory) pairs sharing one vocabulary."""
        return [self(tokens, memory, text_embeddings)[0] for tokens, memory in images]

    def trainable_parameter_count(self) -> int:
        return int(sum(p.numel() for p in self.parameters() if p.requires_grad))
