"""
regionspot/models/alignment.py - Region-Text Alignment

Dot-product matching between L2-normalized region tokens and unit text embeddings,
sigmoid focal-loss supervision, and ranked label prediction.
"""

import warnings
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from regionspot.core.exceptions import RangeError, ShapeError
from regionspot.models.encoders import TextEmbeddingTable
from regionspot.models.fusion import RegionSemanticTokens


class EmptyBatchWarning(RuntimeWarning):
    """Focal loss was asked to reduce over zero regions."""


@dataclass
class MatchingScores:
    """Region x category logits and the scale that produced them."""

    logits: np.ndarray
    temperature: float


@dataclass
class RegionTargets:
    """N x K multi-hot targets; all-zero rows mark background regions."""

    matrix: np.ndarray

    @classmethod
    def from_indices(cls, indices: Sequence[int], num_categories: int) -> "RegionTargets":
        return cls(build_targets(indices, num_categories).numpy())


def build_targets(indices: Sequence[int], num_categories: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """One positive per row; index -1 leaves the row empty."""
    targets = torch.zeros((len(indices), num_categories), dtype=dtype)
    for row, index in enumerate(indices):
        if index >= num_categories:
            raise RangeError("Target index outside the vocabulary",
                             details={"row": row, "index": int(index), "vocabulary_size": num_categories})
        if index >= 0:
            targets[row, index] = 1.0
    return targets


def matching_logits(
    tokens: torch.Tensor, embeddings: torch.Tensor, temperature: Union[torch.Tensor, float]
) -> torch.Tensor:
    """temperature * <normalized token, embedding>, differentiable."""
    if tokens.shape[-1] != embeddings.shape[-1]:
        raise ShapeError("Region token width does not match text embedding width",
                         expected=int(embeddings.shape[-1]), actual=int(tokens.shape[-1]))
    return temperature * (F.normalize(tokens, dim=-1, eps=1e-12) @ embeddings.transpose(0, 1))


def matching_scores(
    tokens: RegionSemanticTokens, table: TextEmbeddingTable, temperature: float
) -> MatchingScores:
    """Numpy-facing wrapper over matching_logits."""
    logits = matching_logits(
        torch.as_tensor(tokens.tokens, dtype=torch.float64),
        torch.as_tensor(table.embeddings, dtype=torch.float64),
        float(temperature),
    )
    return MatchingScores(logits=logits.numpy(), temperature=float(temperature))


def focal_loss(
    scores: Union[MatchingScores, torch.Tensor],
    targets: Union[RegionTargets, torch.Tensor],
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> torch.Tensor:
    """
    Sigmoid focal loss, mean over all N x K elements.

    FL(p_t) = -alpha_t (1 - p_t)^gamma log(p_t) with p = sigmoid(logit). log(p_t) comes from
    binary_cross_entropy_with_logits so saturated logits stay finite. Zero regions give 0
    and an EmptyBatchWarning.
    """
    logits = torch.as_tensor(scores.logits) if isinstance(scores, MatchingScores) else scores
    target = torch.as_tensor(targets.matrix) if isinstance(targets, RegionTargets) else targets
    target = target.to(logits.dtype)
    if logits.shape != target.shape:
        raise ShapeError("Logits and targets disagree", expected=list(target.shape), actual=list(logits.shape))

    if logits.numel() == 0:
        warnings.warn("focal loss over an empty batch is defined as 0", EmptyBatchWarning, stacklevel=2)
        return logits.sum() * 0.0

    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, target, reduction="none")
    p_t = p * target + (1 - p) * (1 - target)
    alpha_t = alpha * target + (1 - alpha) * (1 - target)
    loss = alpha_t * ce * ((1 - p_t) ** gamma)
    return loss.mean()


def predict_labels(
    scores: Union[MatchingScores, np.ndarray], names: Sequence[str], top_k: int
) -> List[List[Tuple[str, float]]]:
    """
    Ranked (name, probability) lists per region.

    Ranks by logit with a stable sort, so ties resolve to the lower category index.
    """
    logits = scores.logits if isinstance(scores, MatchingScores) else np.asarray(scores)
    if logits.ndim != 2 or logits.shape[1] != len(names):
        raise ShapeError("Logit columns do not match category names",
                         expected=len(names), actual=list(logits.shape))
    if top_k < 0 or top_k > len(names):
        raise RangeError("top_k exceeds the vocabulary size", details={"top_k": top_k, "vocabulary": len(names)})

    probabilities = torch.sigmoid(torch.as_tensor(logits, dtype=torch.float64)).numpy()
    order = np.argsort(-logits, axis=1, kind="stable")[:, :top_k]
    return [
        [(names[k], float(probabilities[row, k])) for k in order[row]]
        for row in range(logits.shape[0])
    ]
