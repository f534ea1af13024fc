"""
regionspot/schema.py - Pydantic Models for File Formats

Defines every JSON / JSON-lines document the toolkit reads or writes.
"""

from typing import Dict, List, Optional, Union

from pydantic import BaseModel, Field, field_validator


# =============================================================================
# INPUT DOCUMENTS
# =============================================================================

class ProposalLine(BaseModel):
    """One external region proposal; bbox is normalized [x1, y1, x2, y2]."""

    image_id: str = Field(..., description="Image identifier (COCO ids are stringified)")
    bbox: List[float] = Field(..., min_length=4, max_length=4, description="Normalized x1, y1, x2, y2")
    score: float = Field(1.0, ge=0.0, le=1.0, description="Proposal objectness")
    source: Optional[str] = Field(None, description="Generator tag, e.g. 'gt' or 'rpn'")

    @field_validator("image_id", mode="before")
    @classmethod
    def _stringify_id(cls, value: Union[str, int]) -> str:
        return str(value)


class BoxesFile(BaseModel):
    """Boxes for the attn and infer commands when no proposals file is used."""

    boxes: List[List[float]] = Field(..., description="Normalized [x1, y1, x2, y2] per box")


# =============================================================================
# OUTPUT DOCUMENTS
# =============================================================================

class TrainLogEntry(BaseModel):
    """One line of train_log.jsonl."""

    iter: int = Field(..., ge=0, description="Stage-relative iteration")
    loss: float
    lr: float
    stage: int = Field(..., ge=0)


class LabelScore(BaseModel):
    category: str
    score: float


class PredictionLine(BaseModel):
    """One region of predictions.jsonl."""

    image_id: str
    box_index: int = Field(..., ge=0)
    box: List[float] = Field(..., min_length=4, max_length=4)
    objectness: float = Field(1.0, ge=0.0, le=1.0)
    top: List[LabelScore] = Field(default_factory=list)

    @field_validator("image_id", mode="before")
    @classmethod
    def _stringify_id(cls, value: Union[str, int]) -> str:
        return str(value)


class CategoryResult(BaseModel):
    name: str
    ap: float = Field(..., ge=0.0, le=1.0)
    bucket: str = Field(..., pattern="^[rcf]$")
    gt_instances: int
    train_instances: int
    in_vocabulary: bool = True


class EvalReport(BaseModel):
    """Recognition metrics; AP values are fractions, display multiplies by 100."""

    mode: str
    per_category: List[CategoryResult] = Field(default_factory=list)
    ap_r: Optional[float] = Field(None, description="None when the bucket is empty")
    ap_c: Optional[float] = None
    ap_f: Optional[float] = None
    map: float = 0.0
    num_regions: int = 0
    num_images: int = 0
    thresholds: Dict[str, float] = Field(default_factory=dict)
    missing_categories: List[str] = Field(default_factory=list, description="GT categories absent from the vocabulary")

    @property
    def ap_per_category(self) -> Dict[str, float]:
        return {result.name: result.ap for result in self.per_category}

    def bucket_members(self) -> Dict[str, List[str]]:
        members: Dict[str, List[str]] = {"r": [], "c": [], "f": []}
        for result in self.per_category:
            members[result.bucket].append(result.name)
        return members
