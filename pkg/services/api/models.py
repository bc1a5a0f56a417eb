from enum import Enum
from typing import Dict, List, Optional

from pydantic import BaseModel, Field


class RunStatus(str, Enum):
    SYNTHESIZED = "synthesized"  # dataset only
    TRAINED = "trained"  # checkpoints, no evaluation yet
    EVALUATED = "evaluated"


class RunSummary(BaseModel):
    run_id: str = Field(..., description="Run directory name")
    config_hash: str = Field(..., description="SHA-256 of the resolved config")
    status: RunStatus
    models: List[str] = Field(default_factory=list, description="Checkpointed model names")


class RunDetail(RunSummary):
    split: str = Field(default="test", description="Split the reports were computed on")
    checkpoints: Dict[str, str] = Field(default_factory=dict)
    csvs: Dict[str, str] = Field(default_factory=dict)
    params: Dict[str, int] = Field(default_factory=dict)


class ModelMetrics(BaseModel):
    model: str
    params: int = 0
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    log10: float
    d1: float
    d2: float
    d3: float
    cap_min: float
    cap_max: float
    valid_count: int


class RangeRow(BaseModel):
    model: str
    cap_min: float
    cap_max: float
    rmse: Optional[float] = None  # empty band
    rmse_std: Optional[float] = None  # spread of per-image RMSE
    valid_count: int


class RunMetrics(BaseModel):
    run_id: str
    split: str
    metrics: List[ModelMetrics] = Field(default_factory=list)
    ranges: List[RangeRow] = Field(default_factory=list)
