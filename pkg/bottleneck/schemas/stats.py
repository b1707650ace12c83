from typing import Optional

from pydantic import BaseModel


class InvocationStats(BaseModel):
    """
    Mean cosine distance between pre- and post-rewrite rows of one invocation.

    Group means cover only touched rows; a group with no rows is None.
    """

    invocation: int
    key_recalled: Optional[float]
    key_recent: Optional[float]
    key_all: Optional[float]
    value_recalled: Optional[float]
    value_recent: Optional[float]
    value_all: Optional[float]
    n_recalled: int
    n_recent: int
    zero_norm: int = 0


class HeadStats(BaseModel):
    layer: int
    head: int
    key_distance: float
    value_distance: float
    count: int


class EvalRecord(BaseModel):
    index: int
    problem_id: str
    tokens: list[int]
    completion: list[int]
    invocations: int
    predicted: str
    gold: str
    correct: bool


class EvalSummary(BaseModel):
    examples: int
    correct: int
    accuracy: Optional[float]
    next_step_ce: Optional[float] = None


class SweepPoint(BaseModel):
    axis: str
    value: int
    seed: int
    status: str
    accuracy: Optional[float] = None
    next_step_ce: Optional[float] = None
    epoch: Optional[int] = None
    error: Optional[str] = None


class DPIReport(BaseModel):
    mutual_information: list[float]
    margins: list[tuple[int, int, float]]
    violations: list[tuple[int, int, float]]

    @property
    def ok(self) -> bool:
        return not self.violations


class BoundsReport(BaseModel):
    likelihood: float
    bound_1: float
    bound_2: float
    bound_avg: float
    margin_1: float
    margin_2: float
    margin_avg: float
    degenerate: bool
    encoder_identity_gap: float
    violations: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations


class IBSuiteReport(BaseModel):
    seed: int
    dpi_trials: int
    bound_trials: int
    dpi_violations: int
    bound_violations: int
    degenerate_models: int
    min_dpi_margin: Optional[float]
    min_bound_margin: Optional[float]
    dpi: list[DPIReport]
    bounds: list[BoundsReport]

    @property
    def ok(self) -> bool:
        return self.dpi_violations == 0 and self.bound_violations == 0
