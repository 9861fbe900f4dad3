import csv
import io
import json
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field, model_validator

CSV_COLUMNS = ("tag", "tier", "direction", "r1", "r5", "r25", "mrr", "mr")
CONFIG_PREFIX = "# config: "


class AlignmentRecord(BaseModel):
    note_index: int = Field(..., ge=0)
    x: float
    y: float
    onset_frame: int = Field(..., ge=0)


class ReportRow(BaseModel):
    """One line of a study report; recall values are percentages."""
    tag: str
    tier: str = "clean"
    direction: str = "audio-to-sheet"
    r1: float = Field(..., ge=0, le=100)
    r5: float = Field(..., ge=0, le=100)
    r25: float = Field(..., ge=0, le=100)
    mrr: float = Field(..., gt=0, le=1)
    mr: int = Field(..., ge=1)

    @model_validator(mode="after")
    def check_recall_order(self):
        if not (self.r1 <= self.r5 + 1e-9 and self.r5 <= self.r25 + 1e-9):
            raise ValueError("recall must be non-decreasing in k")
        if self.mrr + 1e-9 < self.r1 / 100.0:
            raise ValueError("MRR cannot be below R@1")
        return self

    @classmethod
    def from_metrics(cls, tag: str, tier: str, direction: str, metrics) -> "ReportRow":
        return cls(tag=tag, tier=tier, direction=direction,
                   r1=100.0 * metrics.r1, r5=100.0 * metrics.r5, r25=100.0 * metrics.r25,
                   mrr=metrics.mrr, mr=metrics.mr)


class StudyReport(BaseModel):
    study: str
    note: str = ""
    config: Dict[str, Any]
    seeds: List[int]
    rows: List[ReportRow]
    per_seed: Dict[str, List[ReportRow]] = {}

    def to_csv(self) -> str:
        output = io.StringIO()
        output.write(CONFIG_PREFIX + json.dumps({"study": self.study, "seeds": self.seeds,
                                                 "config": self.config}, sort_keys=True) + "\n")
        writer = csv.writer(output, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in self.rows:
            writer.writerow([getattr(row, column) for column in CSV_COLUMNS])
        return output.getvalue()

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)

    @classmethod
    def rows_from_csv(cls, text: str) -> List[ReportRow]:
        lines = [line for line in text.splitlines() if not line.startswith("#")]
        return [ReportRow(**record) for record in csv.DictReader(lines)]


class EpochRecord(BaseModel):
    epoch: int = Field(..., ge=0)
    regime: str
    loss: float
    val_mrr: Optional[float] = None
    lr: float
    seconds: float


class TrainHistory(BaseModel):
    regime: str
    seed: int
    initial_val_mrr: Optional[float] = None
    epochs: List[EpochRecord] = []
    best_epoch: Optional[int] = None
    checkpoint: Optional[str] = None

    @property
    def losses(self) -> List[float]:
        return [record.loss for record in self.epochs]

    def to_jsonl(self) -> str:
        return "".join(record.model_dump_json() + "\n" for record in self.epochs)


class RankingEntry(BaseModel):
    piece_id: str
    score: float


class IdentificationReport(BaseModel):
    query_id: str
    method: str
    ranking: List[RankingEntry]
    rank_of_truth: Optional[int] = None
