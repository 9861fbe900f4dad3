from datetime import datetime

from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, String, Text
from sqlalchemy.orm import relationship

from a2s.database import Base


class StudyRun(Base):
    __tablename__ = "study_runs"

    id = Column(Integer, primary_key=True, index=True)
    created = Column(DateTime, default=datetime.utcnow, nullable=False, index=True)
    study = Column(String, nullable=False, index=True)
    seeds = Column(String, nullable=False)
    config_json = Column(Text, nullable=False)

    rows = relationship("ReportRecord", back_populates="run", cascade="all, delete-orphan",
                        order_by="ReportRecord.id")

    def to_dict(self):
        return {
            "id": self.id,
            "created": self.created.isoformat() if self.created else None,
            "study": self.study,
            "seeds": self.seeds,
            "rows": len(self.rows),
        }


class ReportRecord(Base):
    __tablename__ = "report_rows"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("study_runs.id"), nullable=False, index=True)
    tag = Column(String, nullable=False, index=True)
    tier = Column(String, nullable=False)
    direction = Column(String, nullable=False)
    r1 = Column(Float, nullable=False)
    r5 = Column(Float, nullable=False)
    r25 = Column(Float, nullable=False)
    mrr = Column(Float, nullable=False)
    mr = Column(Integer, nullable=False)

    run = relationship("StudyRun", back_populates="rows")

    def to_dict(self):
        return {
            "tag": self.tag,
            "tier": self.tier,
            "direction": self.direction,
            "r1": self.r1,
            "r5": self.r5,
            "r25": self.r25,
            "mrr": self.mrr,
            "mr": self.mr,
        }
