import csv
import io
import json
import logging
from datetime import datetime
from typing import List, Optional

from sqlalchemy import desc
from sqlalchemy.orm import Session

from a2s.errors import ArgumentError
from a2s.models.run import ReportRecord, StudyRun
from a2s.schemas.report import CSV_COLUMNS, StudyReport

logger = logging.getLogger(__name__)


def save_report(db: Session, report: StudyReport) -> StudyRun:
    """Record a finished study and its median rows"""
    try:
        logger.info(f"Saving {report.study} report: {len(report.rows)} rows, seeds={report.seeds}")
        run = StudyRun(
            study=report.study,
            seeds=",".join(str(s) for s in report.seeds),
            config_json=json.dumps(report.config, sort_keys=True),
            created=datetime.utcnow(),
        )
        for row in report.rows:
            run.rows.append(ReportRecord(**row.model_dump()))
        db.add(run)
        db.commit()
        db.refresh(run)
        logger.info(f"Study run saved with ID: {run.id}")
        return run
    except Exception as e:
        db.rollback()
        logger.error(f"Failed to save study run: {str(e)}", exc_info=True)
        raise


def list_runs(db: Session, study: Optional[str] = None, limit: int = 50) -> List[StudyRun]:
    """Most recent runs first, optionally for one study"""
    logger.info(f"Listing runs: study={study}, limit={limit}")
    query = db.query(StudyRun)
    if study:
        query = query.filter(StudyRun.study == study)
    return query.order_by(desc(StudyRun.created), desc(StudyRun.id)).limit(limit).all()


def get_run(db: Session, run_id: int) -> StudyRun:
    run = db.query(StudyRun).filter(StudyRun.id == run_id).first()
    if not run:
        logger.warning(f"Run not found: {run_id}")
        raise ArgumentError(f"Run {run_id} not found")
    return run


def export_run_csv(db: Session, run_id: int) -> str:
    """The stored rows of one run in the study CSV layout"""
    run = get_run(db, run_id)
    output = io.StringIO()
    writer = csv.writer(output, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for record in run.rows:
        data = record.to_dict()
        writer.writerow([data[column] for column in CSV_COLUMNS])
    logger.info(f"Exported {len(run.rows)} rows of run {run_id}")
    return output.getvalue()
