from contextlib import contextmanager

from sqlalchemy import create_engine
from sqlalchemy.orm import declarative_base, sessionmaker, Session

from a2s import settings

Base = declarative_base()

_engines = {}


def get_engine(url: str = None):
    url = url or settings.DATABASE_URL
    if url not in _engines:
        # Add check_same_thread=False for SQLite
        connect_args = {"check_same_thread": False} if url.startswith("sqlite") else {}
        _engines[url] = create_engine(url, connect_args=connect_args)
    return _engines[url]


@contextmanager
def get_db(url: str = None):
    engine = get_engine(url)
    init_db(engine)
    db: Session = sessionmaker(autocommit=False, autoflush=False, bind=engine)()
    try:
        yield db
    finally:
        db.close()


def init_db(engine=None):
    from a2s.models import run  # noqa: F401  registers the tables
    Base.metadata.create_all(bind=engine or get_engine())
