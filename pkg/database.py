import datetime
import json
import logging
import os

import pandas as pd
from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, String, Text, create_engine, inspect
from sqlalchemy.orm import declarative_base, relationship, sessionmaker

from errors import PrerequisiteError

logger = logging.getLogger(__name__)

# Registry URL from the environment, else a SQLite file under the data root
REGISTRY_URL_ENV = "BIMOT_REGISTRY_URL"

Base = declarative_base()


# Define models
class Run(Base):
    """RunManifest: one CLI invocation that produces artifacts"""
    __tablename__ = 'runs'

    id = Column(Integer, primary_key=True)
    command = Column(String(40), index=True)
    seed = Column(Integer)
    version = Column(String(40))
    config_paths = Column(Text)
    output_dir = Column(String(255))
    started_at = Column(DateTime)
    finished_at = Column(DateTime, nullable=True)
    status = Column(String(20))

    checkpoints = relationship("Checkpoint", back_populates="run")

    def to_dict(self):
        return {
            'id': self.id,
            'command': self.command,
            'seed': self.seed,
            'version': self.version,
            'config_paths': json.loads(self.config_paths or "{}"),
            'output_dir': self.output_dir,
            'started_at': self.started_at,
            'finished_at': self.finished_at,
            'status': self.status,
        }


class Checkpoint(Base):
    __tablename__ = 'checkpoints'

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey('runs.id'), index=True)
    kind = Column(String(20), index=True)
    path = Column(String(255))
    step = Column(Integer)
    val_metric = Column(Float, nullable=True)
    created_at = Column(DateTime)

    run = relationship("Run", back_populates="checkpoints")

    def to_dict(self):
        return {
            'id': self.id,
            'run_id': self.run_id,
            'kind': self.kind,
            'path': self.path,
            'step': self.step,
            'val_metric': self.val_metric,
            'created_at': self.created_at,
        }


def _now():
    return datetime.datetime.now(datetime.timezone.utc).replace(tzinfo=None)


def version_string():
    """git-describe-style version of the installed package"""
    try:
        from importlib.metadata import version
        return f"v{version('bimot')}"
    except Exception:
        return "v0.1.0-dev"


class RunRegistry:
    """Run manifests and checkpoint provenance in one SQL database"""

    def __init__(self, db_path=None, url=None):
        url = url or os.environ.get(REGISTRY_URL_ENV) or f"sqlite:///{os.path.abspath(db_path)}"
        if db_path:
            os.makedirs(os.path.dirname(os.path.abspath(db_path)), exist_ok=True)
        self.engine = create_engine(url)
        self.Session = sessionmaker(bind=self.engine, expire_on_commit=False)
        self.setup()

    def setup(self):
        # Create tables on first use
        if not inspect(self.engine).has_table('runs'):
            logger.info("Initializing run registry at %s", self.engine.url)
            Base.metadata.create_all(self.engine)

    def start_run(self, command, seed, config_paths=None, output_dir=None, manifest_dir=None):
        """Record the RunManifest before any work starts; returns the run id"""
        session = self.Session()
        run = Run(
            command=command,
            seed=seed,
            version=version_string(),
            config_paths=json.dumps(config_paths or {}, sort_keys=True),
            output_dir=output_dir,
            started_at=_now(),
            status='running',
        )
        session.add(run)
        session.commit()
        run_id = run.id
        manifest = run.to_dict()
        session.close()
        if manifest_dir:
            os.makedirs(manifest_dir, exist_ok=True)
            with open(os.path.join(manifest_dir, f"run_{run_id:05d}.json"), "w", encoding="utf-8") as fh:
                json.dump(manifest, fh, indent=2, default=str)
        logger.info("Run %d started: %s (seed %s)", run_id, command, seed)
        return run_id

    def finish_run(self, run_id, status='finished'):
        session = self.Session()
        run = session.query(Run).filter_by(id=run_id).first()
        if run:
            run.status = status
            run.finished_at = _now()
            session.commit()
        session.close()
        return run is not None

    def record_checkpoint(self, run_id, kind, path, step=0, val_metric=None):
        session = self.Session()
        checkpoint = Checkpoint(
            run_id=run_id,
            kind=kind,
            path=os.path.abspath(path),
            step=step,
            val_metric=val_metric,
            created_at=_now(),
        )
        session.add(checkpoint)
        session.commit()
        session.close()
        return True

    def latest_checkpoint(self, kind):
        """Most recent checkpoint row of ``kind`` whose file still exists"""
        session = self.Session()
        rows = session.query(Checkpoint).filter_by(kind=kind).order_by(Checkpoint.id.desc()).all()
        session.close()
        for row in rows:
            if os.path.exists(row.path):
                return row.to_dict()
        return None

    def require_checkpoint(self, kind, fallback_path=None, hint=None):
        """Path of the latest ``kind`` checkpoint; PrerequisiteError when none exists"""
        row = self.latest_checkpoint(kind)
        if row:
            return row['path']
        if fallback_path and os.path.exists(fallback_path):
            return fallback_path
        message = f"no '{kind}' checkpoint found"
        raise PrerequisiteError(f"{message}; {hint}" if hint else message)

    def get_runs(self):
        session = self.Session()
        runs = [r.to_dict() for r in session.query(Run).order_by(Run.id).all()]
        session.close()
        return pd.DataFrame(runs)

    def get_checkpoints(self, kind=None):
        session = self.Session()
        query = session.query(Checkpoint)
        if kind:
            query = query.filter_by(kind=kind)
        rows = [c.to_dict() for c in query.order_by(Checkpoint.id).all()]
        session.close()
        return pd.DataFrame(rows)
