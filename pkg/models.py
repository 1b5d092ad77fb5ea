"""
This file defines the database models of the run-results store using SQLAlchemy.
It includes models for experiments (a named configuration run over one dataset) and
the results of each finished training run, which the ablation sweeps aggregate over seeds.
"""

from datetime import datetime
from pathlib import Path
from typing import Union

from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, String, Text, create_engine
from sqlalchemy.orm import declarative_base, relationship, sessionmaker

# Base class of every table of the results store
Base = declarative_base()

RESULTS_DB = "results.db"


class Experiment(Base):
    """
    Represents one named experiment: a configuration applied to a dataset.
    An ablation sweep creates one experiment per arm, named after the axis and value.
    """
    __tablename__ = 'experiments'
    id = Column(Integer, primary_key=True, autoincrement=True)
    name = Column(String(128), nullable=False, unique=True)
    created_at = Column(DateTime, default=datetime.utcnow, nullable=False)
    dataset_path = Column(String(512), nullable=False)
    config_json = Column(Text, nullable=False)  # effective TrainConfig of the first run

    # Ablation bookkeeping, empty for plain `train` runs
    axis = Column(String(32))
    arm = Column(String(64))

    runs = relationship('RunResult', back_populates='experiment', lazy=True,
                        cascade='all, delete-orphan')

    def serialize(self):
        """Converts the model instance to a dictionary for JSON serialisation"""
        return {
            "id": self.id,
            "name": self.name,
            "created_at": self.created_at.isoformat() if self.created_at else None,
            "dataset_path": self.dataset_path,
            "axis": self.axis,
            "arm": self.arm,
            "runs": [run.serialize() for run in self.runs],
        }


class RunResult(Base):
    """
    Stores the outcome of one training run (one seed of an experiment).
    status is "finished" or "diverged"; diverged runs keep a null mAP.
    """
    __tablename__ = 'run_results'
    id = Column(Integer, primary_key=True, autoincrement=True)
    experiment_id = Column(Integer, ForeignKey('experiments.id'), nullable=False)
    seed = Column(Integer, nullable=False)
    strategy = Column(String(32), nullable=False)
    labeled_fraction = Column(Float, nullable=False)
    status = Column(String(16), nullable=False, default="finished")

    # Validation mask-AP in [0, 1]
    final_map = Column(Float)
    best_map = Column(Float)
    best_iteration = Column(Integer)
    iterations = Column(Integer, nullable=False, default=0)
    skipped_steps = Column(Integer, nullable=False, default=0)
    run_dir = Column(String(512), nullable=False)
    finished_at = Column(DateTime, default=datetime.utcnow, nullable=False)

    experiment = relationship('Experiment', back_populates='runs')

    def serialize(self):
        """Converts the model instance to a dictionary for JSON serialisation"""
        return {
            "id": self.id,
            "experiment_id": self.experiment_id,
            "seed": self.seed,
            "strategy": self.strategy,
            "labeled_fraction": self.labeled_fraction,
            "status": self.status,
            "final_map": self.final_map,
            "best_map": self.best_map,
            "best_iteration": self.best_iteration,
            "iterations": self.iterations,
            "skipped_steps": self.skipped_steps,
            "run_dir": self.run_dir,
        }


def open_results_store(output_dir: Union[str, Path]):
    """
    Opens (and creates if needed) the results database of an output directory.

    Returns:
        sessionmaker: Session factory bound to `<output_dir>/results.db`.
    """

    db_path = Path(output_dir).resolve() / RESULTS_DB
    db_path.parent.mkdir(parents=True, exist_ok=True)

    engine = create_engine(f'sqlite:///{db_path}', future=True)
    Base.metadata.create_all(engine)

    return sessionmaker(bind=engine, future=True, expire_on_commit=False)


def get_or_create_experiment(session, name: str, dataset_path: str, config_json: str,
                             axis: str = None, arm: str = None) -> Experiment:
    experiment = session.query(Experiment).filter_by(name=name).one_or_none()

    if experiment is None:
        experiment = Experiment(name=name, dataset_path=dataset_path, config_json=config_json,
                                axis=axis, arm=arm)
        session.add(experiment)
        session.flush()

    return experiment


def record_run(session, experiment: Experiment, report: dict, run_dir: Union[str, Path],
               status: str = "finished") -> RunResult:
    """
    Adds or replaces the result of (experiment, seed) from a run's final report.
    Re-running a seed with --overwrite therefore never duplicates rows.
    """

    seed = int(report["seed"])
    session.query(RunResult).filter_by(experiment_id=experiment.id, seed=seed).delete()

    result = RunResult(
        experiment_id=experiment.id,
        seed=seed,
        strategy=report["strategy"],
        labeled_fraction=float(report["labeled_fraction"]),
        status=status,
        final_map=report.get("final_map"),
        best_map=report.get("best_map"),
        best_iteration=report.get("best_iteration"),
        iterations=int(report.get("iterations", 0)),
        skipped_steps=int(report.get("skipped_steps", 0)),
        run_dir=str(run_dir),
    )
    session.add(result)

    return result
