"""Opt-in MLflow run wrapper used by the CLI and pipeline runners."""
import contextlib
import os

import mlflow


@contextlib.contextmanager
def tracked_run(enabled, run_name, tracking_uri=None, experiment=None):
    """Open an MLflow run when tracking is enabled, otherwise do nothing.

    Trainers check ``mlflow.active_run()`` before logging, so code inside an
    untracked block stays offline.
    """
    if not enabled:
        yield None
        return
    try:
        if tracking_uri:
            mlflow.set_tracking_uri(tracking_uri)
        if experiment:
            mlflow.set_experiment(experiment)
    except Exception as e:
        print(f"⚠️ Warning: Could not configure MLflow tracking: {e}")
    with mlflow.start_run(run_name=run_name) as run:
        yield run


def log_artifact(path):
    if mlflow.active_run() and os.path.exists(path):
        mlflow.log_artifact(path)
