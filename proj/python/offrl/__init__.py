import json

from ._core import (
    ConfigError,
    fqi_iterations,
    git_blob_sha1,
    normalized_score,
    return_to_go,
    table1,
    table1_columns,
    table1_expected,
)
from ._core import _run_experiment


def run_experiment(config, jobs=1):
    """Run an experiment config (dict or JSON text); returns the run manifest as a dict."""
    text = config if isinstance(config, str) else json.dumps(config)
    return json.loads(_run_experiment(text, jobs))


__all__ = [
    "ConfigError",
    "fqi_iterations",
    "git_blob_sha1",
    "normalized_score",
    "return_to_go",
    "run_experiment",
    "table1",
    "table1_columns",
    "table1_expected",
]
