from __future__ import annotations

import os

import dask.config
import yaml

fn = os.path.join(os.path.dirname(__file__), "emotion-geometry.yaml")

with open(fn) as f:
    defaults = yaml.safe_load(f)

dask.config.update_defaults(defaults)


def get(key, default=dask.config.no_default):
    """Read a key under the ``emotion-geometry`` namespace

    Examples
    --------
    >>> get("reliability.unreliable")
    0.95
    """
    return dask.config.get(f"emotion-geometry.{key}", default=default)
