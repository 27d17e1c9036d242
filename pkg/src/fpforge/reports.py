"""Run reports: JSON files that record config, seeds, versions and metrics."""
from __future__ import annotations

import json
import math
import os
import platform
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__


def _default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    if hasattr(o, "to_dict"):
        return o.to_dict()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _clean(o):
    # JSON has no inf/nan; keep them readable as strings
    if isinstance(o, float) and not math.isfinite(o):
        return "inf" if o > 0 else ("-inf" if o < 0 else "nan")
    if isinstance(o, dict):
        return {k: _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    return o


def dumps(obj) -> str:
    return json.dumps(_clean(json.loads(json.dumps(obj, default=_default, allow_nan=True))), indent=1, sort_keys=True)


def versions() -> dict:
    import PIL
    import torch

    return {
        "fpforge": __version__,
        "python": sys.version.split()[0],
        "platform": platform.platform(),
        "numpy": np.__version__,
        "torch": torch.__version__,
        "pillow": PIL.__version__,
    }


def cache_root() -> Path:
    return Path(os.environ.get("FPFORGE_CACHE", Path.home() / ".cache" / "fpforge"))


def write_report(path, command: str, config: dict, metrics: dict, **extra) -> Path:
    report = {
        "command": command,
        "config": config,
        "metrics": metrics,
        "versions": versions(),
        "finished_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        **extra,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(report))
    return path


def read_report(path) -> dict:
    return json.loads(Path(path).read_text())
