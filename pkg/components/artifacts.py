"""
HOLD Artifacts Module
=====================
Writers for every file a command produces.

Data files (CSV/JSON) carry the config hash and seed and nothing that
changes between identical runs; wall times and timestamps go to a
``*.meta.json`` sidecar next to them.
"""

import json
import logging
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


@dataclass(frozen=True)
class RunStamp:
    config_hash: str
    seed: int

    def preamble(self) -> str:
        return f"# config_hash={self.config_hash}\n# seed={self.seed}\n"


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_csv(frame: pd.DataFrame, path: Union[str, Path], stamp: RunStamp) -> Path:
    """CSV with a two-line '#' preamble (config hash, seed)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(stamp.preamble())
        frame.to_csv(fh, index=False, float_format=FLOAT_FORMAT)
    logger.debug("wrote %s (%d rows)", path, len(frame))
    return path


def write_json(payload: Dict[str, Any], path: Union[str, Path], stamp: RunStamp) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = dict(_plain(payload))
    body["config_hash"] = stamp.config_hash
    body["seed"] = stamp.seed
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.debug("wrote %s", path)
    return path


def sidecar_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def write_sidecar(path: Union[str, Path], stamp: RunStamp, **info: Any) -> Path:
    """Volatile run facts (timestamp, wall time, NFE) beside a data file."""
    meta = sidecar_path(path)
    body = dict(_plain(info))
    body.update({
        "artifact": Path(path).name,
        "config_hash": stamp.config_hash,
        "seed": stamp.seed,
        "created": datetime.now().isoformat(timespec="seconds"),
    })
    meta.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return meta


def read_json(path: Union[str, Path]) -> Dict[str, Any]:
    return json.loads(Path(path).read_text(encoding="utf-8"))
