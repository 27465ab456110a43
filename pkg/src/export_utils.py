import json
import logging
import math
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, List, Sequence

import numpy as np
import pandas as pd

from src.orbits import OrbitTrace

logger = logging.getLogger(__name__)

# fixed CSV dialect: comma, '.', header row, LF, 17 significant digits
FLOAT_FORMAT = "%.17g"
TRACE_COLUMNS = ["j", "x_j", "a_j", "r_j"]


class ExportManager:
    """
    Writes experiment artifacts under one directory.

    Every file goes through a temporary sibling and os.replace, so a
    reader never sees a partially written artifact.
    """

    def __init__(self, root):
        self.root = Path(root)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"output directory {self.root} is not writable: {exc}") from exc
        self.written: List[Path] = []

    def _write_text(self, name: str, text: str) -> Path:
        target = self.root / name
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as handle:
                handle.write(text)
            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        self.written.append(target)
        logger.info("wrote %s", target)
        return target

    def to_csv_text(self, frame: pd.DataFrame) -> str:
        return frame.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")

    def export_to_csv(self, name: str, frame: pd.DataFrame) -> Path:
        """DataFrame to CSV in the fixed dialect"""
        return self._write_text(name, self.to_csv_text(frame))

    def export_to_json(self, name: str, data: Dict[str, Any]) -> Path:
        """Deterministic JSON: sorted keys, no timestamps, NaN/inf as null"""
        text = json.dumps(self._clean_for_json(data), indent=2, sort_keys=True, allow_nan=False)
        return self._write_text(name, text + "\n")

    def export_to_text(self, name: str, frame: pd.DataFrame, title: str = "") -> Path:
        body = frame.to_string(index=False)
        return self._write_text(name, (f"{title}\n\n" if title else "") + body + "\n")

    def export_columns(self, name: str, columns: Dict[str, Sequence]) -> Path:
        """Plain column CSV, e.g. two-column plot data."""
        return self.export_to_csv(name, pd.DataFrame(columns))

    def export_trace(self, name: str, trace: OrbitTrace) -> Path:
        frame = pd.DataFrame({
            "j": np.arange(trace.length),
            "x_j": trace.x[:-1],
            "a_j": trace.a,
            "r_j": trace.r,
        })
        return self.export_to_csv(name, frame)

    def _clean_for_json(self, obj):
        """Clean object for JSON serialization"""
        if isinstance(obj, dict):
            return {str(k): self._clean_for_json(v) for k, v in obj.items()}
        elif isinstance(obj, (list, tuple)):
            return [self._clean_for_json(item) for item in obj]
        elif isinstance(obj, np.ndarray):
            return self._clean_for_json(obj.tolist())
        elif isinstance(obj, (bool, np.bool_)):
            return bool(obj)
        elif isinstance(obj, (int, np.integer)):
            return int(obj)
        elif isinstance(obj, (float, np.floating)):
            value = float(obj)
            return value if math.isfinite(value) else None
        elif obj is None or isinstance(obj, str):
            return obj
        return str(obj)


def read_trace(path, delta: float) -> OrbitTrace:
    """
    Inverse of ExportManager.export_trace.

    The file holds x_0..x_{N-1}; the final iterate is not stored, so it is
    recomputed by the caller when needed and set to NaN here.
    """
    frame = pd.read_csv(path, float_precision="round_trip")
    missing = [c for c in TRACE_COLUMNS if c not in frame.columns]
    if missing:
        raise ValueError(f"{path}: missing trace columns {missing}")
    frame = frame.astype({"j": int, "x_j": float, "a_j": float, "r_j": float})
    if not np.array_equal(frame["j"].to_numpy(), np.arange(len(frame))):
        raise ValueError(f"{path}: column j must run 0..N-1")
    x = np.append(frame["x_j"].to_numpy(), np.nan)
    return OrbitTrace(x=x, a=frame["a_j"].to_numpy(), r=frame["r_j"].to_numpy(), delta=delta)
