from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from bifbm import __version__
from bifbm.errors import ArtifactError
from bifbm.logging_utils import log_event
from bifbm.paths import Path as SamplePath


@dataclass(slots=True)
class CheckReport:
    check: str
    params: dict[str, Any]
    statistic: float
    tolerance: float
    passed: bool
    n_rep: int | None = None
    master_seed: int | None = None
    details: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "check": self.check,
            "params": _jsonable(self.params),
            "statistic": _jsonable(self.statistic),
            "tolerance": _jsonable(self.tolerance),
            "pass": bool(self.passed),
            "n_rep": self.n_rep,
            "master_seed": self.master_seed,
            "tool_version": __version__,
            "details": _jsonable(self.details),
        }

    def summary_line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} {self.check} statistic={_short(self.statistic)} tolerance={_short(self.tolerance)}"

    def log(self) -> "CheckReport":
        log_event(
            "reports",
            "verdict",
            check=self.check,
            result="pass" if self.passed else "fail",
            statistic=_short(self.statistic),
            tolerance=_short(self.tolerance),
            H=self.params.get("H"),
            K=self.params.get("K"),
        )
        return self


def report_params(
    H: float | None = None,
    K: float | None = None,
    T: float | None = None,
    n: int | None = None,
    grid_points: int | None = None,
) -> dict[str, Any]:
    return {"H": H, "K": K, "T": T, "n": n, "grid_points": grid_points}


@dataclass(slots=True)
class RunMetadata:
    H: float | None
    K: float | None
    T: float | None
    n: int | None
    n_rep: int | None
    master_seed: int | None

    def to_dict(self) -> dict[str, Any]:
        return {
            "H": self.H,
            "K": self.K,
            "T": self.T,
            "n": self.n,
            "n_rep": self.n_rep,
            "master_seed": self.master_seed,
            "tool_version": __version__,
        }


def _short(value: float) -> str:
    return f"{value:.6g}" if isinstance(value, (int, float)) else str(value)


def _jsonable(value: Any) -> Any:
    """Plain JSON types only; NaN and infinities become null."""
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        number = float(value)
        return number if math.isfinite(number) else None
    return value


def _fmt(value: float) -> str:
    return f"{float(value):.17g}"


def report_to_json(report: CheckReport) -> str:
    return json.dumps(report.to_dict(), indent=2, allow_nan=False) + "\n"


def _write_text(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        log_event("reports", "write", result="error", message=f"{path}: {exc}")
        raise ArtifactError(f"cannot write {path}: {exc}") from exc
    return path


def write_report(report: CheckReport, path: Path) -> Path:
    return _write_text(path, report_to_json(report))


def write_json(payload: dict[str, Any], path: Path) -> Path:
    return _write_text(path, json.dumps(_jsonable(payload), indent=2, allow_nan=False) + "\n")


def write_combined_report(
    reports: Sequence[CheckReport], path: Path, metadata: RunMetadata, suite: str = "full-suite"
) -> Path:
    payload = {
        "suite": suite,
        "pass": all(r.passed for r in reports),
        "metadata": _jsonable(metadata.to_dict()),
        "checks": [r.to_dict() for r in reports],
    }
    return _write_text(path, json.dumps(payload, indent=2, allow_nan=False) + "\n")


def metadata_path(artifact: Path) -> Path:
    return artifact.with_name(f"{artifact.stem}.meta.json")


def write_metadata(artifact: Path, metadata: RunMetadata) -> Path:
    return _write_text(metadata_path(artifact), json.dumps(_jsonable(metadata.to_dict()), indent=2) + "\n")


def _write_rows(path: Path, header: Sequence[str], rows: Iterable[Sequence[str]]) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as exc:
        log_event("reports", "write", result="error", message=f"{path}: {exc}")
        raise ArtifactError(f"cannot write {path}: {exc}") from exc
    return path


def write_path_csv(sample: SamplePath, path: Path, metadata: RunMetadata | None = None) -> Path:
    rows = ((_fmt(t), _fmt(v)) for t, v in zip(sample.times, sample.values))
    _write_rows(path, ("t", "value"), rows)
    if metadata is not None:
        write_metadata(path, metadata)
    return path


def write_ensemble_csv(
    times: np.ndarray,
    values: np.ndarray,
    path: Path,
    metadata: RunMetadata | None = None,
) -> Path:
    rows = (
        (str(r), _fmt(t), _fmt(v))
        for r in range(values.shape[0])
        for t, v in zip(times, values[r])
    )
    _write_rows(path, ("replicate", "t", "value"), rows)
    if metadata is not None:
        write_metadata(path, metadata)
    return path


def write_sweep_csv(rows: Sequence[dict[str, float]], path: Path, metadata: RunMetadata | None = None) -> Path:
    body = (
        (str(int(row["n"])), _fmt(row["alpha"]), _fmt(row["mean"]), _fmt(row["stderr"]), _fmt(row["prediction"]))
        for row in rows
    )
    _write_rows(path, ("n", "alpha", "mean", "stderr", "prediction"), body)
    if metadata is not None:
        write_metadata(path, metadata)
    return path


def load_report(path: Path) -> dict[str, Any]:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        log_event("reports", "load", result="error", message=str(exc))
        raise ArtifactError(f"cannot read report {path}: {exc}") from exc
