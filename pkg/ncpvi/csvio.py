"""CSV artifacts with `#` comment headers."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from ncpvi.forward import DataVector


class MissingInputError(FileNotFoundError):
    """Raised when a command needs an artifact that has not been produced."""


@dataclass
class CsvTable:
    columns: list[str]
    rows: list[list[str]]
    meta: dict[str, str] = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        idx = self.columns.index(name)
        return np.array([float(row[idx]) for row in self.rows])


def _fmt(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    if value is None:
        return ""
    return str(value)


def comment_header(config_hash: str, meta: Mapping[str, Any] | None = None) -> str:
    stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
    lines = [f"# generated_at={stamp}", f"# config_hash={config_hash}"]
    lines.extend(f"# {key}={_fmt(value)}" for key, value in (meta or {}).items())
    return "\n".join(lines) + "\n"


def write_csv(
    path: Path,
    columns: Sequence[str],
    rows: Iterable[Sequence[Any]],
    *,
    config_hash: str,
    meta: Mapping[str, Any] | None = None,
) -> Path:
    """Write a UTF-8 CSV whose first line is the only run-dependent one."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(comment_header(config_hash, meta))
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def read_csv(path: Path) -> CsvTable:
    if not path.exists():
        raise MissingInputError(f"Required input not found: {path}")
    meta: dict[str, str] = {}
    body: list[str] = []
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key.strip()] = value.strip()
            elif line.strip():
                body.append(line)
    reader = csv.reader(body)
    try:
        columns = next(reader)
    except StopIteration as exc:
        raise MissingInputError(f"{path} has no header row") from exc
    return CsvTable(columns=columns, rows=[row for row in reader], meta=meta)


def write_field(path: Path, x: np.ndarray, values: np.ndarray, *, config_hash: str) -> Path:
    """Nodal values as `i,x_i,value`."""
    return write_csv(
        path, ["i", "x_i", "value"], zip(range(len(values)), x, values), config_hash=config_hash
    )


def write_bands(path: Path, x: np.ndarray, bands: Mapping[int, np.ndarray], *, config_hash: str) -> Path:
    """Covariance bands as `k,i,x_i,value`."""
    rows = [
        (k, i, x[i], value)
        for k in sorted(bands)
        for i, value in enumerate(bands[k])
    ]
    return write_csv(path, ["k", "i", "x_i", "value"], rows, config_hash=config_hash)


def read_bands(path: Path) -> dict[int, np.ndarray]:
    table = read_csv(path)
    out: dict[int, list[float]] = {}
    for k, _i, _x, value in table.rows:
        out.setdefault(int(k), []).append(float(value))
    return {k: np.array(v) for k, v in out.items()}


def write_metrics(path: Path, metrics: Mapping[str, Any], *, config_hash: str) -> Path:
    return write_csv(path, ["key", "value"], metrics.items(), config_hash=config_hash)


def read_metrics(path: Path) -> dict[str, str]:
    return {key: value for key, value in read_csv(path).rows}


def save_data(path: Path, data: DataVector, *, config_hash: str, meta: Mapping[str, Any] | None = None) -> Path:
    header = {"tau": data.tau, "noise_pct": data.noise_pct, "fine_n": data.fine_n}
    header.update(meta or {})
    return write_csv(path, ["x_obs", "d"], zip(data.x_obs, data.d), config_hash=config_hash, meta=header)


def load_data(path: Path) -> DataVector:
    table = read_csv(path)
    try:
        tau = float(table.meta["tau"])
        noise_pct = float(table.meta["noise_pct"])
        fine_n = int(table.meta["fine_n"])
    except KeyError as exc:
        raise MissingInputError(f"{path} is missing the {exc.args[0]} header") from exc
    return DataVector(
        d=table.column("d"), tau=tau, noise_pct=noise_pct, x_obs=table.column("x_obs"), fine_n=fine_n
    )
