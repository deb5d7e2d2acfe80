"""CSV trajectory files and result tables.

Trajectory schema (meters and seconds)::

    # oikf trajectory v1; t [s], y_k [m], gt_k [state units: m, m/s], mask_k [0/1]
    t,y_1,...,y_n[,gt_1,...,gt_m][,mask_1,...,mask_n]

Lines starting with ``#`` are comments. Timestamps must be strictly
increasing and every cell must be present.
"""

from __future__ import annotations

import csv
import io
import math
import os
import re
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np

from .ssmodel import ObservationSeries

__all__ = [
    "TrajectoryFormatError",
    "MalformedRowError",
    "NonIncreasingTimeError",
    "ColumnMismatchError",
    "SCHEMA_COMMENT",
    "RESULT_COLUMNS",
    "format_float",
    "read_trajectory",
    "write_trajectory",
    "trajectory_header",
    "write_table",
]

SCHEMA_COMMENT = "# oikf trajectory v1; t [s], y_k [m], gt_k [state units: m, m/s], mask_k [0/1]"
RESULT_COLUMNS = ("engine", "q_var", "r_var", "dim", "rmse", "mse_db", "runtime_ms")

_COLUMN = re.compile(r"^(y|gt|mask)_(\d+)$")


class TrajectoryFormatError(ValueError):
    """Base class for trajectory file problems; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class MalformedRowError(TrajectoryFormatError):
    pass


class NonIncreasingTimeError(TrajectoryFormatError):
    pass


class ColumnMismatchError(TrajectoryFormatError):
    pass


def format_float(x: float) -> str:
    return format(float(x), ".17g")


def trajectory_header(n: int, m: int = 0, with_mask: bool = False) -> list[str]:
    cols = ["t"] + [f"y_{k}" for k in range(1, n + 1)]
    cols += [f"gt_{k}" for k in range(1, m + 1)]
    if with_mask:
        cols += [f"mask_{k}" for k in range(1, n + 1)]
    return cols


def write_trajectory(series: ObservationSeries, path) -> None:
    """Write ``series`` in the trajectory schema (byte-deterministic, LF endings)."""
    n = series.obs_dim
    truth = series.truth_states
    mask = series.outlier_mask
    m = 0 if truth is None else truth.shape[1]
    lines = [SCHEMA_COMMENT, ",".join(trajectory_header(n, m, mask is not None))]
    for t in range(len(series)):
        cells = [format_float(series.times[t])]
        cells += [format_float(v) for v in series.observations[t]]
        if truth is not None:
            cells += [format_float(v) for v in truth[t]]
        if mask is not None:
            cells += ["1" if v else "0" for v in mask[t]]
        lines.append(",".join(cells))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_header(cells: list[str], line: int, n: int | None, m: int | None):
    cells = [c.strip() for c in cells]
    if not cells or cells[0] != "t":
        raise ColumnMismatchError(f"first column must be 't', got {cells[:1]}", line)
    groups: dict[str, list[int]] = {"y": [], "gt": [], "mask": []}
    order = []
    for name in cells[1:]:
        match = _COLUMN.match(name)
        if match is None:
            raise ColumnMismatchError(f"unknown column {name!r}", line)
        kind, idx = match.group(1), int(match.group(2))
        groups[kind].append(idx)
        order.append(kind)
    expected_order = sorted(order, key=("y", "gt", "mask").index)
    if order != expected_order:
        raise ColumnMismatchError("columns must be ordered t, y_*, gt_*, mask_*", line)
    for kind, idxs in groups.items():
        if idxs != list(range(1, len(idxs) + 1)):
            raise ColumnMismatchError(f"{kind} columns must be numbered 1..{len(idxs)}", line)
    n_file, m_file, k_mask = len(groups["y"]), len(groups["gt"]), len(groups["mask"])
    if n_file == 0:
        raise ColumnMismatchError("no observation columns", line)
    if k_mask not in (0, n_file):
        raise ColumnMismatchError(f"{k_mask} mask columns for {n_file} observation columns", line)
    if n is not None and n != n_file:
        raise ColumnMismatchError(f"expected {n} observation columns, file has {n_file}", line)
    if m is not None and m != m_file:
        raise ColumnMismatchError(f"expected {m} ground-truth columns, file has {m_file}", line)
    return n_file, m_file, k_mask > 0


def _parse_float(cell: str, name: str, line: int) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise MalformedRowError(f"column {name}: cannot parse {cell!r} as a number", line) from None
    if not math.isfinite(value):
        raise MalformedRowError(f"column {name}: non-finite value {cell!r}", line)
    return value


def read_trajectory(path, n: int | None = None, m: int | None = None) -> ObservationSeries:
    """Parse a trajectory CSV; ``n``/``m`` (when given) must match the header.

    The returned series carries ``meta["dt"]``, the median time step, and
    ``meta["source"]``.

    Raises
    ------
    FileNotFoundError
    ColumnMismatchError
        Header not in the schema, disagreeing with ``n``/``m``, or a row with
        the wrong number of cells.
    MalformedRowError
        A cell that is empty, not a finite number, or a mask value not 0/1.
    NonIncreasingTimeError
        A timestamp not strictly greater than the previous one.
    """
    with open(path, encoding="utf-8", newline="") as fh:
        text = fh.read()

    header = None
    times, obs, truth, mask = [], [], [], []
    for line_no, raw in enumerate(io.StringIO(text, newline=None), start=1):
        raw = raw.rstrip("\n")
        if raw.startswith("#"):
            continue
        cells = next(csv.reader([raw])) if raw.strip() else []
        if header is None:
            if not cells:
                raise ColumnMismatchError("missing header row", line_no)
            n_, m_, has_mask = _parse_header(cells, line_no, n, m)
            names = [c.strip() for c in cells]
            header = (n_, m_, has_mask)
            continue
        n_, m_, has_mask = header
        if not cells:
            raise MalformedRowError("empty row", line_no)
        if len(cells) != len(names):
            raise ColumnMismatchError(f"row has {len(cells)} cells, header has {len(names)}", line_no)
        cells = [c.strip() for c in cells]
        for name, cell in zip(names, cells):
            if cell == "":
                raise MalformedRowError(f"column {name} is empty", line_no)
        t = _parse_float(cells[0], "t", line_no)
        if times and not t > times[-1]:
            raise NonIncreasingTimeError(f"t={cells[0]} does not increase past {times[-1]!r}", line_no)
        times.append(t)
        obs.append([_parse_float(c, nm, line_no) for nm, c in zip(names[1:1 + n_], cells[1:1 + n_])])
        if m_:
            sl = slice(1 + n_, 1 + n_ + m_)
            truth.append([_parse_float(c, nm, line_no) for nm, c in zip(names[sl], cells[sl])])
        if has_mask:
            flags = []
            for nm, c in zip(names[1 + n_ + m_:], cells[1 + n_ + m_:]):
                if c not in ("0", "1"):
                    raise MalformedRowError(f"column {nm}: mask must be 0 or 1, got {c!r}", line_no)
                flags.append(c == "1")
            mask.append(flags)

    if header is None:
        raise ColumnMismatchError("file has no header row")
    n_, m_, has_mask = header
    T = len(times)
    series = ObservationSeries(
        times=np.array(times, dtype=float),
        observations=np.array(obs, dtype=float).reshape(T, n_),
        truth_states=np.array(truth, dtype=float).reshape(T, m_) if m_ else None,
        outlier_mask=np.array(mask, dtype=bool).reshape(T, n_) if has_mask else None,
        meta={"source": os.fspath(path)},
    )
    series.meta["dt"] = series.dt
    return series


def _cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "" if math.isnan(value) else format_float(value)
    return str(value)


def write_table(dest: Path | str | TextIO, rows: Iterable[dict], columns: Sequence[str]) -> None:
    """Tidy CSV with a fixed column order; NaN cells are written empty."""
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_cell(row.get(c, math.nan)) for c in columns))
    text = "\n".join(lines) + "\n"
    if hasattr(dest, "write"):
        dest.write(text)
    else:
        with open(dest, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
