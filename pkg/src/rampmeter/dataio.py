"""CSV and text formats: detector streams, trajectories, estimates, derivatives, metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

MAX_FILL = 3  # consecutive missing samples bridged by forward fill


class CsvFormatError(ValueError):
    def __init__(self, msg: str, file: str = "", line: int = 0, column: str = ""):
        super().__init__(msg)
        self.msg = msg
        self.file = file
        self.line = line
        self.column = column

    def __str__(self) -> str:
        loc = self.file
        if self.line:
            loc += f":{self.line}"
        if self.column:
            loc += f":{self.column}"
        return f"{loc}: {self.msg}" if loc else self.msg


def occupancy_to_density(occ, l_eff: float = 7.0, lanes: float = 1.0):
    """Occupancy in percent to density in veh/km/lane (effective length in metres)."""
    if l_eff <= 0 or lanes <= 0:
        raise ValueError("l_eff and lanes must be positive")
    arr = np.asarray(occ, dtype=float)
    finite = arr[np.isfinite(arr)]
    if np.any((finite < 0) | (finite > 100)):
        raise ValueError("occupancy must lie in [0, 100] percent")
    out = arr / 100.0 * (1000.0 / l_eff) / lanes
    return float(out) if out.ndim == 0 else out


@dataclass
class DetectorData:
    t: np.ndarray  # s
    density: np.ndarray  # veh/km/lane, NaN where missing
    speed: np.ndarray  # km/h
    station: list[str]
    kind: str  # "density" or "occupancy" as found in the file
    filled: int = 0  # samples bridged by forward fill


def _num(text: str, file: str, line: int, col: str) -> float:
    if text.strip() == "":
        return math.nan
    try:
        val = float(text)
    except ValueError:
        raise CsvFormatError(f"not a number: {text!r}", file, line, col) from None
    if not math.isfinite(val):
        raise CsvFormatError(f"non-finite value: {text!r}", file, line, col)
    return val


def forward_fill(x: np.ndarray, max_fill: int = MAX_FILL) -> tuple[np.ndarray, int]:
    """Fill runs of at most ``max_fill`` NaNs with the last value; longer runs stay NaN."""
    y = x.copy()
    filled = 0
    i = 0
    while i < len(y):
        if not math.isnan(y[i]):
            i += 1
            continue
        j = i
        while j < len(y) and math.isnan(y[j]):
            j += 1
        if i > 0 and j - i <= max_fill:
            y[i:j] = y[i - 1]
            filled += j - i
        i = j
    return y, filled


def read_detector_csv(path: str | Path, l_eff: float = 7.0, lanes: float = 1.0, fill: bool = True) -> DetectorData:
    path = Path(path)
    name = str(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except FileNotFoundError:
        raise CsvFormatError("file not found", name) from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CsvFormatError("empty file", name, 1) from None
        has_d, has_o = "density" in header, "occupancy" in header
        if has_d == has_o:
            raise CsvFormatError("header needs exactly one of density or occupancy", name, 1)
        for col in ("t", "speed"):
            if col not in header:
                raise CsvFormatError(f"missing column {col!r}", name, 1)
        kind = "density" if has_d else "occupancy"
        it, ik, iv = header.index("t"), header.index(kind), header.index("speed")
        ist = header.index("station") if "station" in header else None
        ts, ks, vs, st = [], [], [], []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise CsvFormatError(f"expected {len(header)} fields, got {len(row)}", name, line)
            t = _num(row[it], name, line, "t")
            if math.isnan(t):
                raise CsvFormatError("timestamp missing", name, line, "t")
            if ts and t <= ts[-1]:
                raise CsvFormatError("timestamps must increase", name, line, "t")
            k = _num(row[ik], name, line, kind)
            v = _num(row[iv], name, line, "speed")
            if kind == "occupancy" and not math.isnan(k) and not 0 <= k <= 100:
                raise CsvFormatError(f"occupancy out of range: {k}", name, line, kind)
            if (not math.isnan(k) and k < 0) or (not math.isnan(v) and v < 0):
                raise CsvFormatError("negative value", name, line)
            ts.append(t)
            ks.append(k)
            vs.append(v)
            st.append(row[ist] if ist is not None else "")
    k_arr = np.array(ks, dtype=float)
    if kind == "occupancy":
        k_arr = np.asarray(occupancy_to_density(k_arr, l_eff, lanes), dtype=float).reshape(-1)
    v_arr = np.array(vs, dtype=float)
    filled = 0
    if fill:
        k_arr, f1 = forward_fill(k_arr)
        v_arr, f2 = forward_fill(v_arr)
        filled = f1 + f2
    return DetectorData(np.array(ts, dtype=float), k_arr, v_arr, st, kind, filled)


def _cell(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "" if math.isnan(x) else repr(x)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(x) for x in row])


def write_detector_csv(
    path: str | Path,
    t: Sequence[float],
    density: Sequence[float],
    speed: Sequence[float],
    station: str = "s0",
    kind: str = "density",
) -> None:
    if kind not in ("density", "occupancy"):
        raise ValueError(f"unknown detector kind {kind!r}")
    write_csv(path, ("t", kind, "speed", "station"), ((a, b, c, station) for a, b, c in zip(t, density, speed)))


def write_trajectory(path: str | Path, tr) -> None:
    """Trajectory CSV; time column in seconds."""
    header = tr.header()
    header[0] = "t_s"
    write_csv(path, header, ([round(row[0] * 3600.0, 6), *row[1:]] for row in tr.rows()))


ESTIMATE_COLUMNS = ("t", "a_raw", "a_pub", "K_pub", "rho_c_pub", "v_f_pub", "rejected_flag", "reject_reason")


def write_estimates(path: str | Path, records) -> None:
    write_csv(
        path,
        ESTIMATE_COLUMNS,
        ((r.t, r.a_raw, r.a_pub, r.K_pub, r.rho_c_pub, r.v_f_pub, r.rejected, r.reason) for r in records),
    )


def write_derivatives(path: str | Path, estimates, degree: int) -> None:
    header = ["t", "t_ref", "value", "d1"] + (["d2"] if degree == 2 else [])
    write_csv(
        path,
        header,
        ([e.t, e.t_ref, e.value, e.d1] + ([e.d2] if degree == 2 else []) for e in estimates),
    )


def write_metrics(path: str | Path, metrics) -> None:
    Path(path).write_text(metrics.to_text(), encoding="utf-8")


def read_metrics(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line:
            k, _, v = line.partition("=")
            out[k] = v
    return out


def read_column(path: str | Path, column: str) -> tuple[np.ndarray, np.ndarray]:
    """Return (t, column) from any CSV with a ``t`` or ``t_s`` time column."""
    name = str(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except FileNotFoundError:
        raise CsvFormatError("file not found", name) from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CsvFormatError("empty file", name, 1) from None
        tcol = "t" if "t" in header else "t_s" if "t_s" in header else None
        if tcol is None:
            raise CsvFormatError("no time column (t or t_s)", name, 1)
        if column not in header:
            raise CsvFormatError(f"unknown column {column!r}", name, 1)
        it, ic = header.index(tcol), header.index(column)
        ts, ys = [], []
        for row in reader:
            if not row:
                continue
            line = reader.line_num
            if len(row) != len(header):
                raise CsvFormatError(f"expected {len(header)} fields, got {len(row)}", name, line)
            ts.append(_num(row[it], name, line, tcol))
            ys.append(_num(row[ic], name, line, column))
    return np.array(ts), np.array(ys)


def ground_truth(fd, station: int, extra: Optional[dict] = None) -> dict:
    out = {"v_f": fd.v_f, "rho_c": fd.rho_c, "a": fd.a, "K": fd.K, "station_segment": station}
    out.update(extra or {})
    return out
