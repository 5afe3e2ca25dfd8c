"""Sector-time parsing and density-based lap cleaning."""

from __future__ import annotations

import csv
import io
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

NOISE = -1
HEADER = ("Number", "Lap", "Stop", "S1", "S2", "S3", "Elapsed", "Class", "Group", "Team")
_ALIASES = {
    "#": "Number", "number": "Number", "car": "Number", "car_number": "Number",
    "lap": "Lap", "stop": "Stop", "stop_flag": "Stop",
    "s1": "S1", "s2": "S2", "s3": "S3", "elapsed": "Elapsed",
    "class": "Class", "group": "Group", "team": "Team",
}
REQUIRED = ("Number", "Lap", "S1", "S2", "S3", "Elapsed", "Class")


class CarClass(str, Enum):
    LMP1 = "LMP1"
    LMP2 = "LMP2"
    LMGTE_Pro = "LMGTE_Pro"
    LMGTE_Am = "LMGTE_Am"

    @classmethod
    def parse(cls, label: str) -> CarClass:
        key = label.strip().replace(" ", "_").replace("-", "_")
        for c in cls:
            if c.value.lower() == key.lower():
                return c
        raise ValidationError(f"unknown class label {label!r}")


class ParseError(ValueError):
    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


class ValidationError(ValueError):
    pass


@dataclass(frozen=True)
class SectorTimeRecord:
    car_number: int
    lap: int
    s1: float
    s2: float
    s3: float
    elapsed: float
    car_class: CarClass
    stop_flag: str | None = None
    group: str = ""
    team: str = ""

    @property
    def sectors(self) -> tuple[float, float, float]:
        return (self.s1, self.s2, self.s3)

    @property
    def lap_time(self) -> float:
        return self.s1 + self.s2 + self.s3


def _detect_delimiter(header_line: str) -> str:
    return ";" if header_line.count(";") > header_line.count(",") else ","


def parse_sector_times(source, delimiter: str | None = None) -> list[SectorTimeRecord]:
    """Parse a header-bearing delimited sector-time table.

    ``source`` is a path, a text stream or a string holding the table.
    Row indices in errors count data rows from 1.
    """
    if isinstance(source, Path):
        text = source.read_text(encoding="utf-8")
    elif isinstance(source, str):
        text = source
    else:
        text = source.read()
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("//")]
    if not lines:
        return []
    delim = delimiter or _detect_delimiter(lines[0])
    reader = csv.reader(lines, delimiter=delim)
    raw_header = next(reader)
    header = [_ALIASES.get(h.strip().lower(), h.strip()) for h in raw_header]
    missing = [c for c in REQUIRED if c not in header]
    if missing:
        raise ParseError(0, f"header lacks columns {missing}")
    col = {name: i for i, name in enumerate(header)}
    records = []
    last_elapsed: dict[int, tuple[int, float]] = {}
    for row_idx, row in enumerate(reader, start=1):
        if len(row) < len(REQUIRED):
            raise ParseError(row_idx, f"expected {len(header)} fields, got {len(row)}")

        def get(name, default=""):
            i = col.get(name)
            return row[i].strip() if i is not None and i < len(row) else default

        try:
            car = int(get("Number"))
            lap = int(get("Lap"))
            s1, s2, s3 = float(get("S1")), float(get("S2")), float(get("S3"))
            elapsed = float(get("Elapsed"))
        except ValueError as exc:
            raise ParseError(row_idx, str(exc)) from None
        if lap < 1:
            raise ParseError(row_idx, "lap numbers start at 1")
        if min(s1, s2, s3) <= 0 or elapsed <= 0:
            raise ParseError(row_idx, "sector and elapsed times must be positive")
        car_class = CarClass.parse(get("Class"))
        prev = last_elapsed.get(car)
        if prev is not None and prev[0] < lap and elapsed < prev[1]:
            raise ParseError(row_idx, f"elapsed time decreases for car {car}")
        last_elapsed[car] = (lap, elapsed)
        records.append(SectorTimeRecord(
            car_number=car, lap=lap, s1=s1, s2=s2, s3=s3, elapsed=elapsed, car_class=car_class,
            stop_flag=get("Stop") or None, group=get("Group"), team=get("Team"),
        ))
    return records


def write_sector_times(records, path=None, delimiter: str = ",") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(HEADER)
    for r in records:
        w.writerow([r.car_number, r.lap, r.stop_flag or "", repr(float(r.s1)), repr(float(r.s2)), repr(float(r.s3)),
                    repr(float(r.elapsed)), r.car_class.value, r.group, r.team])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def dbscan(points, eps: float, min_pts: int) -> np.ndarray:
    """1-D DBSCAN.

    A point is core when at least ``min_pts`` points (itself included) lie
    within ``eps``.  Border points join the cluster of the nearest core point
    (ties go to the lower coordinate).  Cluster ids increase with coordinate;
    noise is ``-1``.  On a line, density-connected components are runs of
    sorted core points whose consecutive gaps are at most ``eps``.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")
    x = np.asarray(points, dtype=float)
    n = x.size
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return labels
    order = np.argsort(x, kind="stable")
    xs = x[order]
    lo = np.searchsorted(xs, xs - eps, side="left")
    hi = np.searchsorted(xs, xs + eps, side="right")
    core = (hi - lo) >= min_pts
    core_idx = np.flatnonzero(core)
    if core_idx.size == 0:
        return labels
    core_x = xs[core_idx]
    new_cluster = np.concatenate([[True], np.diff(core_x) > eps])
    core_cluster = np.cumsum(new_cluster) - 1
    sorted_labels = np.full(n, NOISE, dtype=np.int64)
    sorted_labels[core_idx] = core_cluster
    for i in np.flatnonzero(~core):
        j = np.searchsorted(core_x, xs[i])
        best, best_d = NOISE, np.inf
        for c in (j - 1, j):
            if 0 <= c < core_x.size:
                d = abs(core_x[c] - xs[i])
                if d <= eps and d < best_d:
                    best, best_d = core_cluster[c], d
        sorted_labels[i] = best
    labels[order] = sorted_labels
    return labels


@dataclass
class Rejection:
    record: SectorTimeRecord
    reason: str  # outlier | non-fastest-cluster | stop-lap


@dataclass
class CleanedLapSet:
    retained: dict[int, list[SectorTimeRecord]] = field(default_factory=dict)
    rejected: dict[int, list[Rejection]] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def all_retained(self) -> list[SectorTimeRecord]:
        return [r for car in sorted(self.retained) for r in self.retained[car]]

    def rejection_report(self, path=None) -> str:
        lines = ["car,lap,reason"]
        for car in sorted(self.rejected):
            for rej in sorted(self.rejected[car], key=lambda r: r.record.lap):
                lines.append(f"{car},{rej.record.lap},{rej.reason}")
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


def fastest_cluster(times: np.ndarray, labels: np.ndarray) -> int | None:
    ids = sorted(set(labels.tolist()) - {NOISE})
    if not ids:
        return None
    return min(ids, key=lambda c: (float(np.mean(times[labels == c])), c))


def clean_laps(records, eps: float = 2.0, min_pts: int = 5) -> CleanedLapSet:
    """Keep laps whose three sector times all fall in the fastest cluster of
    their sector, clustering each car and sector separately.  Laps carrying a
    stop flag are removed before clustering."""
    by_car: dict[int, list[SectorTimeRecord]] = defaultdict(list)
    for r in records:
        by_car[r.car_number].append(r)
    if not by_car:
        raise ValidationError("no records to clean")
    out = CleanedLapSet()
    for car in sorted(by_car):
        laps = sorted(by_car[car], key=lambda r: r.lap)
        rejected = [Rejection(r, "stop-lap") for r in laps if r.stop_flag]
        candidates = [r for r in laps if not r.stop_flag]
        keep = np.ones(len(candidates), dtype=bool)
        noise = np.zeros(len(candidates), dtype=bool)
        if candidates:
            for sec in range(3):
                t = np.array([r.sectors[sec] for r in candidates])
                lab = dbscan(t, eps, min_pts)
                best = fastest_cluster(t, lab)
                noise |= lab == NOISE
                keep &= (lab == best) if best is not None else False
        for r, k, nz in zip(candidates, keep, noise):
            if not k:
                rejected.append(Rejection(r, "outlier" if nz else "non-fastest-cluster"))
        out.retained[car] = [r for r, k in zip(candidates, keep) if k]
        out.rejected[car] = sorted(rejected, key=lambda x: x.record.lap)
        if not out.retained[car]:
            out.warnings.append(f"car {car}: no lap retained after cleaning")
            log.warning("car %s: no lap retained after cleaning", car)
    return out
