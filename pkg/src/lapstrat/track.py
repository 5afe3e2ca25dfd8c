"""Spatially discretised circuit geometry.

A :class:`TrackGeometry` is a closed lap sampled on a uniform grid.  Point
``k`` sits at ``s = k * delta_s`` and represents the interval
``[s, s + delta_s)``; the last point wraps back onto the first.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

COLUMNS = (
    "s",
    "alpha",
    "r",
    "section",
    "sector",
    "region",
    "is_straight",
    "low_speed",
    "high_speed",
)


class GeometryError(ValueError):
    """Raised when a geometry violates its structural invariants."""


@dataclass
class TrackGeometry:
    delta_s: float
    alpha: np.ndarray
    radius: np.ndarray
    section: np.ndarray
    sector: np.ndarray
    region: np.ndarray
    is_straight: np.ndarray
    low_speed: np.ndarray
    high_speed: np.ndarray
    name: str = "track"
    s: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        n = len(self.alpha)
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.radius = np.asarray(self.radius, dtype=float)
        self.section = np.asarray(self.section, dtype=np.int64)
        self.sector = np.asarray(self.sector, dtype=np.int64)
        self.region = np.asarray(self.region, dtype=np.int64)
        self.is_straight = np.asarray(self.is_straight, dtype=bool)
        self.low_speed = np.asarray(self.low_speed, dtype=bool)
        self.high_speed = np.asarray(self.high_speed, dtype=bool)
        self.s = np.arange(n, dtype=float) * self.delta_s
        self.validate()

    # ------------------------------------------------------------------
    @property
    def n_points(self) -> int:
        return len(self.alpha)

    @property
    def length(self) -> float:
        return self.n_points * self.delta_s

    @property
    def n_sections(self) -> int:
        return int(self.section.max())

    @property
    def n_regions(self) -> int:
        return int(self.region.max())

    def validate(self) -> None:
        n = self.n_points
        if n == 0:
            raise GeometryError("empty geometry")
        if not self.delta_s > 0:
            raise GeometryError("delta_s must be positive")
        for name in ("radius", "section", "sector", "region", "is_straight", "low_speed", "high_speed"):
            if len(getattr(self, name)) != n:
                raise GeometryError(f"column {name!r} has wrong length")
        if np.any(self.radius <= 0):
            raise GeometryError("curve radii must be positive (use inf for straights)")
        for name in ("section", "sector", "region"):
            ids = getattr(self, name)
            _check_blocks(name, ids)
        if self.sector.max() != 3:
            raise GeometryError("a lap must be split into exactly 3 sectors")
        starts = self.region_starts()
        for j, k in enumerate(starts, start=1):
            if not self.is_straight[k]:
                raise GeometryError(f"region {j} does not start on a straight")
            if self.is_straight[k - 1] and not self.is_straight.all():
                raise GeometryError(f"region {j} does not start at the first point of a straight")

    def region_starts(self) -> np.ndarray:
        """Index of the first grid point of each region (region 1 first)."""
        return _block_starts(self.region)

    def section_starts(self) -> np.ndarray:
        return _block_starts(self.section)

    def sector_starts(self) -> np.ndarray:
        return _block_starts(self.sector)

    def section_bounds(self) -> np.ndarray:
        """``(n_sections, 2)`` array of ``[start_m, end_m)`` per section."""
        starts = self.section_starts().astype(float) * self.delta_s
        ends = np.append(starts[1:], self.length)
        return np.column_stack([starts, ends])

    def sector_bounds(self) -> np.ndarray:
        starts = self.sector_starts().astype(float) * self.delta_s
        ends = np.append(starts[1:], self.length)
        return np.column_stack([starts, ends])

    def section_of(self, s) -> np.ndarray:
        """Section id (1-based) containing arc position(s) ``s`` (wrapped)."""
        idx = (np.floor(np.mod(s, self.length) / self.delta_s)).astype(np.int64)
        idx = np.clip(idx, 0, self.n_points - 1)
        return self.section[idx]

    def straight_mask(self, straight_id: int, from_m: float, to_m: float) -> np.ndarray:
        """Points of straight ``straight_id`` between ``from_m`` and ``to_m`` from its start."""
        starts = self.region_starts()
        if not 1 <= straight_id <= len(starts):
            raise GeometryError(f"no straight {straight_id} (track has {len(starts)})")
        k0 = starts[straight_id - 1]
        rel = (self.s - self.s[k0]) % self.length
        return (self.region == straight_id) & self.is_straight & (rel >= from_m) & (rel < to_m)

    def resample(self, delta_s: float) -> TrackGeometry:
        """Point-sample the geometry on a coarser or finer uniform grid."""
        n_new = int(round(self.length / delta_s))
        if n_new < 1 or not math.isclose(n_new * delta_s, self.length, rel_tol=1e-9):
            raise GeometryError(f"lap length {self.length} is not a multiple of {delta_s}")
        centre = (np.arange(n_new) + 0.5) * delta_s
        idx = np.minimum((centre / self.delta_s).astype(np.int64), self.n_points - 1)
        geo = TrackGeometry(
            delta_s=delta_s,
            alpha=self.alpha[idx],
            radius=self.radius[idx],
            section=self.section[idx],
            sector=self.sector[idx],
            region=self.region[idx],
            is_straight=self.is_straight[idx],
            low_speed=self.low_speed[idx],
            high_speed=self.high_speed[idx],
            name=self.name,
        )
        return geo

    # ------------------------------------------------------------------
    def to_csv(self, path) -> None:
        Path(path).write_text(self.to_csv_text())

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        buf.write(f"# name={self.name}\n")
        buf.write(f"# delta_s={self.delta_s!r}\n")
        buf.write(f"# length={self.length!r}\n")
        buf.write(",".join(COLUMNS) + "\n")
        for k in range(self.n_points):
            r = "inf" if math.isinf(self.radius[k]) else repr(float(self.radius[k]))
            buf.write(
                f"{float(self.s[k])!r},{float(self.alpha[k])!r},{r},{self.section[k]},{self.sector[k]},"
                f"{self.region[k]},{int(self.is_straight[k])},{int(self.low_speed[k])},"
                f"{int(self.high_speed[k])}\n"
            )
        return buf.getvalue()

    @classmethod
    def from_csv(cls, path) -> TrackGeometry:
        return cls.from_csv_text(Path(path).read_text())

    @classmethod
    def from_csv_text(cls, text: str) -> TrackGeometry:
        meta = {}
        rows = []
        header = None
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key.strip()] = value.strip()
                continue
            if header is None:
                header = [c.strip() for c in line.split(",")]
                missing = set(COLUMNS) - set(header)
                if missing:
                    raise GeometryError(f"geometry file missing columns {sorted(missing)}")
                continue
            rows.append(dict(zip(header, line.split(","))))
        if "delta_s" not in meta:
            raise GeometryError("geometry header lacks delta_s")
        if not rows:
            raise GeometryError("empty geometry")
        delta_s = float(meta["delta_s"])
        s = np.array([float(r["s"]) for r in rows])
        if not np.allclose(np.diff(s), delta_s) or abs(s[0]) > 1e-9:
            raise GeometryError("geometry grid is not uniform from s=0")
        geo = cls(
            delta_s=delta_s,
            alpha=[float(r["alpha"]) for r in rows],
            radius=[float(r["r"]) for r in rows],
            section=[int(r["section"]) for r in rows],
            sector=[int(r["sector"]) for r in rows],
            region=[int(r["region"]) for r in rows],
            is_straight=[r["is_straight"].strip() in ("1", "true", "True") for r in rows],
            low_speed=[r["low_speed"].strip() in ("1", "true", "True") for r in rows],
            high_speed=[r["high_speed"].strip() in ("1", "true", "True") for r in rows],
            name=meta.get("name", "track"),
        )
        if "length" in meta and not math.isclose(float(meta["length"]), geo.length, rel_tol=1e-9):
            raise GeometryError("declared length does not match the grid")
        return geo


@dataclass
class Segment:
    """Building block for synthetic circuits."""

    length: float
    radius: float = math.inf
    n_sections: int = 1
    straight: bool = False
    slope: float = 0.0
    sector_break: bool = False
    low_speed: bool = False
    high_speed: bool = False


def from_segments(segments: list[Segment], delta_s: float = 2.0, name: str = "track") -> TrackGeometry:
    """Assemble a geometry from consecutive segments.

    Regions start at every segment flagged ``straight``; the first segment must
    be one.  ``sector_break`` starts a new sector at that segment; exactly two
    breaks are expected.
    """
    if not segments or not segments[0].straight:
        raise GeometryError("the first segment must be a straight")
    cols = {c: [] for c in ("alpha", "radius", "section", "sector", "region", "straight", "low", "high")}
    section = sector = 1
    region = 0
    first = True
    for seg in segments:
        n = int(round(seg.length / delta_s))
        if n < 1 or not math.isclose(n * delta_s, seg.length, abs_tol=1e-9):
            raise GeometryError(f"segment length {seg.length} is not a multiple of {delta_s}")
        if seg.sector_break and not first:
            sector += 1
        if seg.straight:
            region += 1
        bounds = np.linspace(0, n, seg.n_sections + 1).round().astype(int)
        for b in range(seg.n_sections):
            if not first:
                section += 1
            first = False
            m = bounds[b + 1] - bounds[b]
            cols["alpha"] += [seg.slope] * m
            cols["radius"] += [seg.radius] * m
            cols["section"] += [section] * m
            cols["sector"] += [sector] * m
            cols["region"] += [region] * m
            cols["straight"] += [seg.straight] * m
            cols["low"] += [seg.low_speed] * m
            cols["high"] += [seg.high_speed] * m
    return TrackGeometry(
        delta_s=delta_s,
        alpha=cols["alpha"],
        radius=cols["radius"],
        section=cols["section"],
        sector=cols["sector"],
        region=cols["region"],
        is_straight=cols["straight"],
        low_speed=cols["low"],
        high_speed=cols["high"],
        name=name,
    )


def _block_starts(ids: np.ndarray) -> np.ndarray:
    change = np.flatnonzero(np.diff(ids)) + 1
    return np.concatenate([[0], change]).astype(np.int64)


def _check_blocks(name: str, ids: np.ndarray) -> None:
    if ids[0] != 1:
        raise GeometryError(f"{name} ids must start at 1")
    d = np.diff(ids)
    if np.any((d != 0) & (d != 1)):
        raise GeometryError(f"{name} ids must form consecutive contiguous blocks")
