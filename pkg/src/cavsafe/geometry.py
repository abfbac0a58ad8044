"""Intersection geometry and the coordinator database.

The coordinator stores entry order and planned trajectories and nothing else:
it never decides anything on a vehicle's behalf.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence


from .errors import ProtocolError, RegistrationError, UnknownPathError

ZONE_LENGTH = 212.0
LANE_WIDTH = 3.0


@dataclass(frozen=True)
class ConflictPoint:
    id: int
    x: float = math.nan
    y: float = math.nan


@dataclass(frozen=True)
class Path:
    """A lane-following route through the control zone.

    ``conflict_distances`` maps conflict point id to the distance from the
    path entry to that point.
    """

    id: int
    length: float
    conflict_distances: Mapping[int, float] = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        if not self.length > 0:
            raise ValueError(f"path {self.id}: length must be positive")
        dists = sorted(self.conflict_distances.values())
        for d in dists:
            if not 0.0 < d < self.length:
                raise ValueError(f"path {self.id}: conflict distance {d} outside (0, {self.length})")
        if any(b <= a for a, b in zip(dists, dists[1:])):
            raise ValueError(f"path {self.id}: conflict distances must be strictly increasing")
        object.__setattr__(self, "conflict_distances", dict(self.conflict_distances))


class Intersection:
    def __init__(self, paths: Sequence[Path], conflict_points: Sequence[ConflictPoint] = ()):
        self.paths: dict[int, Path] = {}
        for p in paths:
            if p.id in self.paths:
                raise ValueError(f"duplicate path id {p.id}")
            self.paths[p.id] = p
        self.conflict_points = {c.id: c for c in conflict_points}
        if len(self.conflict_points) != len(conflict_points):
            raise ValueError("duplicate conflict point id")

    def path(self, path_id: int) -> Path:
        try:
            return self.paths[path_id]
        except KeyError:
            raise UnknownPathError(f"unknown path id {path_id}") from None

    def shared_conflicts(self, path_a: int, path_b: int) -> list[tuple[int, float, float]]:
        """Conflict points on both paths as ``(id, dist_on_a, dist_on_b)``.

        A path never conflicts laterally with itself; same-path interaction is
        the rear-end constraint's job.
        """
        a = self.path(path_a)
        b = self.path(path_b)
        if path_a == path_b:
            return []
        common = sorted(set(a.conflict_distances) & set(b.conflict_distances))
        return [(n, a.conflict_distances[n], b.conflict_distances[n]) for n in common]


# --- default layout -------------------------------------------------------


@dataclass(frozen=True)
class _Line:
    x0: float
    y0: float
    dx: float
    dy: float
    length: float

    def point(self, s):
        return self.x0 + s * self.dx, self.y0 + s * self.dy


@dataclass(frozen=True)
class _Arc:
    cx: float
    cy: float
    r: float
    theta0: float
    sweep: float  # signed angle swept, radians

    @property
    def length(self):
        return self.r * abs(self.sweep)

    def point(self, s):
        th = self.theta0 + math.copysign(s / self.r, self.sweep)
        return self.cx + self.r * math.cos(th), self.cy + self.r * math.sin(th)

    def arclength_of_angle(self, theta):
        """Arc length at which the arc reaches ``theta``; None if off the arc."""
        d = (theta - self.theta0) * math.copysign(1.0, self.sweep)
        d = math.fmod(d, 2 * math.pi)
        if d < -1e-12:
            d += 2 * math.pi
        s = d * self.r
        if -1e-9 <= s <= self.length + 1e-9:
            return min(max(s, 0.0), self.length)
        return None


def _line_line(a: _Line, b: _Line):
    det = a.dx * (-b.dy) - a.dy * (-b.dx)
    if abs(det) < 1e-12:
        return []
    rx, ry = b.x0 - a.x0, b.y0 - a.y0
    sa = (rx * (-b.dy) - ry * (-b.dx)) / det
    sb = (a.dx * ry - a.dy * rx) / det
    if -1e-9 <= sa <= a.length + 1e-9 and -1e-9 <= sb <= b.length + 1e-9:
        return [(sa, sb)]
    return []


def _line_arc(a: _Line, b: _Arc):
    fx, fy = a.x0 - b.cx, a.y0 - b.cy
    bq = fx * a.dx + fy * a.dy
    cq = fx * fx + fy * fy - b.r * b.r
    disc = bq * bq - cq
    if disc < 0:
        return []
    out = []
    for s in {-bq - math.sqrt(disc), -bq + math.sqrt(disc)}:
        if -1e-9 <= s <= a.length + 1e-9:
            x, y = a.point(s)
            sb = b.arclength_of_angle(math.atan2(y - b.cy, x - b.cx))
            if sb is not None:
                out.append((s, sb))
    return out


def _arc_arc(a: _Arc, b: _Arc):
    dx, dy = b.cx - a.cx, b.cy - a.cy
    d = math.hypot(dx, dy)
    if d < 1e-12 or d > a.r + b.r or d < abs(a.r - b.r):
        return []
    l = (a.r**2 - b.r**2 + d * d) / (2 * d)
    h = math.sqrt(max(a.r**2 - l * l, 0.0))
    mx, my = a.cx + l * dx / d, a.cy + l * dy / d
    out = []
    for sgn in (1.0, -1.0):
        x, y = mx - sgn * h * dy / d, my + sgn * h * dx / d
        sa = a.arclength_of_angle(math.atan2(y - a.cy, x - a.cx))
        sb = b.arclength_of_angle(math.atan2(y - b.cy, x - b.cx))
        if sa is not None and sb is not None:
            out.append((sa, sb))
    return out


def _intersect(a, b):
    if isinstance(a, _Line) and isinstance(b, _Line):
        return _line_line(a, b)
    if isinstance(a, _Line):
        return _line_arc(a, b)
    if isinstance(b, _Line):
        return [(sa, sb) for sb, sa in _line_arc(b, a)]
    return _arc_arc(a, b)


def _straight(x0, y0, dx, dy, length):
    return [_Line(x0, y0, dx, dy, length)]


def _left_turn(x0, y0, dx, dy, length, radius):
    """Approach straight, quarter-circle left turn, departure straight."""
    arc_len = radius * math.pi / 2
    leg = (length - arc_len) / 2
    first = _Line(x0, y0, dx, dy, leg)
    ex, ey = first.point(leg)
    # left normal of heading (dx, dy) is (-dy, dx)
    cx, cy = ex - dy * radius, ey + dx * radius
    theta0 = math.atan2(ey - cy, ex - cx)
    arc = _Arc(cx, cy, radius, theta0, math.pi / 2)
    ax, ay = arc.point(arc_len)
    return [first, arc, _Line(ax, ay, -dy, dx, leg)]


def _default_centerlines(length: float):
    half = length / 2
    inner, outer = LANE_WIDTH / 2, 1.5 * LANE_WIDTH
    box = 2 * LANE_WIDTH
    # turn radius chosen so the arc spans the inner lanes' box corner to corner
    radius = box + inner
    approach = (length - radius * math.pi / 2) / 2
    return [
        ("W-E through", _straight(-half, -outer, 1.0, 0.0, length)),
        ("E-W through", _straight(half, outer, -1.0, 0.0, length)),
        ("S-N through", _straight(outer, -half, 0.0, 1.0, length)),
        ("N-S through", _straight(-outer, half, 0.0, -1.0, length)),
        ("W-N left", _left_turn(-box - approach, -inner, 1.0, 0.0, length, radius)),
        ("E-S left", _left_turn(box + approach, inner, -1.0, 0.0, length, radius)),
    ]


def default_intersection(length: float = ZONE_LENGTH) -> Intersection:
    """Four-leg intersection with six paths and dedicated left-turn lanes.

    Through movements use the outer lanes; the two left turns run from an
    inner approach lane to an inner departure lane, so no two paths share a
    segment and every interaction between different paths is a crossing.
    Conflict distances come from exact centerline intersections.
    """
    lines = _default_centerlines(length)
    dists: list[dict[int, float]] = [dict() for _ in lines]
    points: list[ConflictPoint] = []
    for ia in range(len(lines)):
        for ib in range(ia + 1, len(lines)):
            hits = []
            off_a = 0.0
            for sega in lines[ia][1]:
                off_b = 0.0
                for segb in lines[ib][1]:
                    for sa, sb in _intersect(sega, segb):
                        x, y = sega.point(sa)
                        hits.append((off_a + sa, off_b + sb, x, y))
                    off_b += segb.length
                off_a += sega.length
            hits.sort()
            kept: list[float] = []
            for da, db, x, y in hits:
                # a crossing exactly at a segment joint is reported twice
                if any(abs(da - d) < 1e-6 for d in kept):
                    continue
                kept.append(da)
                cid = len(points)
                points.append(ConflictPoint(cid, x, y))
                dists[ia][cid] = da
                dists[ib][cid] = db
    paths = [Path(k, length, dists[k], name) for k, (name, _) in enumerate(lines)]
    return Intersection(paths, points)


# --- coordinator ----------------------------------------------------------


@dataclass(frozen=True)
class PlanEntry:
    path_id: int
    t0: float
    v0: float
    plan: object = None


class Coordinator:
    """Entry queue plus the planned trajectory of every vehicle in the zone."""

    def __init__(self, intersection: Intersection, v_min: float = 0.0, v_max: float = math.inf):
        self.intersection = intersection
        self.v_min = v_min
        self.v_max = v_max
        self.queue: list[int] = []
        self.plans: dict[int, PlanEntry] = {}
        self.exited: set[int] = set()
        self._next_id = 1
        self._last_t0 = -math.inf

    def register_cav(self, path_id: int, t0: float, v0: float) -> int:
        self.intersection.path(path_id)
        if not self.v_min <= v0 <= self.v_max:
            raise RegistrationError(
                f"initial speed {v0} m/s outside [{self.v_min}, {self.v_max}]"
            )
        if t0 < self._last_t0:
            raise RegistrationError(f"entry time {t0} precedes previous entry {self._last_t0}")
        cav = self._next_id
        self._next_id += 1
        self._last_t0 = t0
        self.queue.append(cav)
        self.plans[cav] = PlanEntry(path_id, float(t0), float(v0))
        return cav

    def set_plan(self, cav_id: int, plan) -> None:
        entry = self._entry(cav_id)
        if entry.plan is not None:
            raise ProtocolError(f"CAV {cav_id} already has a plan")
        self.plans[cav_id] = PlanEntry(entry.path_id, entry.t0, entry.v0, plan)

    def mark_exited(self, cav_id: int) -> None:
        self._entry(cav_id)
        self.exited.add(cav_id)
        self.queue.remove(cav_id)

    def _entry(self, cav_id: int) -> PlanEntry:
        try:
            return self.plans[cav_id]
        except KeyError:
            raise ProtocolError(f"CAV {cav_id} is not registered") from None

    def path_of(self, cav_id: int) -> int:
        return self._entry(cav_id).path_id

    def plan_of(self, cav_id: int):
        return self._entry(cav_id).plan

    def shared_conflicts(self, path_a: int, path_b: int):
        return self.intersection.shared_conflicts(path_a, path_b)

    def preceding_cav(self, cav_id: int) -> Optional[int]:
        """Latest earlier-queued vehicle on the same path still in the zone."""
        path = self._entry(cav_id).path_id
        if cav_id not in self.queue:
            return None
        idx = self.queue.index(cav_id)
        for other in reversed(self.queue[:idx]):
            if self.plans[other].path_id == path:
                return other
        return None

    def snapshot_for_planning(self, cav_id: int) -> list[tuple[int, int, object]]:
        self._entry(cav_id)
        out = []
        for other in self.queue:
            if other == cav_id:
                break
            entry = self.plans[other]
            if entry.plan is None:
                raise ProtocolError(f"CAV {other} is queued before {cav_id} but has no plan")
            out.append((other, entry.path_id, entry.plan))
        return out

    def check_invariants(self) -> None:
        t0s = [self.plans[c].t0 for c in self.queue]
        if any(b < a for a, b in zip(t0s, t0s[1:])):
            raise ProtocolError("queue not in entry-time order")
        if self.queue != sorted(self.queue):
            raise ProtocolError("queue is not a restriction of registration order")
        if set(self.queue) & self.exited:
            raise ProtocolError("exited CAV still queued")
