"""Detection arc, image grid and time grid for line-detector PAT projection imaging.

Lengths are in mm, times in microseconds, angles in radians.  Image arrays are
indexed ``values[iy, ix]`` with ``y = y_min + iy * dy`` and ``x = x_min + ix * dx``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

DEFAULT_SOUND_SPEED = 1.5  # mm/us, water at room temperature
DEFAULT_RADIUS = 50.0
DEFAULT_N_SENSORS = 64
DEFAULT_INCREMENT = math.radians(2.8)

_ANGLE_TOL = 1e-12


class GeometryError(ValueError):
    """Invalid or inconsistent geometry configuration."""


@dataclass(frozen=True)
class ImageGrid:
    n: int = 256
    x_range: tuple[float, float] = (-12.5, 12.5)
    y_range: tuple[float, float] = (-20.0, 5.0)

    def __post_init__(self):
        if self.n < 2:
            raise GeometryError(f"grid needs at least 2 pixels per side, got {self.n}")
        if not (self.x_range[1] > self.x_range[0] and self.y_range[1] > self.y_range[0]):
            raise GeometryError(f"degenerate grid ranges {self.x_range} x {self.y_range}")
        object.__setattr__(self, "x_range", (float(self.x_range[0]), float(self.x_range[1])))
        object.__setattr__(self, "y_range", (float(self.y_range[0]), float(self.y_range[1])))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n, self.n)

    @property
    def dx(self) -> float:
        return (self.x_range[1] - self.x_range[0]) / (self.n - 1)

    @property
    def dy(self) -> float:
        return (self.y_range[1] - self.y_range[0]) / (self.n - 1)

    @property
    def spacing(self) -> float:
        """Finest pixel spacing, used to size quadratures."""
        return min(self.dx, self.dy)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_range[0], self.x_range[1], self.n)

    @property
    def y(self) -> np.ndarray:
        return np.linspace(self.y_range[0], self.y_range[1], self.n)

    def meshgrid(self) -> tuple[np.ndarray, np.ndarray]:
        """Pixel-centre coordinates ``(X, Y)`` shaped like the image."""
        return np.meshgrid(self.x, self.y, indexing="xy")

    def nearest_index(self, point) -> tuple[int, int]:
        """``(iy, ix)`` of the grid node closest to ``point``; raises if outside."""
        x, y = float(point[0]), float(point[1])
        tol = 1e-9 * max(self.dx, self.dy)
        if not (self.x_range[0] - tol <= x <= self.x_range[1] + tol
                and self.y_range[0] - tol <= y <= self.y_range[1] + tol):
            raise GeometryError(f"point {tuple(point)} lies outside the image grid")
        ix = int(round((x - self.x_range[0]) / self.dx))
        iy = int(round((y - self.y_range[0]) / self.dy))
        return min(max(iy, 0), self.n - 1), min(max(ix, 0), self.n - 1)


@dataclass(frozen=True)
class DetectionGeometry:
    """Sensors equispaced on an arc of a circle centred at the origin.

    Each sensor represents an arc cell of width ``angular_increment`` centred on
    its angle, so the measured arc S spans ``n_sensors * angular_increment``.
    """

    radius: float
    angles: tuple[float, ...]
    angular_increment: float
    center_angle: float
    sound_speed: float = DEFAULT_SOUND_SPEED

    @property
    def n_sensors(self) -> int:
        return len(self.angles)

    @cached_property
    def positions(self) -> np.ndarray:
        a = np.asarray(self.angles)
        return self.radius * np.stack([np.cos(a), np.sin(a)], axis=1)

    @cached_property
    def normals(self) -> np.ndarray:
        return self.positions / self.radius

    @property
    def arc_span(self) -> float:
        return self.n_sensors * self.angular_increment

    @property
    def sensor_span(self) -> float:
        """Angle between the first and last sensor."""
        return (self.n_sensors - 1) * self.angular_increment

    @property
    def is_full_circle(self) -> bool:
        return self.arc_span >= 2 * math.pi - 1e-9

    @property
    def arc_element(self) -> float:
        """Arc length represented by one sensor."""
        return self.radius * self.angular_increment

    def on_arc(self, angle) -> np.ndarray:
        """Whether boundary points at ``angle`` belong to the measured arc S."""
        if self.is_full_circle:
            return np.ones(np.shape(angle), dtype=bool)
        offset = _wrap(np.asarray(angle, dtype=float) - self.center_angle)
        return np.abs(offset) <= 0.5 * self.arc_span + _ANGLE_TOL

    def edge_distance(self, angle) -> np.ndarray:
        """Angular distance from ``angle`` to the nearer arc endpoint (0 off-arc)."""
        if self.is_full_circle:
            return np.full(np.shape(angle), np.inf)
        offset = np.abs(_wrap(np.asarray(angle, dtype=float) - self.center_angle))
        return np.maximum(0.5 * self.arc_span - offset, 0.0)

    def to_json(self) -> str:
        return json.dumps({
            "radius_mm": self.radius,
            "n_sensors": self.n_sensors,
            "angular_increment_deg": math.degrees(self.angular_increment),
            "center_angle_deg": math.degrees(self.center_angle),
            "sound_speed_mm_per_us": self.sound_speed,
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "DetectionGeometry":
        d = json.loads(text) if isinstance(text, str) else dict(text)
        return make_arc_geometry(
            d["radius_mm"], d["n_sensors"], math.radians(d["angular_increment_deg"]),
            math.radians(d.get("center_angle_deg", -90.0)),
            d.get("sound_speed_mm_per_us", DEFAULT_SOUND_SPEED))


@dataclass(frozen=True)
class TimeGrid:
    n_samples: int
    dt: float
    t_start: float

    def __post_init__(self):
        if self.dt <= 0:
            raise GeometryError(f"time step must be positive, got {self.dt}")
        if self.n_samples < 3:
            raise GeometryError(f"need at least 3 time samples, got {self.n_samples}")
        if self.t_start < 0:
            raise GeometryError(f"t_start must be non-negative, got {self.t_start}")

    @property
    def t(self) -> np.ndarray:
        return self.t_start + self.dt * np.arange(self.n_samples)

    @property
    def t_end(self) -> float:
        return self.t_start + (self.n_samples - 1) * self.dt


def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def make_arc_geometry(radius: float = DEFAULT_RADIUS, n_sensors: int = DEFAULT_N_SENSORS,
                      angular_increment: float = DEFAULT_INCREMENT,
                      center_angle: float = -math.pi / 2,
                      sound_speed: float = DEFAULT_SOUND_SPEED) -> DetectionGeometry:
    """Equispaced sensors on a circular arc centred about ``center_angle``."""
    if not radius > 0:
        raise GeometryError(f"radius must be positive, got {radius}")
    if n_sensors < 2:
        raise GeometryError(f"need at least 2 sensors, got {n_sensors}")
    if not angular_increment > 0:
        raise GeometryError(f"angular increment must be positive, got {angular_increment}")
    if n_sensors * angular_increment > 2 * math.pi * (1 + 1e-9):
        raise GeometryError("arc span exceeds the full circle")
    if not sound_speed > 0:
        raise GeometryError(f"sound speed must be positive, got {sound_speed}")
    offsets = (np.arange(n_sensors) - 0.5 * (n_sensors - 1)) * angular_increment
    angles = tuple(float(a) for a in center_angle + offsets)
    return DetectionGeometry(float(radius), angles, float(angular_increment),
                             float(center_angle), float(sound_speed))


def full_circle_geometry(n_sensors: int, radius: float = DEFAULT_RADIUS,
                         sound_speed: float = DEFAULT_SOUND_SPEED) -> DetectionGeometry:
    return make_arc_geometry(radius, n_sensors, 2 * math.pi / n_sensors, -math.pi / 2, sound_speed)


def half_circle_geometry() -> DetectionGeometry:
    """64 sensors, 2.8 deg pitch, 50 mm radius, centred on the -y axis."""
    return make_arc_geometry()


def desk_geometry(n_sensors: int = 16) -> DetectionGeometry:
    """Same half-circle aperture as :func:`half_circle_geometry` with fewer sensors."""
    return make_arc_geometry(DEFAULT_RADIUS, n_sensors, DEFAULT_INCREMENT * DEFAULT_N_SENSORS / n_sensors)


def max_distance(geom: DetectionGeometry, grid: ImageGrid) -> float:
    """Largest sensor-to-pixel distance (attained at a grid corner)."""
    cx = np.array([grid.x_range[0], grid.x_range[1], grid.x_range[0], grid.x_range[1]])
    cy = np.array([grid.y_range[0], grid.y_range[0], grid.y_range[1], grid.y_range[1]])
    p = geom.positions
    d = np.hypot(p[:, 0:1] - cx[None], p[:, 1:2] - cy[None])
    return float(d.max())


def default_time_grid(geom: DetectionGeometry, grid: ImageGrid) -> TimeGrid:
    """``dt = dx / (2 v)``, first sample at ``dt``, power-of-two length covering the grid."""
    dt = grid.spacing / (2 * geom.sound_speed)
    needed = max_distance(geom, grid) / (geom.sound_speed * dt)
    m = 4
    while m < needed:
        m *= 2
    return TimeGrid(m, dt, dt)


def check_time_grid(geom: DetectionGeometry, grid: ImageGrid, tgrid: TimeGrid) -> None:
    """Raise ``GeometryError`` unless ``tgrid`` resolves and covers ``grid``."""
    v = geom.sound_speed
    if v * tgrid.dt > 0.5 * grid.spacing * (1 + 1e-9):
        raise GeometryError(
            f"time step too coarse: v*dt = {v * tgrid.dt:.4g} mm > dx/2 = {grid.spacing / 2:.4g} mm")
    if v * tgrid.t_end < max_distance(geom, grid) * (1 - 1e-12):
        raise GeometryError(
            f"time grid ends at {v * tgrid.t_end:.4g} mm of travel, grid needs "
            f"{max_distance(geom, grid):.4g} mm")


def antipodal_direction(geom: DetectionGeometry, r, s_index: int) -> np.ndarray:
    """Point where the ray from ``r`` pointing away from sensor ``s_index`` meets the circle.

    The point is returned whether or not it lies on the measured arc.
    """
    r = np.asarray(r, dtype=float)
    if np.hypot(r[0], r[1]) >= geom.radius:
        raise GeometryError(f"point {tuple(r)} is not strictly inside the detection circle")
    d = r - geom.positions[s_index]
    d = d / np.hypot(d[0], d[1])
    return r + _exit_distance(r, d, geom.radius) * d


def _exit_distance(r, d, radius):
    """Positive root t of |r + t d| = radius for unit direction(s) d."""
    rd = np.sum(r * d, axis=-1)
    return -rd + np.sqrt(rd * rd - np.sum(r * r, axis=-1) + radius * radius)


def visible_mask(geom: DetectionGeometry, grid: ImageGrid, n_directions: int = 360) -> np.ndarray:
    """Pixels from which every sampled antipodal ray pair hits the measured arc."""
    X, Y = grid.meshgrid()
    inside = np.hypot(X, Y) < geom.radius
    if geom.is_full_circle:
        return inside
    theta = np.pi * np.arange(n_directions) / n_directions
    dirs = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    pts = np.stack([X[inside], Y[inside]], axis=1)
    ok = np.ones(len(pts), dtype=bool)
    for d in dirs:
        hits = []
        for dd in (d, -d):
            t = _exit_distance(pts, dd[None, :], geom.radius)
            q = pts + t[:, None] * dd[None, :]
            hits.append(geom.on_arc(np.arctan2(q[:, 1], q[:, 0])))
        ok &= hits[0] | hits[1]
    mask = np.zeros(grid.shape, dtype=bool)
    mask[inside] = ok
    return mask
