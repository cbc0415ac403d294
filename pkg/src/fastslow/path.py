"""Reference paths: uniform arc-length vertices plus a C2 cubic spline.

Path files are plain text::

    # fastslow-path v1
    x,y
    0.0,0.0
    ...

Rows are resampled to a uniform vertex spacing (0.25 m by default) along the
polyline.  A cubic spline through the resampled vertices (periodic when the
path is closed), parameterised by the vertex arc-length, provides smooth
positions, tangents and curvature.
Normals are the left-hand normal of the tangent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path as FsPath

import numpy as np
from scipy.interpolate import CubicSpline

from ._accel import njit

PATH_FORMAT = "fastslow-path v1"
DEFAULT_SPACING = 0.25


class PathError(ValueError):
    pass


@dataclass(frozen=True)
class PathVertex:
    id: int
    position: np.ndarray
    heading: float
    arc_length: float
    tangent: np.ndarray
    normal: np.ndarray


@njit
def _spline_eval(coef, spacing, s_query):
    """Position, first and second derivative of the spline at each ``s``.

    ``coef`` has shape (4, nseg, 2) in scipy's PPoly layout.  Columns are
    r, r', r'', r''' (x and y interleaved).
    """
    nseg = coef.shape[1]
    n = s_query.shape[0]
    out = np.empty((n, 8))
    for i in range(n):
        s = s_query[i]
        k = int(math.floor(s / spacing))
        if k < 0:
            k = 0
        elif k > nseg - 1:
            k = nseg - 1
        t = s - k * spacing
        for j in range(2):
            c3 = coef[0, k, j]
            c2 = coef[1, k, j]
            c1 = coef[2, k, j]
            c0 = coef[3, k, j]
            out[i, j] = ((c3 * t + c2) * t + c1) * t + c0
            out[i, 2 + j] = (3.0 * c3 * t + 2.0 * c2) * t + c1
            out[i, 4 + j] = 6.0 * c3 * t + 2.0 * c2
            out[i, 6 + j] = 6.0 * c3
    return out


@njit
def _frames(raw):
    """Unit tangent, left normal, curvature, |r'|, heading and d(curvature)/ds."""
    n = raw.shape[0]
    out = np.empty((n, 10))
    for i in range(n):
        dx = raw[i, 2]
        dy = raw[i, 3]
        ddx = raw[i, 4]
        ddy = raw[i, 5]
        speed = math.sqrt(dx * dx + dy * dy)
        tx = dx / speed
        ty = dy / speed
        out[i, 0] = raw[i, 0]
        out[i, 1] = raw[i, 1]
        out[i, 2] = tx
        out[i, 3] = ty
        out[i, 4] = -ty
        out[i, 5] = tx
        cross = dx * ddy - dy * ddx
        s3 = speed * speed * speed
        out[i, 6] = cross / s3
        out[i, 7] = speed
        out[i, 8] = math.atan2(ty, tx)
        dcross = dx * raw[i, 7] - dy * raw[i, 6]
        ds3 = 3.0 * speed * (dx * ddx + dy * ddy)
        out[i, 9] = dcross / s3 - cross * ds3 / (s3 * s3)
    return out


@dataclass(frozen=True)
class PathFrames:
    """Geometry sampled at a batch of arc-lengths (all arrays have length n)."""

    s: np.ndarray
    position: np.ndarray
    tangent: np.ndarray
    normal: np.ndarray
    curvature: np.ndarray
    speed: np.ndarray
    heading: np.ndarray
    curvature_rate: np.ndarray
    clamped: bool


class Path:
    """Uniformly resampled reference path with spline geometry."""

    def __init__(self, points, spacing: float = DEFAULT_SPACING, name: str = "path"):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise PathError("path needs at least two (x, y) points")
        if not np.all(np.isfinite(pts)):
            raise PathError("path contains non-finite coordinates")
        if spacing <= 0:
            raise PathError("vertex spacing must be positive")
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        keep = np.concatenate([[True], seg > 1e-12])
        pts = pts[keep]
        if pts.shape[0] < 2:
            raise PathError("path has zero length")
        chord = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
        # a tail shorter than 0.1% of a spacing snaps onto the last vertex
        n_vert = int(math.floor(chord[-1] / spacing + 1e-3)) + 1
        if n_vert < 3:
            raise PathError("path is shorter than two vertex spacings")
        s = spacing * np.arange(n_vert)
        verts = np.column_stack([np.interp(s, chord, pts[:, 0]), np.interp(s, chord, pts[:, 1])])
        # closed paths get a periodic spline; open ends use not-a-knot so the end
        # curvature follows the data instead of being forced to zero
        closed = bool(np.linalg.norm(verts[-1] - verts[0]) < 1e-6 * max(spacing, 1.0))
        if closed:
            verts[-1] = verts[0]
        spline = CubicSpline(s, verts, bc_type="periodic" if closed else "not-a-knot")
        self.closed = closed

        self.name = name
        self.spacing = float(spacing)
        self.s = s
        self.vertices = verts
        self.length = float(s[-1])
        self._coef = np.ascontiguousarray(spline.c)
        fr = self.frames(s)
        self.headings = fr.heading
        self.tangents = fr.tangent
        self.normals = fr.normal
        self.curvatures = fr.curvature

    @property
    def n_vertices(self) -> int:
        return self.s.size

    def vertex(self, i: int) -> PathVertex:
        if not 0 <= i < self.n_vertices:
            raise PathError(f"vertex {i} outside path with {self.n_vertices} vertices")
        return PathVertex(i, self.vertices[i].copy(), float(self.headings[i]), float(self.s[i]),
                          self.tangents[i].copy(), self.normals[i].copy())

    def clamp(self, s):
        return np.clip(s, 0.0, self.length)

    def frames(self, s) -> PathFrames:
        s = np.atleast_1d(np.asarray(s, dtype=float))
        sc = self.clamp(s)
        clamped = bool(np.any(sc != s))
        out = _frames(_spline_eval(self._coef, self.spacing, np.ascontiguousarray(sc)))
        return PathFrames(sc, out[:, 0:2], out[:, 2:4], out[:, 4:6], out[:, 6], out[:, 7],
                          out[:, 8], out[:, 9], clamped)

    def raw(self, s) -> np.ndarray:
        """Columns: x, y, tx, ty, nx, ny, curvature, |r'|, heading, d(curvature)/ds."""
        s = np.ascontiguousarray(self.clamp(np.atleast_1d(np.asarray(s, dtype=float))))
        return _frames(_spline_eval(self._coef, self.spacing, s))

    def vertex_at(self, s: float) -> int:
        return int(min(max(round(s / self.spacing), 0), self.n_vertices - 1))

    def project(self, position, s_guess: float | None = None, back: float = 2.0,
                ahead: float = 5.0) -> float:
        """Arc-length of the nearest path point.

        With ``s_guess`` the search is restricted to ``[s_guess - back, s_guess + ahead]``,
        which keeps progress on self-overlapping (multi-lap) paths.
        """
        p = np.asarray(position, dtype=float)
        if s_guess is None:
            lo, hi = 0, self.n_vertices - 1
        else:
            lo = max(int(math.floor((s_guess - back) / self.spacing)), 0)
            hi = min(int(math.ceil((s_guess + ahead) / self.spacing)), self.n_vertices - 1)
        d2 = np.sum((self.vertices[lo:hi + 1] - p) ** 2, axis=1)
        i = lo + int(np.argmin(d2))
        s = self.s[i]
        s_lo = self.s[max(i - 1, 0)]
        s_hi = self.s[min(i + 1, self.n_vertices - 1)]
        for _ in range(8):
            raw = _spline_eval(self._coef, self.spacing, np.array([s]))[0]
            diff = raw[0:2] - p
            f = raw[2] * diff[0] + raw[3] * diff[1]
            df = raw[2] ** 2 + raw[3] ** 2 + raw[4] * diff[0] + raw[5] * diff[1]
            if df <= 0:
                break
            step = f / df
            s = min(max(s - step, s_lo), s_hi)
            if abs(step) < 1e-13:
                break
        return float(s)


def circle_points(radius: float, laps: float = 1.0, n_per_lap: int = 720, center=(0.0, 0.0),
                  start_angle: float = -math.pi / 2) -> np.ndarray:
    """Counter-clockwise circle starting at ``start_angle``."""
    n = int(round(n_per_lap * laps)) + 1
    ang = start_angle + np.linspace(0.0, 2.0 * math.pi * laps, n)
    return np.column_stack([center[0] + radius * np.cos(ang), center[1] + radius * np.sin(ang)])


def read_path(path_file, spacing: float = DEFAULT_SPACING) -> Path:
    fp = FsPath(path_file)
    try:
        lines = fp.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise PathError(f"cannot read path file {fp}: {exc}") from exc
    if not lines or lines[0].strip().lstrip("#").strip() != PATH_FORMAT:
        raise PathError(f"{fp}: missing '# {PATH_FORMAT}' header")
    rows = []
    header_seen = False
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if not header_seen:
            if [c.strip() for c in line.split(",")] != ["x", "y"]:
                raise PathError(f"{fp}:{lineno}: expected column header 'x,y'")
            header_seen = True
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise PathError(f"{fp}:{lineno}: expected two columns")
        try:
            rows.append((float(parts[0]), float(parts[1])))
        except ValueError as exc:
            raise PathError(f"{fp}:{lineno}: {exc}") from exc
    return Path(np.array(rows), spacing=spacing, name=fp.stem)


def write_path(path_file, points) -> None:
    pts = np.asarray(points, dtype=float)
    with open(path_file, "w", encoding="utf-8") as fh:
        fh.write(f"# {PATH_FORMAT}\n")
        fh.write("x,y\n")
        for x, y in pts:
            fh.write(f"{x:.17g},{y:.17g}\n")
