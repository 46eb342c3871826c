"""Sampling domains: hypercubes, balls, and boxes with excised holes.

Every domain draws interior and boundary point batches from a caller-supplied
Generator and answers containment queries. Domains are closed; holes are open,
so points on a hole surface count as contained (they are boundary points of
the perforated domain).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np


class GeometryError(ValueError):
    """Ill-posed domain or a rejection sampler that cannot make progress."""


_STRICT = 1e-12  # relative slack separating open holes from their surfaces


def _unit_directions(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal((n, d))
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    return v / np.maximum(norms, 1e-300)


@dataclass(frozen=True)
class Hypercube:
    """Axis-aligned cube given by center and full side length."""

    center: tuple
    side: float

    def __post_init__(self):
        if self.side <= 0:
            raise GeometryError("side must be positive")

    @property
    def d(self) -> int:
        return len(self.center)

    @property
    def half(self) -> float:
        return self.side / 2.0

    def sample_interior(self, n: int, rng: np.random.Generator) -> np.ndarray:
        c = np.asarray(self.center, dtype=float)
        return rng.uniform(-self.half, self.half, size=(n, self.d)) + c

    def sample_boundary(self, m: int, rng: np.random.Generator) -> np.ndarray:
        # all 2d faces have equal measure, pick uniformly then fill the face
        c = np.asarray(self.center, dtype=float)
        X = rng.uniform(-self.half, self.half, size=(m, self.d)) + c
        face = rng.integers(0, 2 * self.d, size=m)
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        X[np.arange(m), axis] = c[axis] + sign * self.half
        return X

    def contains(self, X: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center, dtype=float)
        return (np.abs(X - c) <= self.half + 1e-12).all(axis=1)

    def boundary_distance(self, X: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center, dtype=float)
        return np.abs(self.half - np.abs(X - c).max(axis=1))


@dataclass(frozen=True)
class Ball:
    center: tuple
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise GeometryError("radius must be positive")

    @property
    def d(self) -> int:
        return len(self.center)

    def sample_interior(self, n: int, rng: np.random.Generator) -> np.ndarray:
        # isotropic direction times radius with density r^(d-1): U^(1/d) scaling
        c = np.asarray(self.center, dtype=float)
        dirs = _unit_directions(n, self.d, rng)
        r = self.radius * rng.uniform(0.0, 1.0, size=(n, 1)) ** (1.0 / self.d)
        return c + r * dirs

    def sample_boundary(self, m: int, rng: np.random.Generator) -> np.ndarray:
        c = np.asarray(self.center, dtype=float)
        return c + self.radius * _unit_directions(m, self.d, rng)

    def contains(self, X: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center, dtype=float)
        return np.linalg.norm(X - c, axis=1) <= self.radius * (1.0 + 1e-12)

    def boundary_distance(self, X: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center, dtype=float)
        return np.abs(np.linalg.norm(X - c, axis=1) - self.radius)


# ---------------------------------------------------------------------------
# holes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Circle:
    """Round hole in a 2-d domain."""

    center: tuple
    radius: float

    @property
    def d(self) -> int:
        return 2

    @property
    def bounding_radius(self) -> float:
        return self.radius

    def contains_open(self, X: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center, dtype=float)
        return np.linalg.norm(X - c, axis=1) < self.radius * (1.0 - _STRICT)

    def sample_surface(self, m: int, rng: np.random.Generator) -> np.ndarray:
        c = np.asarray(self.center, dtype=float)
        th = rng.uniform(0.0, 2.0 * np.pi, size=m)
        return c + self.radius * np.stack([np.cos(th), np.sin(th)], axis=1)

    def surface_distance(self, X: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center, dtype=float)
        return np.abs(np.linalg.norm(X - c, axis=1) - self.radius)


@dataclass(frozen=True)
class Sphere:
    """Round hole in a 3-d domain."""

    center: tuple
    radius: float

    @property
    def d(self) -> int:
        return 3

    @property
    def bounding_radius(self) -> float:
        return self.radius

    def contains_open(self, X: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center, dtype=float)
        return np.linalg.norm(X - c, axis=1) < self.radius * (1.0 - _STRICT)

    def sample_surface(self, m: int, rng: np.random.Generator) -> np.ndarray:
        c = np.asarray(self.center, dtype=float)
        return c + self.radius * _unit_directions(m, 3, rng)

    def surface_distance(self, X: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center, dtype=float)
        return np.abs(np.linalg.norm(X - c, axis=1) - self.radius)


@dataclass(frozen=True)
class Ellipse:
    """Axis-aligned elliptic hole in a 2-d domain."""

    center: tuple
    semi_axes: tuple

    def __post_init__(self):
        if len(self.semi_axes) != 2 or min(self.semi_axes) <= 0:
            raise GeometryError("ellipse needs two positive semi-axes")

    @property
    def d(self) -> int:
        return 2

    @property
    def bounding_radius(self) -> float:
        return float(max(self.semi_axes))

    def _level(self, X: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center, dtype=float)
        a = np.asarray(self.semi_axes, dtype=float)
        z = (X - c) / a
        return (z * z).sum(axis=1) - 1.0

    def contains_open(self, X: np.ndarray) -> np.ndarray:
        return self._level(X) < -_STRICT

    @cached_property
    def _arc_table(self):
        # cumulative arc length on a 256-segment grid; inverted at sample time
        a, b = self.semi_axes
        theta = np.linspace(0.0, 2.0 * np.pi, 257)
        speed = np.sqrt((a * np.sin(theta)) ** 2 + (b * np.cos(theta)) ** 2)
        seg = 0.5 * (speed[1:] + speed[:-1]) * (theta[1] - theta[0])
        s = np.concatenate([[0.0], np.cumsum(seg)])
        return theta, s

    def sample_surface(self, m: int, rng: np.random.Generator) -> np.ndarray:
        # uniform in arc length, then parametric point (exactly on the curve)
        theta, s = self._arc_table
        targets = rng.uniform(0.0, s[-1], size=m)
        ix = np.clip(np.searchsorted(s, targets, side="right") - 1, 0, len(s) - 2)
        frac = (targets - s[ix]) / (s[ix + 1] - s[ix])
        th = theta[ix] + frac * (theta[1] - theta[0])
        c = np.asarray(self.center, dtype=float)
        a, b = self.semi_axes
        return c + np.stack([a * np.cos(th), b * np.sin(th)], axis=1)

    def surface_distance(self, X: np.ndarray) -> np.ndarray:
        # first-order distance |g| / |grad g| of the level function
        c = np.asarray(self.center, dtype=float)
        a = np.asarray(self.semi_axes, dtype=float)
        g = self._level(X)
        grad = 2.0 * (X - c) / (a * a)
        norm = np.maximum(np.linalg.norm(grad, axis=1), 1e-300)
        return np.abs(g) / norm


# ---------------------------------------------------------------------------
# perforated box
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PerforatedBox:
    """Closed box minus a set of open, pairwise disjoint holes strictly inside."""

    box: Hypercube
    holes: tuple

    def __post_init__(self):
        object.__setattr__(self, "holes", tuple(self.holes))
        d = self.box.d
        cbox = np.asarray(self.box.center, dtype=float)
        for h in self.holes:
            if h.d != d:
                raise GeometryError("hole dimension does not match the box")
            ch = np.asarray(h.center, dtype=float)
            if np.any(np.abs(ch - cbox) + h.bounding_radius >= self.box.half):
                raise GeometryError(f"hole at {h.center} is not strictly inside the box")
        for i in range(len(self.holes)):
            for j in range(i + 1, len(self.holes)):
                hi, hj = self.holes[i], self.holes[j]
                gap = np.linalg.norm(np.asarray(hi.center, dtype=float)
                                     - np.asarray(hj.center, dtype=float))
                if gap <= hi.bounding_radius + hj.bounding_radius:
                    raise GeometryError(
                        f"holes at {hi.center} and {hj.center} may overlap")

    @property
    def d(self) -> int:
        return self.box.d

    def _in_any_hole(self, X: np.ndarray) -> np.ndarray:
        if not self.holes:
            return np.zeros(len(X), dtype=bool)
        mask = self.holes[0].contains_open(X)
        for h in self.holes[1:]:
            mask |= h.contains_open(X)
        return mask

    def contains(self, X: np.ndarray) -> np.ndarray:
        return self.box.contains(X) & ~self._in_any_hole(X)

    def sample_interior(self, n: int, rng: np.random.Generator,
                        min_acceptance: float = 0.01,
                        check_after: int = 10_000) -> np.ndarray:
        """Rejection sampling from the box; raises if the acceptance rate
        drops below min_acceptance once check_after draws were consumed."""
        out = np.empty((n, self.d), dtype=float)
        got = 0
        drawn = 0
        while got < n:
            chunk = max(2 * (n - got), 4096)
            cand = self.box.sample_interior(chunk, rng)
            keep = cand[~self._in_any_hole(cand)]
            take = min(n - got, len(keep))
            out[got:got + take] = keep[:take]
            got += take
            drawn += chunk
            if drawn >= check_after and got / drawn < min_acceptance:
                raise GeometryError(
                    f"rejection acceptance {got / drawn:.4f} below "
                    f"{min_acceptance} after {drawn} draws")
        return out

    def sample_boundary(self, m: int, rng: np.random.Generator) -> np.ndarray:
        """Half the points on the outer walls, the rest split evenly across
        the hole surfaces (first holes absorb any remainder)."""
        if not self.holes:
            return self.box.sample_boundary(m, rng)
        m_walls = m // 2
        rem = m - m_walls
        parts = [self.box.sample_boundary(m_walls, rng)] if m_walls else []
        base, extra = divmod(rem, len(self.holes))
        for k, h in enumerate(self.holes):
            q = base + (1 if k < extra else 0)
            if q:
                parts.append(h.sample_surface(q, rng))
        return np.concatenate(parts, axis=0)

    def boundary_distance(self, X: np.ndarray) -> np.ndarray:
        dist = self.box.boundary_distance(X)
        for h in self.holes:
            dist = np.minimum(dist, h.surface_distance(X))
        return dist


def build_grid_holes(box: Hypercube, per_axis: int, radius_range,
                     rng: np.random.Generator) -> tuple:
    """Regular per_axis^d grid of round holes with radii drawn uniformly from
    radius_range, in row-major grid order."""
    lo, hi = float(radius_range[0]), float(radius_range[1])
    if not 0 < lo <= hi:
        raise GeometryError("radius_range must be positive and ordered")
    d = box.d
    spacing = box.side / per_axis
    start = np.asarray(box.center, dtype=float) - box.half + spacing / 2.0
    axes = [start[i] + spacing * np.arange(per_axis) for i in range(d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    centers = np.stack([m.ravel() for m in mesh], axis=1)
    radii = rng.uniform(lo, hi, size=len(centers))
    if d == 2:
        return tuple(Circle(tuple(c), float(r)) for c, r in zip(centers, radii))
    if d == 3:
        return tuple(Sphere(tuple(c), float(r)) for c, r in zip(centers, radii))
    raise GeometryError("grid holes are defined for 2-d and 3-d boxes")
