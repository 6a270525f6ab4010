"""Cylinder-with-cavity phantoms.

A phantom is a homogeneous cylinder (axis = z, centered on the origin,
spanning ``z in [-h/2, h/2]``) with one axis-aligned ellipsoidal void.
Lengths are mm throughout.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator

import numpy as np
from numba import njit
from scipy.optimize import minimize_scalar

from .geometry import AcquisitionGeometry

MAX_PLACEMENT_ATTEMPTS = 10_000
CSV_FIELDS = ["id", "radius_mm", "height_mm", "cx", "cy", "cz", "a", "b", "c", "material", "split"]
SPLITS = ("train", "val", "test")


class GenerationError(RuntimeError):
    pass


class Region(Enum):
    EXTERIOR = "exterior"
    MATERIAL = "cylinder-material"
    VOID = "void"


@dataclass(frozen=True)
class CylinderSpec:
    # radius or height of 0 is accepted as the empty (vacuum) object
    radius: float
    height: float
    material: str = "pmma"

    def __post_init__(self):
        if not (self.radius >= 0 and self.height >= 0) or not math.isfinite(self.radius + self.height):
            raise ValueError(f"invalid cylinder radius={self.radius}, height={self.height}")


@dataclass(frozen=True)
class EllipsoidCavity:
    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "semi_axes", tuple(float(v) for v in self.semi_axes))
        if len(self.center) != 3 or len(self.semi_axes) != 3:
            raise ValueError("center and semi_axes must be 3-vectors")
        if min(self.semi_axes) < 0:
            raise ValueError("semi-axes must be nonnegative")

    @property
    def is_empty(self) -> bool:
        return min(self.semi_axes) <= 0


@dataclass(frozen=True)
class Phantom:
    id: int
    cylinder: CylinderSpec
    cavity: EllipsoidCavity

    def params(self) -> np.ndarray:
        """Packed float64 parameters for the jitted kernels: R, h, cx, cy, cz, a, b, c."""
        return np.array(
            [self.cylinder.radius, self.cylinder.height, *self.cavity.center, *self.cavity.semi_axes],
            dtype=np.float64,
        )


@dataclass(frozen=True)
class PhantomParamRanges:
    radius_range: tuple[float, float] = (1.0, 25.0)
    height_range: tuple[float, float] = (20.0, 55.0)
    cavity_base_radius_range: tuple[float, float] = (0.1, 1.0)
    axis_ratio_range: tuple[float, float] = (0.7, 1.3)

    def __post_init__(self):
        for name in ("radius_range", "height_range", "cavity_base_radius_range", "axis_ratio_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValueError(f"{name} must satisfy 0 < min <= max, got {(lo, hi)}")


@dataclass(frozen=True)
class Ray:
    origin: tuple[float, float, float]
    direction: tuple[float, float, float]

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        if abs(np.linalg.norm(d) - 1.0) > 1e-12:
            raise ValueError("ray direction must be a unit vector")

    @classmethod
    def through(cls, origin, target) -> "Ray":
        o = np.asarray(origin, dtype=float)
        d = np.asarray(target, dtype=float) - o
        d = d / np.linalg.norm(d)
        return cls(tuple(o), tuple(d))


@dataclass
class PhantomSet:
    train: list[Phantom] = field(default_factory=list)
    val: list[Phantom] = field(default_factory=list)
    test: list[Phantom] = field(default_factory=list)

    def split(self, name: str) -> list[Phantom]:
        return getattr(self, name)

    def items(self) -> Iterator[tuple[str, Phantom]]:
        for name in SPLITS:
            for p in self.split(name):
                yield name, p

    def __len__(self):
        return len(self.train) + len(self.val) + len(self.test)


# --------------------------------------------------------------------------
# jitted ray geometry

@njit(cache=True)
def cylinder_interval(ox, oy, oz, dx, dy, dz, radius, height):
    """Parameter interval of the ray inside the finite cylinder; lo >= hi on a miss."""
    if radius <= 0.0 or height <= 0.0:
        return np.inf, -np.inf
    lo = -np.inf
    hi = np.inf
    a = dx * dx + dy * dy
    c = ox * ox + oy * oy - radius * radius
    if a == 0.0:
        if c >= 0.0:
            return np.inf, -np.inf
    else:
        b = ox * dx + oy * dy
        disc = b * b - a * c
        if disc <= 0.0:
            return np.inf, -np.inf
        sq = math.sqrt(disc)
        q = -(b + sq) if b >= 0.0 else -(b - sq)
        if q == 0.0:
            return np.inf, -np.inf
        r1 = q / a
        r2 = c / q
        lo = min(r1, r2)
        hi = max(r1, r2)
    half = 0.5 * height
    if dz == 0.0:
        if abs(oz) >= half:
            return np.inf, -np.inf
    else:
        t1 = (-half - oz) / dz
        t2 = (half - oz) / dz
        lo = max(lo, min(t1, t2))
        hi = min(hi, max(t1, t2))
    return lo, hi


@njit(cache=True)
def ellipsoid_interval(ox, oy, oz, dx, dy, dz, cx, cy, cz, sa, sb, sc):
    """Parameter interval of the ray inside the axis-aligned ellipsoid; lo >= hi on a miss."""
    if sa <= 0.0 or sb <= 0.0 or sc <= 0.0:
        return np.inf, -np.inf
    px = (ox - cx) / sa
    py = (oy - cy) / sb
    pz = (oz - cz) / sc
    qx = dx / sa
    qy = dy / sb
    qz = dz / sc
    a = qx * qx + qy * qy + qz * qz
    b = px * qx + py * qy + pz * qz
    c = px * px + py * py + pz * pz - 1.0
    disc = b * b - a * c
    if disc <= 0.0:
        return np.inf, -np.inf
    sq = math.sqrt(disc)
    q = -(b + sq) if b >= 0.0 else -(b - sq)
    if q == 0.0:
        return np.inf, -np.inf
    r1 = q / a
    r2 = c / q
    return min(r1, r2), max(r1, r2)


@njit(cache=True)
def segments(ox, oy, oz, dx, dy, dz, params, tmin):
    """Material and void pieces of the ray beyond ``tmin``.

    Returns ``(m0s, m0e, vs, ve, m1s, m1e)``: material before the cavity, the
    cavity, material after it.  Empty pieces have ``start >= end``.
    """
    c0, c1 = cylinder_interval(ox, oy, oz, dx, dy, dz, params[0], params[1])
    c0 = max(c0, tmin)
    if c0 >= c1:
        return 0.0, 0.0, 0.0, 0.0, 0.0, 0.0
    e0, e1 = ellipsoid_interval(ox, oy, oz, dx, dy, dz,
                                params[2], params[3], params[4], params[5], params[6], params[7])
    e0 = max(e0, c0)
    e1 = min(e1, c1)
    if e0 >= e1:
        return c0, c1, c1, c1, c1, c1
    return c0, e0, e0, e1, e1, c1


@njit(cache=True)
def material_length(ox, oy, oz, dx, dy, dz, params):
    m0s, m0e, vs, ve, m1s, m1e = segments(ox, oy, oz, dx, dy, dz, params, -np.inf)
    return max(m0e - m0s, 0.0) + max(m1e - m1s, 0.0)


@njit(cache=True)
def void_length(ox, oy, oz, dx, dy, dz, params):
    m0s, m0e, vs, ve, m1s, m1e = segments(ox, oy, oz, dx, dy, dz, params, -np.inf)
    return max(ve - vs, 0.0)


# --------------------------------------------------------------------------
# public geometry API

def ray_chords(phantom: Phantom, ray: Ray) -> list[tuple[str, float]]:
    """Ordered (region, length) pieces of a ray through the phantom.

    Regions are the cylinder's material id or ``"void"``.  A miss gives ``[]``.
    """
    o, d = ray.origin, ray.direction
    m0s, m0e, vs, ve, m1s, m1e = segments(o[0], o[1], o[2], d[0], d[1], d[2], phantom.params(), 0.0)
    out = []
    for label, s, e in ((phantom.cylinder.material, m0s, m0e), ("void", vs, ve),
                        (phantom.cylinder.material, m1s, m1e)):
        if e > s:
            out.append((label, float(e - s)))
    return out


def contains(phantom: Phantom, point) -> Region:
    x, y, z = (float(v) for v in point)
    cav = phantom.cavity
    if not cav.is_empty:
        q = sum(((p - c) / s) ** 2 for p, c, s in zip((x, y, z), cav.center, cav.semi_axes))
        if q < 1.0:
            return Region.VOID
    cyl = phantom.cylinder
    if x * x + y * y < cyl.radius ** 2 and abs(z) < 0.5 * cyl.height:
        return Region.MATERIAL
    return Region.EXTERIOR


def defect_size(phantom: Phantom, geometry: AcquisitionGeometry) -> float:
    """Cavity chord along the source ray through the cavity center."""
    src = geometry.source
    center = np.asarray(phantom.cavity.center)
    d = center - src
    d = d / np.linalg.norm(d)
    return float(void_length(src[0], src[1], src[2], d[0], d[1], d[2], phantom.params()))


# --------------------------------------------------------------------------
# generation

def cavity_inside(cylinder: CylinderSpec, cavity: EllipsoidCavity) -> bool:
    """Strict containment of the ellipsoid in the cylinder."""
    cx, cy, cz = cavity.center
    a, b, c = cavity.semi_axes
    if abs(cz) + c >= 0.5 * cylinder.height:
        return False
    R2 = cylinder.radius ** 2
    rho = math.hypot(cx, cy)
    if rho + max(a, b) < cylinder.radius:
        return True
    if rho + min(a, b) >= cylinder.radius:
        return False
    # widest radial reach is on the equatorial ellipse; sample then polish
    theta = np.linspace(0.0, 2 * np.pi, 1024, endpoint=False)
    r2 = (cx + a * np.cos(theta)) ** 2 + (cy + b * np.sin(theta)) ** 2
    k = int(np.argmax(r2))
    step = theta[1] - theta[0]
    res = minimize_scalar(
        lambda t: -((cx + a * math.cos(t)) ** 2 + (cy + b * math.sin(t)) ** 2),
        bounds=(theta[k] - step, theta[k] + step),
        method="bounded",
        options={"xatol": 1e-12},
    )
    return max(r2[k], -res.fun) < R2 * (1.0 - 1e-12)


def _draw_phantom(rng: np.random.Generator, ranges: PhantomParamRanges, pid: int, material: str) -> Phantom:
    radius = rng.uniform(*ranges.radius_range)
    height = rng.uniform(*ranges.height_range)
    cylinder = CylinderSpec(radius, height, material)
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        base = rng.uniform(*ranges.cavity_base_radius_range)
        semi = base * rng.uniform(*ranges.axis_ratio_range, size=3)
        phi = rng.uniform(0.0, 2 * np.pi)
        rho = rng.uniform(0.0, radius)
        z = rng.uniform(-0.5 * height, 0.5 * height)
        cavity = EllipsoidCavity((rho * math.cos(phi), rho * math.sin(phi), z), tuple(semi))
        if cavity_inside(cylinder, cavity):
            return Phantom(pid, cylinder, cavity)
    raise GenerationError(
        f"could not place a cavity in cylinder r={radius:.3f} h={height:.3f} "
        f"after {MAX_PLACEMENT_ATTEMPTS} attempts"
    )


def generate_phantom(seed: int, ranges: PhantomParamRanges = PhantomParamRanges(),
                     material: str = "pmma", pid: int = 0) -> Phantom:
    return _draw_phantom(np.random.default_rng(seed), ranges, pid, material)


def generate_set(seed: int, n_train: int, n_val: int, n_test: int,
                 ranges: PhantomParamRanges = PhantomParamRanges(), material: str = "pmma") -> PhantomSet:
    """Train/val/test phantoms with consecutive ids and one independent stream per split."""
    counts = (n_train, n_val, n_test)
    if min(counts) < 0:
        raise ValueError("split sizes must be nonnegative")
    streams = np.random.SeedSequence(seed).spawn(len(SPLITS))
    out = PhantomSet()
    pid = 0
    for name, n, ss in zip(SPLITS, counts, streams):
        rng = np.random.default_rng(ss)
        for _ in range(n):
            out.split(name).append(_draw_phantom(rng, ranges, pid, material))
            pid += 1
    return out


# --------------------------------------------------------------------------
# CSV persistence

def _fmt(x: float) -> str:
    return f"{x:.17g}"


def write_phantoms(path, phantoms: PhantomSet) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for split, p in phantoms.items():
            w.writerow([p.id, _fmt(p.cylinder.radius), _fmt(p.cylinder.height),
                        *map(_fmt, p.cavity.center), *map(_fmt, p.cavity.semi_axes),
                        p.cylinder.material, split])


def read_phantoms(path) -> PhantomSet:
    out = PhantomSet()
    seen = set()
    with open(Path(path), newline="") as fh:
        for row in csv.DictReader(fh):
            pid = int(row["id"])
            if pid in seen:
                raise ValueError(f"duplicate phantom id {pid} in {path}")
            seen.add(pid)
            split = row["split"]
            if split not in SPLITS:
                raise ValueError(f"unknown split {split!r} for phantom {pid}")
            p = Phantom(
                pid,
                CylinderSpec(float(row["radius_mm"]), float(row["height_mm"]), row["material"]),
                EllipsoidCavity(tuple(float(row[k]) for k in "cx cy cz".split()),
                                tuple(float(row[k]) for k in "abc")),
            )
            out.split(split).append(p)
    return out
