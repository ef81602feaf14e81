"""TSP instances, data generation, min-max normalization, tours and TSPLIB I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import (
    DegenerateInstance,
    InvalidParameter,
    InvalidScale,
    MalformedFile,
    SizeMismatch,
    UnsupportedFormat,
)

DEGENERATE_EPS = 1e-12


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True, eq=False)
class Instance:
    """A set of 2-D city coordinates, stored as an ``(n, 2)`` float64 array."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise SizeMismatch(f"points must have shape (n, 2), got {pts.shape}")
        if pts.shape[0] < 3:
            raise InvalidScale(f"an instance needs at least 3 points, got {pts.shape[0]}")
        if not np.all(np.isfinite(pts)):
            raise InvalidParameter("instance coordinates must be finite")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return int(self.points.shape[0])

    def __eq__(self, other):
        if not isinstance(other, Instance):
            return NotImplemented
        return np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash(self.points.tobytes())

    def __len__(self):
        return self.n


@dataclass
class Dataset:
    instances: list[Instance]
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.instances:
            raise InvalidParameter("a dataset must contain at least one instance")

    def __len__(self):
        return len(self.instances)

    def to_json(self) -> str:
        return json.dumps(
            {
                "provenance": self.provenance,
                "instances": [inst.points.tolist() for inst in self.instances],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "Dataset":
        obj = json.loads(text)
        return cls([Instance(np.asarray(p)) for p in obj["instances"]], obj.get("provenance", {}))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "Dataset":
        return cls.from_json(Path(path).read_text())


def generate_uniform(n: int, rng=None) -> Instance:
    if n < 3:
        raise InvalidScale(f"n must be >= 3, got {n}")
    rng = as_rng(rng)
    return Instance(rng.random((n, 2)))


def normalize_array(points: np.ndarray) -> np.ndarray:
    """Min-max normalize with one scalar min/max pooled over both axes.

    Works on a single ``(n, 2)`` array or a batch ``(B, n, 2)``.
    """
    pts = np.asarray(points, dtype=np.float64)
    axes = tuple(range(pts.ndim - 2, pts.ndim))
    lo = pts.min(axis=axes, keepdims=True)
    hi = pts.max(axis=axes, keepdims=True)
    span = hi - lo
    if np.any(span <= DEGENERATE_EPS):
        raise DegenerateInstance("coordinate range is zero; cannot normalize")
    return (pts - lo) / span


def normalize(inst: Instance) -> Instance:
    return Instance(normalize_array(inst.points))


def coordinate_span(inst: Instance) -> float:
    """``max - min`` over all scalar coordinates; the factor normalize() divides by."""
    return float(inst.points.max() - inst.points.min())


def generate_benchmark(n: int, lam: float, count: int, rng=None) -> Dataset:
    """Uniform points plus zero-mean Gaussian noise with a random diagonal covariance.

    One covariance is drawn per instance with both diagonal entries uniform on
    ``[0, lam]``; every instance is normalized afterwards.
    """
    if not 0.0 <= lam <= 1.0:
        raise InvalidParameter(f"lambda must lie in [0, 1], got {lam}")
    if n < 3:
        raise InvalidScale(f"n must be >= 3, got {n}")
    if count < 1:
        raise InvalidParameter("count must be positive")
    seed = seed_record(rng)
    rng = as_rng(rng)
    out = []
    for _ in range(count):
        x = rng.random((n, 2))
        variances = rng.uniform(0.0, lam, size=2)
        y = rng.standard_normal((n, 2)) * np.sqrt(variances)
        out.append(normalize(Instance(x + y)))
    return Dataset(out, {"lambda": float(lam), "n": int(n), "count": int(count), "seed": seed})


def seed_record(rng):
    if isinstance(rng, (int, np.integer)):
        return int(rng)
    return None


def validate_tour(n: int, tour: Sequence[int]) -> np.ndarray:
    order = np.asarray(tour, dtype=np.int64)
    if order.ndim != 1 or order.shape[0] != n:
        raise SizeMismatch(f"tour has {order.shape} entries, instance has {n} cities")
    if not np.array_equal(np.sort(order), np.arange(n)):
        raise SizeMismatch("tour is not a permutation of 0..n-1")
    return order


def tour_length(inst: Instance | np.ndarray, tour: Sequence[int]) -> float:
    pts = inst.points if isinstance(inst, Instance) else np.asarray(inst, dtype=np.float64)
    order = validate_tour(pts.shape[0], tour)
    p = pts[order]
    return float(np.sum(np.linalg.norm(p - np.roll(p, -1, axis=0), axis=1)))


def canonical_tour(tour: Sequence[int]) -> np.ndarray:
    """Rotate to start at city 0 and orient so the second city is the smaller neighbour."""
    order = np.asarray(tour, dtype=np.int64)
    order = np.roll(order, -int(np.argmin(order)))
    if order.shape[0] > 2 and order[-1] < order[1]:
        order = np.concatenate([order[:1], order[:0:-1]])
    return order


def batch_tour_lengths(coords: np.ndarray, tours: np.ndarray) -> np.ndarray:
    """Cycle lengths for ``coords`` of shape (B, n, 2) and ``tours`` of shape (B, n)."""
    p = np.take_along_axis(coords, tours[:, :, None], axis=1)
    return np.linalg.norm(p - np.roll(p, -1, axis=1), axis=2).sum(axis=1)


def distance_matrix(points: np.ndarray) -> np.ndarray:
    diff = points[..., :, None, :] - points[..., None, :, :]
    return np.sqrt((diff**2).sum(-1))


# --- TSPLIB (EUC_2D subset) ---------------------------------------------


def parse_tsplib(text: str) -> Instance:
    header: dict[str, str] = {}
    coords: list[tuple[float, float]] = []
    in_coords = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        upper = line.upper()
        if upper == "EOF":
            break
        if upper.startswith("NODE_COORD_SECTION"):
            in_coords = True
            continue
        if in_coords:
            parts = line.split()
            if len(parts) < 3:
                raise MalformedFile(f"line {lineno}: expected 'index x y', got {line!r}")
            try:
                coords.append((float(parts[1]), float(parts[2])))
            except ValueError as exc:
                raise MalformedFile(f"line {lineno}: bad coordinate {line!r}") from exc
            continue
        if ":" in line:
            key, value = line.split(":", 1)
            header[key.strip().upper()] = value.strip()

    wtype = header.get("EDGE_WEIGHT_TYPE")
    if wtype is None:
        raise MalformedFile("missing EDGE_WEIGHT_TYPE")
    if wtype.upper() != "EUC_2D":
        raise UnsupportedFormat(f"only EUC_2D is supported, got {wtype}")
    if "DIMENSION" not in header:
        raise MalformedFile("missing DIMENSION")
    try:
        dim = int(header["DIMENSION"])
    except ValueError as exc:
        raise MalformedFile(f"bad DIMENSION {header['DIMENSION']!r}") from exc
    if not in_coords:
        raise MalformedFile("missing NODE_COORD_SECTION")
    if len(coords) != dim:
        raise MalformedFile(f"DIMENSION is {dim} but {len(coords)} coordinates were given")
    return Instance(np.array(coords))


def write_tsplib(inst: Instance, name: str = "instance") -> str:
    lines = [
        f"NAME : {name}",
        "TYPE : TSP",
        f"DIMENSION : {inst.n}",
        "EDGE_WEIGHT_TYPE : EUC_2D",
        "NODE_COORD_SECTION",
    ]
    lines += [f"{i + 1} {x!r} {y!r}" for i, (x, y) in enumerate(inst.points.tolist())]
    lines.append("EOF")
    return "\n".join(lines) + "\n"


def load_tsplib(path) -> Instance:
    return parse_tsplib(Path(path).read_text())


def bundled_path(name: str) -> Path:
    """Path to a TSPLIB file shipped in ``psrotsp/data``."""
    return Path(__file__).parent / "data" / name
