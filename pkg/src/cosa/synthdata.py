"""Synthetic shape dataset: surface samplers, cloud files and manifests.

Every shape is sampled with an area-preserving map from the unit square
``(u, v)``, so uniform ``(u, v)`` gives points uniform on the surface.
Composite surfaces split ``u`` into slabs proportional to part areas.

Shapes symmetric under ``p -> -p`` (everything except cone and pyramid)
draw ``n // 2`` points and append their reflections.  Each point is still
uniform on the surface, and the sample centroid is the origin, so
``normalize`` leaves the canonical shape unshifted.
"""
from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .geometry import PointCloud, normalize

FORMAT_TAG = "cosa-xyz"
FORMAT_VERSION = 1
MANIFEST_VERSION = 1


class ShapeKind(enum.IntEnum):
    SPHERE = 0
    CUBE = 1
    CYLINDER = 2
    CONE = 3
    TORUS = 4
    PYRAMID = 5
    DISK = 6
    CAPSULE = 7

    @property
    def label(self) -> str:
        return self.name.lower()


SYMMETRIC = {ShapeKind.SPHERE, ShapeKind.CUBE, ShapeKind.CYLINDER, ShapeKind.TORUS,
             ShapeKind.DISK, ShapeKind.CAPSULE}

TORUS_MAJOR = 1.0
TORUS_MINOR = 0.4
CAPSULE_RADIUS = 0.5
CAPSULE_HALF_LENGTH = 0.5


class CloudFormatError(ValueError):
    """Malformed ``cosa-xyz`` file; the message names the offending line."""


# --- area-preserving maps from [0,1)^2 ------------------------------------

def _disk(s, t, radius=1.0):
    rho = radius * np.sqrt(s)
    th = 2 * np.pi * t
    return rho * np.cos(th), rho * np.sin(th)


def _sphere(u, v):
    z = 1.0 - 2.0 * u
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    ph = 2 * np.pi * v
    return np.stack([r * np.cos(ph), r * np.sin(ph), z], axis=1)


def _triangle(s, t, a, b, c):
    # sqrt warp keeps the density uniform over the triangle
    r = np.sqrt(s)[:, None]
    t = t[:, None]
    return (1 - r) * a + r * (1 - t) * b + r * t * c


def _split(u, areas):
    """Assign each u to a part by area and rescale it to [0,1) inside the part."""
    edges = np.concatenate([[0.0], np.cumsum(areas) / np.sum(areas)])
    part = np.clip(np.searchsorted(edges, u, side="right") - 1, 0, len(areas) - 1)
    lo, hi = edges[part], edges[part + 1]
    local = np.clip((u - lo) / (hi - lo), 0.0, np.nextafter(1.0, 0.0))
    return part, local


def _cube(u, v):
    face, s = _split(u, [1.0] * 6)
    a, b = 2 * s - 1, 2 * v - 1
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    out = np.empty((u.size, 3))
    for k in range(3):
        m = axis == k
        others = [j for j in range(3) if j != k]
        out[m, k] = sign[m]
        out[m, others[0]] = a[m]
        out[m, others[1]] = b[m]
    return out


def _cylinder(u, v, radius=1.0, half=1.0):
    side = 2 * np.pi * radius * 2 * half
    cap = np.pi * radius ** 2
    part, s = _split(u, [side, cap, cap])
    out = np.empty((u.size, 3))
    m = part == 0
    ph = 2 * np.pi * s[m]
    out[m] = np.stack([radius * np.cos(ph), radius * np.sin(ph), -half + 2 * half * v[m]], 1)
    for idx, z in ((1, half), (2, -half)):
        m = part == idx
        x, y = _disk(s[m], v[m], radius)
        out[m] = np.stack([x, y, np.full(x.shape, z)], 1)
    return out


def _cone(u, v, radius=1.0, height=2.0):
    slant = math.hypot(radius, height)
    part, s = _split(u, [np.pi * radius * slant, np.pi * radius ** 2])
    out = np.empty((u.size, 3))
    top, bottom = height / 2, -height / 2
    m = part == 0
    # lateral area element grows linearly with distance from the apex
    f = np.sqrt(s[m])
    th = 2 * np.pi * v[m]
    out[m] = np.stack([radius * f * np.cos(th), radius * f * np.sin(th), top - height * f], 1)
    m = part == 1
    x, y = _disk(s[m], v[m], radius)
    out[m] = np.stack([x, y, np.full(x.shape, bottom)], 1)
    return out


def _torus_angle(s, big=TORUS_MAJOR, small=TORUS_MINOR):
    # Invert F(th) = (big*th + small*sin th) / (2 pi big), the CDF of the tube
    # angle under the area element (big + small cos th). F is strictly increasing.
    target = 2 * np.pi * big * s
    th = 2 * np.pi * s
    for _ in range(50):
        g = big * th + small * np.sin(th) - target
        th = th - g / (big + small * np.cos(th))
    return th


def _torus(u, v):
    th = _torus_angle(u)
    ph = 2 * np.pi * v
    ring = TORUS_MAJOR + TORUS_MINOR * np.cos(th)
    return np.stack([ring * np.cos(ph), ring * np.sin(ph), TORUS_MINOR * np.sin(th)], 1)


_PYR_BASE = np.array([[-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1]], dtype=float)
_PYR_APEX = np.array([0.0, 0.0, 1.0])


def _pyramid(u, v):
    tris = [(_PYR_APEX, _PYR_BASE[i], _PYR_BASE[(i + 1) % 4]) for i in range(4)]
    tris += [(_PYR_BASE[0], _PYR_BASE[1], _PYR_BASE[2]), (_PYR_BASE[0], _PYR_BASE[2], _PYR_BASE[3])]
    areas = [0.5 * np.linalg.norm(np.cross(b - a, c - a)) for a, b, c in tris]
    part, s = _split(u, areas)
    out = np.empty((u.size, 3))
    for i, (a, b, c) in enumerate(tris):
        m = part == i
        out[m] = _triangle(s[m], v[m], a, b, c)
    return out


def _flat_disk(u, v):
    x, y = _disk(u, v)
    return np.stack([x, y, np.zeros_like(x)], 1)


def _capsule(u, v):
    r, h = CAPSULE_RADIUS, CAPSULE_HALF_LENGTH
    side = 2 * np.pi * r * 2 * h
    cap = 2 * np.pi * r ** 2
    part, s = _split(u, [side, cap, cap])
    out = np.empty((u.size, 3))
    m = part == 0
    ph = 2 * np.pi * s[m]
    out[m] = np.stack([r * np.cos(ph), r * np.sin(ph), -h + 2 * h * v[m]], 1)
    for idx, sign in ((1, 1.0), (2, -1.0)):
        m = part == idx
        # hemisphere: height above the equator is uniform (Archimedes)
        zc = s[m]
        rr = r * np.sqrt(np.clip(1 - zc * zc, 0.0, None))
        ph = 2 * np.pi * v[m]
        out[m] = np.stack([rr * np.cos(ph), rr * np.sin(ph), sign * (h + r * zc)], 1)
    return out


_SAMPLERS = {
    ShapeKind.SPHERE: _sphere,
    ShapeKind.CUBE: _cube,
    ShapeKind.CYLINDER: _cylinder,
    ShapeKind.CONE: _cone,
    ShapeKind.TORUS: _torus,
    ShapeKind.PYRAMID: _pyramid,
    ShapeKind.DISK: _flat_disk,
    ShapeKind.CAPSULE: _capsule,
}


def surface_residual(kind: ShapeKind, pts: np.ndarray) -> np.ndarray:
    """Distance-like residual of canonical (un-normalized) points to the ideal surface."""
    kind = ShapeKind(kind)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    rxy = np.hypot(x, y)
    if kind == ShapeKind.SPHERE:
        return np.abs(np.linalg.norm(pts, axis=1) - 1)
    if kind == ShapeKind.CUBE:
        return np.abs(np.abs(pts).max(axis=1) - 1)
    if kind == ShapeKind.CYLINDER:
        side = np.abs(rxy - 1) + np.maximum(np.abs(z) - 1, 0)
        cap = np.abs(np.abs(z) - 1) + np.maximum(rxy - 1, 0)
        return np.minimum(side, cap)
    if kind == ShapeKind.CONE:
        side = np.abs(rxy - (1 - z) / 2) + np.maximum(np.abs(z) - 1, 0)
        base = np.abs(z + 1) + np.maximum(rxy - 1, 0)
        return np.minimum(side, base)
    if kind == ShapeKind.TORUS:
        return np.abs(np.hypot(rxy - TORUS_MAJOR, z) - TORUS_MINOR)
    if kind == ShapeKind.PYRAMID:
        base = np.abs(z + 1) + np.maximum(np.abs(pts[:, :2]).max(axis=1) - 1, 0)
        # lateral faces: max(|x|,|y|) = (1 - z) / 2
        side = np.abs(np.maximum(np.abs(x), np.abs(y)) - (1 - z) / 2) + np.maximum(np.abs(z) - 1, 0)
        return np.minimum(side, base)
    if kind == ShapeKind.DISK:
        return np.abs(z) + np.maximum(rxy - 1, 0)
    r, h = CAPSULE_RADIUS, CAPSULE_HALF_LENGTH
    axial = np.clip(z, -h, h)
    return np.abs(np.hypot(rxy, z - axial) - r)


def sample_surface(kind: ShapeKind, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` points uniformly on the canonical (un-normalized) surface."""
    kind = ShapeKind(kind)
    sampler = _SAMPLERS[kind]
    if kind in SYMMETRIC:
        half = n // 2
        uv = rng.random((n - half, 2))
        pts = sampler(uv[:, 0], uv[:, 1])
        return np.concatenate([pts[:half], -pts[:half], pts[half:]], axis=0)
    uv = rng.random((n, 2))
    return sampler(uv[:, 0], uv[:, 1])


def generate_shape(kind: ShapeKind, n: int, seed: int, jitter: float = 0.0) -> PointCloud:
    if n < 4:
        raise ValueError(f"need at least 4 points, got n={n}")
    if jitter < 0:
        raise ValueError(f"jitter must be non-negative, got {jitter}")
    kind = ShapeKind(kind)
    rng = np.random.default_rng(seed)
    pts = sample_surface(kind, n, rng)
    if jitter > 0:
        pts = pts + rng.normal(scale=jitter, size=pts.shape)
    return normalize(PointCloud(pts, int(kind)))


def derive_seed(master_seed: int, class_index: int, sample_index: int, split: str) -> int:
    """Child seed from numpy's ``SeedSequence`` hash of the four identifiers.

    The split tag is entropy, so train and test seeds come from disjoint
    streams for the same (class, sample) pair.
    """
    tag = {"train": 0x7472, "test": 0x7465}[split]
    ss = np.random.SeedSequence([master_seed, class_index, sample_index, tag])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# --- cloud files ------------------------------------------------------------

def format_cloud(p: PointCloud) -> str:
    label = -1 if p.label is None else p.label
    lines = [f"{FORMAT_TAG} {FORMAT_VERSION} {p.n} {label}"]
    # repr() of a Python float is the shortest string that round-trips
    lines.extend(f"{float(x)!r} {float(y)!r} {float(z)!r}" for x, y, z in p.points)
    return "\n".join(lines) + "\n"


def write_cloud(path, p: PointCloud) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_cloud(p))


def parse_cloud(text: str) -> PointCloud:
    lines = text.splitlines()
    if not lines:
        raise CloudFormatError("line 1: empty file")
    head = lines[0].split()
    if len(head) != 4 or head[0] != FORMAT_TAG:
        raise CloudFormatError(f"line 1: bad header {lines[0]!r}")
    if head[1] != str(FORMAT_VERSION):
        raise CloudFormatError(f"line 1: unsupported version {head[1]!r}")
    try:
        n, label = int(head[2]), int(head[3])
    except ValueError:
        raise CloudFormatError(f"line 1: non-integer count or label in {lines[0]!r}") from None
    if n < 1:
        raise CloudFormatError(f"line 1: point count must be positive, got {n}")
    body = lines[1:]
    while body and not body[-1].strip():
        body.pop()
    if len(body) != n:
        raise CloudFormatError(f"line {len(body) + 2}: expected {n} points, found {len(body)}")
    pts = np.empty((n, 3))
    for i, line in enumerate(body):
        tok = line.split()
        if len(tok) != 3:
            raise CloudFormatError(f"line {i + 2}: expected 3 coordinates, got {len(tok)}")
        try:
            row = [float(t) for t in tok]
        except ValueError:
            raise CloudFormatError(f"line {i + 2}: non-numeric token in {line!r}") from None
        if not all(math.isfinite(c) for c in row):
            raise CloudFormatError(f"line {i + 2}: non-finite coordinate in {line!r}")
        pts[i] = row
    return PointCloud(pts, None if label < 0 else label)


def read_cloud(path) -> PointCloud:
    with open(path, encoding="utf-8") as fh:
        return parse_cloud(fh.read())


# --- datasets ---------------------------------------------------------------

@dataclass
class DatasetConfig:
    out_dir: str
    n_train: int = 50
    n_test: int = 10
    n: int = 256
    jitter: float = 0.01
    master_seed: int = 0
    num_classes: int = 8


@dataclass
class ManifestEntry:
    path: str
    label: int
    seed: int


@dataclass
class DatasetManifest:
    Z: int
    n: int
    jitter: float
    master_seed: int
    train: List[ManifestEntry] = field(default_factory=list)
    test: List[ManifestEntry] = field(default_factory=list)
    root: Optional[str] = None  # directory that entry paths are relative to
    version: int = MANIFEST_VERSION

    def to_json(self) -> str:
        doc = {
            "version": self.version,
            "Z": self.Z,
            "n": self.n,
            "jitter": self.jitter,
            "master_seed": self.master_seed,
            "train": [vars(e) for e in self.train],
            "test": [vars(e) for e in self.test],
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def resolve(self, entry: ManifestEntry) -> Path:
        return Path(self.root or ".") / entry.path

    def load(self, split: str) -> List[PointCloud]:
        entries = self.train if split == "train" else self.test
        clouds = []
        for e in entries:
            c = read_cloud(self.resolve(e))
            clouds.append(PointCloud(c.points, e.label))
        return clouds


def make_dataset(cfg: DatasetConfig) -> DatasetManifest:
    if cfg.n_train < 1 or cfg.n_test < 1:
        raise ValueError("per-class train and test counts must be at least 1")
    if not 1 <= cfg.num_classes <= len(ShapeKind):
        raise ValueError(f"num_classes must be in [1, {len(ShapeKind)}]")
    root = Path(cfg.out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc}") from exc
    if not os.access(root, os.W_OK):
        raise OSError(f"dataset directory {root} is not writable")

    man = DatasetManifest(Z=cfg.num_classes, n=cfg.n, jitter=cfg.jitter,
                          master_seed=cfg.master_seed, root=str(root))
    for split, count, entries in (("train", cfg.n_train, man.train), ("test", cfg.n_test, man.test)):
        for kind in list(ShapeKind)[: cfg.num_classes]:
            for i in range(count):
                seed = derive_seed(cfg.master_seed, int(kind), i, split)
                rel = f"{split}/{kind.label}_{i:03d}.xyz"
                write_cloud(root / rel, generate_shape(kind, cfg.n, seed, cfg.jitter))
                entries.append(ManifestEntry(rel, int(kind), seed))

    seen = {(e.label, e.seed) for e in man.train}
    if any((e.label, e.seed) in seen for e in man.test):
        raise RuntimeError("seed collision between train and test splits")
    (root / "manifest.json").write_text(man.to_json(), encoding="utf-8")
    return man


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest version {doc.get('version')!r}")
    man = DatasetManifest(
        Z=int(doc["Z"]), n=int(doc["n"]), jitter=float(doc["jitter"]),
        master_seed=int(doc["master_seed"]),
        train=[ManifestEntry(**e) for e in doc["train"]],
        test=[ManifestEntry(**e) for e in doc["test"]],
        root=str(path.parent),
    )
    for e in man.train + man.test:
        if not man.resolve(e).is_file():
            raise FileNotFoundError(f"{path}: referenced cloud {e.path} is missing")
    if len({e.label for e in man.train}) != man.Z:
        raise ValueError(f"{path}: Z={man.Z} but train split has {len({e.label for e in man.train})} labels")
    return man
