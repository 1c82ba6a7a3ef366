"""On-disk formats, dataset manifests, the synthetic shape generator, and
checkpoints.

Binary layouts (all integers u32 little-endian, floats f32 little-endian):

    point cloud   b"PCF1" N C  then N*C floats row-major
    point labels  b"PLB1" N    then N labels
    checkpoint    b"MLMSPT01" len config-utf8  count
                  count x (len name-utf8  rank  extents...  floats)
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .model import ConfigError, ModelConfig, ParameterStore, parameter_shapes
from .pointcloud import PointCloud
from .tensor import Tensor

PCF_MAGIC = b"PCF1"
PLB_MAGIC = b"PLB1"
CKPT_MAGIC = b"MLMSPT01"

SHAPE_FAMILIES = ("sphere", "cube", "torus", "cylinder")


class FormatError(ValueError):
    """Malformed file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, msg: str, offset: Optional[int] = None, path=None):
        where = f" at byte {offset}" if offset is not None else ""
        src = f"{path}: " if path else ""
        super().__init__(f"{src}{msg}{where}")
        self.offset = offset


class CheckpointError(ValueError):
    pass


class _Reader:
    def __init__(self, buf: bytes, path=None, error=FormatError):
        self.buf, self.pos, self.path, self.error = buf, 0, path, error

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise self._err(f"truncated {what}: need {n} bytes, {len(self.buf) - self.pos} left")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def _err(self, msg):
        if self.error is FormatError:
            return FormatError(msg, self.pos, self.path)
        return self.error(f"{self.path}: {msg} at byte {self.pos}" if self.path else f"{msg} at byte {self.pos}")


# point clouds and labels

def write_pointcloud(path, cloud_or_positions) -> None:
    arr = cloud_or_positions.features if isinstance(cloud_or_positions, PointCloud) else cloud_or_positions
    arr = np.ascontiguousarray(arr, dtype="<f4")
    n, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(PCF_MAGIC + struct.pack("<II", n, c) + arr.tobytes())


def read_point_array(path) -> np.ndarray:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4, "magic") != PCF_MAGIC:
        raise FormatError("bad magic, expected PCF1", 0, path)
    n = r.u32("point count")
    c = r.u32("channel count")
    if n == 0:
        raise FormatError("point cloud has no points", 4, path)
    if c < 3:
        raise FormatError(f"need at least 3 channels, got {c}", 8, path)
    start = r.pos
    payload = r.take(4 * n * c, f"payload ({n} x {c} floats)")
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} trailing bytes after payload", r.pos, path)
    arr = np.frombuffer(payload, dtype="<f4").reshape(n, c).astype(np.float32)
    bad = np.flatnonzero(~np.isfinite(arr.reshape(-1)))
    if len(bad):
        raise FormatError("non-finite coordinate", start + 4 * int(bad[0]), path)
    return arr


def load_pointcloud(path, labels_path=None, shape_label: Optional[int] = None) -> PointCloud:
    arr = read_point_array(path)
    labels = read_labels(labels_path) if labels_path is not None else None
    if labels is not None and len(labels) != len(arr):
        raise FormatError(f"{len(labels)} labels for {len(arr)} points", None, labels_path)
    attrs = arr[:, 3:] if arr.shape[1] > 3 else None
    return PointCloud(arr[:, :3], attrs, labels, shape_label)


def write_labels(path, labels) -> None:
    lab = np.ascontiguousarray(labels, dtype="<u4")
    with open(path, "wb") as fh:
        fh.write(PLB_MAGIC + struct.pack("<I", len(lab)) + lab.tobytes())


def read_labels(path) -> np.ndarray:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4, "magic") != PLB_MAGIC:
        raise FormatError("bad magic, expected PLB1", 0, path)
    n = r.u32("label count")
    payload = r.take(4 * n, f"payload ({n} labels)")
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} trailing bytes after payload", r.pos, path)
    return np.frombuffer(payload, dtype="<u4").astype(np.int64)


# manifests

@dataclass
class Sample:
    points: str
    label: int  # shape class (cls) or category (seg)
    labels: Optional[str] = None  # per-point label file (seg)


@dataclass
class DatasetManifest:
    task: str
    class_names: list
    samples: list
    parts: dict = field(default_factory=dict)  # category -> list of part ids (seg)
    root: Path = field(default_factory=Path)

    @property
    def num_classes(self) -> int:
        if self.task == "cls":
            return len(self.class_names)
        return 1 + max(p for ps in self.parts.values() for p in ps)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def load(self) -> list:
        clouds = []
        for s in self.samples:
            lab = self.resolve(s.labels) if s.labels else None
            cloud = load_pointcloud(self.resolve(s.points), lab, s.label)
            if self.task == "seg":
                allowed = set(self.parts[s.label])
                if not set(np.unique(cloud.point_labels).tolist()) <= allowed:
                    raise FormatError(f"labels outside part set {sorted(allowed)}", None, lab)
            clouds.append(cloud)
        return clouds

    def to_text(self) -> str:
        lines = ["# mlmspt dataset manifest", f"task,{self.task}"]
        for i, name in enumerate(self.class_names):
            if self.task == "cls":
                lines.append(f"class,{i},{name}")
            else:
                lines.append(f"category,{i},{name},{' '.join(map(str, self.parts[i]))}")
        for s in self.samples:
            if self.task == "cls":
                lines.append(f"sample,{s.points},{s.label}")
            else:
                lines.append(f"sample,{s.points},{s.labels},{s.label}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    task, names, parts, samples = None, {}, {}, []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        rec = [f.strip() for f in line.split(",")]
        try:
            if rec[0] == "task":
                task = rec[1]
            elif rec[0] == "class":
                names[int(rec[1])] = rec[2]
            elif rec[0] == "category":
                names[int(rec[1])] = rec[2]
                parts[int(rec[1])] = [int(x) for x in rec[3].split()]
            elif rec[0] == "sample" and task == "cls":
                samples.append(Sample(rec[1], int(rec[2])))
            elif rec[0] == "sample" and task == "seg":
                samples.append(Sample(rec[1], int(rec[3]), rec[2]))
            else:
                raise ValueError(rec[0])
        except (IndexError, ValueError):
            raise FormatError(f"line {lineno}: bad manifest record {line!r}", None, path) from None
    if task not in ("cls", "seg"):
        raise FormatError("manifest lacks a valid 'task' record", None, path)
    if sorted(names) != list(range(len(names))):
        raise FormatError("class table indices must be 0..n-1", None, path)
    for s in samples:
        if s.label not in names:
            raise FormatError(f"sample {s.points} has label {s.label} outside the class table", None, path)
    return DatasetManifest(task, [names[i] for i in range(len(names))], samples, parts, path.parent)


# synthetic shapes

@dataclass
class SynthConfig:
    families: tuple = SHAPE_FAMILIES
    per_class: int = 8
    points: int = 256
    noise: float = 0.0
    seed: int = 0
    task: str = "cls"

    def validate(self) -> None:
        if self.points % 4 or self.points < 4:
            raise ConfigError(f"points per cloud ({self.points}) must be a positive multiple of 4")
        unknown = set(self.families) - set(SHAPE_FAMILIES)
        if unknown or not self.families:
            raise ConfigError(f"unknown shape families {sorted(unknown)}; choose from {SHAPE_FAMILIES}")
        if len(set(self.families)) != len(self.families):
            raise ConfigError("shape families must be distinct")
        if self.per_class < 1:
            raise ConfigError("per_class must be >= 1")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        if self.task not in ("cls", "seg"):
            raise ConfigError(f"task must be cls or seg, got {self.task!r}")


def sample_sphere(rng, n: int):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v, (v[:, 2] < 0).astype(np.int64)  # parts: upper / lower hemisphere


def sample_cube(rng, n: int):
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    pts = np.empty((n, 3))
    for a in range(3):
        on = axis == a
        others = [b for b in range(3) if b != a]
        pts[on, a] = sign[on]
        pts[on, others[0]] = uv[on, 0]
        pts[on, others[1]] = uv[on, 1]
    return pts, (axis != 2).astype(np.int64)  # parts: top/bottom vs sides


def sample_torus(rng, n: int, major: float = 1.0, minor: float = 0.35):
    pts, labels = [], []
    need = n
    while need > 0:
        u = rng.uniform(0, 2 * np.pi, size=2 * need)
        v = rng.uniform(0, 2 * np.pi, size=2 * need)
        # area element is proportional to major + minor*cos(v)
        keep = rng.uniform(0, 1, size=2 * need) < (major + minor * np.cos(v)) / (major + minor)
        u, v = u[keep][:need], v[keep][:need]
        ring = major + minor * np.cos(v)
        pts.append(np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1))
        labels.append((np.cos(v) < 0).astype(np.int64))  # parts: outer / inner half
        need -= len(u)
    return np.concatenate(pts), np.concatenate(labels)


def sample_cylinder(rng, n: int, radius: float = 0.5, height: float = 2.0):
    lateral = 2 * np.pi * radius * height
    cap = np.pi * radius**2
    part = rng.choice(3, size=n, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, size=n)
    r = np.where(part == 0, radius, radius * np.sqrt(rng.uniform(0, 1, size=n)))
    z = np.where(part == 0, rng.uniform(-height / 2, height / 2, size=n),
                 np.where(part == 1, height / 2, -height / 2))
    pts = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    return pts, (part != 0).astype(np.int64)  # parts: body / caps


SAMPLERS = {"sphere": sample_sphere, "cube": sample_cube, "torus": sample_torus, "cylinder": sample_cylinder}


def normalize_unit_sphere(pts: np.ndarray) -> np.ndarray:
    pts = pts - pts.mean(axis=0)
    return pts / np.linalg.norm(pts, axis=1).max()


def generate_synthetic(cfg: SynthConfig, out_dir) -> Path:
    """Write a dataset of ``per_class`` clouds per family plus its manifest.

    For segmentation, family j owns part ids 2j (first part) and 2j+1.
    Returns the manifest path.
    """
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(cfg.seed).spawn(len(cfg.families))
    samples, parts = [], {}
    for j, (fam, ss) in enumerate(zip(cfg.families, seeds)):
        (out / fam).mkdir(exist_ok=True)
        parts[j] = [2 * j, 2 * j + 1]
        rng = np.random.default_rng(ss)
        for s in range(cfg.per_class):
            pts, lab = SAMPLERS[fam](rng, cfg.points)
            if cfg.noise > 0:
                pts = pts + rng.normal(scale=cfg.noise, size=pts.shape)
            pts = normalize_unit_sphere(pts).astype(np.float32)
            rel = f"{fam}/{s:04d}.pcf"
            write_pointcloud(out / rel, pts)
            if cfg.task == "seg":
                rel_lab = f"{fam}/{s:04d}.plb"
                write_labels(out / rel_lab, lab + 2 * j)
                samples.append(Sample(rel, j, rel_lab))
            else:
                samples.append(Sample(rel, j))
    manifest = DatasetManifest(cfg.task, list(cfg.families), samples, parts if cfg.task == "seg" else {}, out)
    path = out / "manifest.txt"
    manifest.write(path)
    return path


# checkpoints

def save_checkpoint(params: ParameterStore, cfg: Optional[ModelConfig], path) -> None:
    chunks = [CKPT_MAGIC]
    text = (cfg.to_text() if cfg is not None else "").encode("utf-8")
    chunks.append(struct.pack("<I", len(text)) + text)
    chunks.append(struct.pack("<I", len(params)))
    for name, t in params.items():
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        chunks.append(struct.pack("<I", len(nb)) + nb)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def load_checkpoint(path, dtype=np.float32):
    """Returns (ParameterStore, ModelConfig or None).

    When the file carries a config, every stored parameter is checked against
    the shapes that config implies.
    """
    r = _Reader(Path(path).read_bytes(), path, CheckpointError)
    if r.take(8, "magic") != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic or unsupported version, expected MLMSPT01")
    text = r.take(r.u32("config length"), "config block").decode("utf-8")
    try:
        cfg = ModelConfig.from_text(text) if text.strip() else None
    except (ConfigError, TypeError) as exc:
        raise CheckpointError(f"{path}: invalid config block: {exc}") from None
    count = r.u32("parameter count")
    params = ParameterStore()
    for _ in range(count):
        name = r.take(r.u32("name length"), "parameter name").decode("utf-8")
        rank = r.u32(f"rank of {name}")
        ext = tuple(r.u32(f"extent of {name}") for _ in range(rank))
        size = math.prod(ext)
        data = np.frombuffer(r.take(4 * size, f"data of {name}"), dtype="<f4").reshape(ext)
        params[name] = Tensor(data.astype(dtype), requires_grad=True)
    if r.pos != len(r.buf):
        raise CheckpointError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    if cfg is not None:
        expected = parameter_shapes(cfg)
        for name, t in params.items():
            if name not in expected:
                raise CheckpointError(f"{path}: parameter {name!r} not used by the stored config")
            if t.shape != expected[name]:
                raise CheckpointError(f"{path}: parameter {name!r} has shape {t.shape}, config implies {expected[name]}")
        missing = [n for n in expected if n not in params]
        if missing:
            raise CheckpointError(f"{path}: missing parameters {missing}")
    return params, cfg
