"""Loading, writing, and canonicalizing colored point clouds (PLY)."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

_PLY_DTYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}

_COLOR_TRIPLES = (("red", "green", "blue"), ("r", "g", "b"))


class PlyParseError(ValueError):
    """Raised when a PLY file violates the expected structure."""


@dataclass
class PointCloud:
    """N points with XYZ coordinates and RGB colors in [0, 1]."""

    positions: np.ndarray  # (N, 3) float64
    colors: np.ndarray     # (N, 3) float64 in [0, 1]
    name: str = ""

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.colors = np.asarray(self.colors, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must be (N, 3), got {self.positions.shape}")
        if self.colors.shape != self.positions.shape:
            raise ValueError("colors must match positions shape")
        if len(self.positions) < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("non-finite coordinates")
        if self.colors.min() < 0.0 or self.colors.max() > 1.0:
            raise ValueError("colors must lie in [0, 1]")

    def __len__(self):
        return len(self.positions)


def _parse_header(fh, path):
    """Read the PLY header, returning (fmt, vertex_count, vertex_props)."""
    line = fh.readline().decode("ascii", errors="replace").strip()
    if line != "ply":
        raise PlyParseError(f"{path}: not a PLY file (first line {line!r})")
    fmt = None
    elements = []  # (name, count, [(prop_name, prop_type)])
    while True:
        raw = fh.readline()
        if not raw:
            raise PlyParseError(f"{path}: header ended before end_header")
        line = raw.decode("ascii", errors="replace").strip()
        if not line or line.startswith("comment") or line.startswith("obj_info"):
            continue
        parts = line.split()
        if parts[0] == "format":
            if len(parts) != 3 or parts[1] not in ("ascii", "binary_little_endian"):
                raise PlyParseError(f"{path}: unsupported format line {line!r}")
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3:
                raise PlyParseError(f"{path}: malformed element line {line!r}")
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise PlyParseError(f"{path}: property before any element: {line!r}")
            if parts[1] == "list":
                if len(parts) != 5:
                    raise PlyParseError(f"{path}: malformed list property {line!r}")
                elements[-1][2].append((parts[4], ("list", parts[2], parts[3])))
            else:
                if len(parts) != 3 or parts[1] not in _PLY_DTYPES:
                    raise PlyParseError(f"{path}: malformed property line {line!r}")
                elements[-1][2].append((parts[2], parts[1]))
        elif parts[0] == "end_header":
            break
        else:
            raise PlyParseError(f"{path}: unrecognized header line {line!r}")
    if fmt is None:
        raise PlyParseError(f"{path}: missing format line")
    vertex = next((e for e in elements if e[0] == "vertex"), None)
    if vertex is None:
        raise PlyParseError(f"{path}: no vertex element declared")
    if elements.index(vertex) != 0 and fmt != "ascii":
        raise PlyParseError(f"{path}: vertex element must come first in binary PLY")
    return fmt, vertex[1], vertex[2]


def _color_props(props):
    names = [name for name, _ in props]
    for triple in _COLOR_TRIPLES:
        if all(c in names for c in triple):
            return triple
    return None


def load_ply(path) -> PointCloud:
    """Parse an ASCII or binary-little-endian PLY file with XYZ + RGB.

    Integer color channels are rescaled to [0, 1] by their type maximum;
    float channels are taken as already normalized. Colorless files are
    rejected: the downstream texture projection needs per-point color.
    """
    path = str(path)
    with open(path, "rb") as fh:
        fmt, count, props = _parse_header(fh, path)
        names = [name for name, _ in props]
        if any(isinstance(t, tuple) for _, t in props):
            raise PlyParseError(f"{path}: list properties on vertices are unsupported")
        for c in ("x", "y", "z"):
            if c not in names:
                raise PlyParseError(f"{path}: vertex element lacks property {c!r}")
        color = _color_props(props)
        if color is None:
            raise PlyParseError(
                f"{path}: no color properties (red/green/blue or r/g/b); "
                "colorless clouds are unsupported"
            )
        if count < 1:
            raise PlyParseError(f"{path}: vertex count must be >= 1")

        if fmt == "ascii":
            rows = []
            for i in range(count):
                line = fh.readline()
                if not line:
                    raise PlyParseError(
                        f"{path}: declared {count} vertices but data ended at row {i}"
                    )
                fields = line.split()
                if len(fields) < len(props):
                    raise PlyParseError(
                        f"{path}: vertex row {i} has {len(fields)} fields, "
                        f"expected {len(props)}"
                    )
                rows.append([float(v) for v in fields[: len(props)]])
            data = {name: np.array([r[j] for r in rows]) for j, (name, _) in enumerate(props)}
            types = dict(props)
        else:
            dtype = np.dtype([(name, "<" + _PLY_DTYPES[t]) for name, t in props])
            buf = fh.read(dtype.itemsize * count)
            if len(buf) < dtype.itemsize * count:
                raise PlyParseError(
                    f"{path}: declared {count} vertices but file holds only "
                    f"{len(buf) // dtype.itemsize}"
                )
            rec = np.frombuffer(buf, dtype=dtype)
            data = {name: rec[name].astype(np.float64) for name, _ in props}
            types = dict(props)

    positions = np.stack([data["x"], data["y"], data["z"]], axis=1)
    channels = []
    for c in color:
        vals = data[c]
        t = types[c]
        if t in ("uchar", "uint8"):
            vals = vals / 255.0
        elif t in ("ushort", "uint16"):
            vals = vals / 65535.0
        elif t not in ("float", "float32", "double", "float64"):
            raise PlyParseError(f"{path}: unsupported color type {t!r} for {c!r}")
        channels.append(vals)
    colors = np.clip(np.stack(channels, axis=1), 0.0, 1.0)
    name = path.rsplit("/", 1)[-1].rsplit(".", 1)[0]
    return PointCloud(positions=positions, colors=colors, name=name)


def write_ply(pc: PointCloud, path, binary: bool = False) -> None:
    """Write a PLY with float positions and float colors (lossless round trip)."""
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"element vertex {len(pc)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property float r\nproperty float g\nproperty float b\n"
        "end_header\n"
    )
    data = np.hstack([pc.positions, pc.colors]).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(data.tobytes())
        else:
            for row in data:
                fh.write((" ".join(f"{v:.9g}" for v in row) + "\n").encode("ascii"))


def canonicalize(pc: PointCloud) -> PointCloud:
    """Center the bounding box at the origin and scale the longest axis to 2.

    The scale is isotropic so geometric distortions survive normalization.
    Raises ValueError for degenerate clouds (all points coincident).
    """
    lo = pc.positions.min(axis=0)
    hi = pc.positions.max(axis=0)
    extent = (hi - lo).max()
    if extent <= 0.0:
        raise ValueError("degenerate point cloud: all points identical")
    center = (lo + hi) / 2.0
    positions = (pc.positions - center) * (2.0 / extent)
    return replace(pc, positions=positions, colors=pc.colors.copy())
