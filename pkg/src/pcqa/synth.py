"""Synthetic desk-scale dataset: colored geometric primitives with parametric
distortions and a monotone pseudo-MOS, so tests never need external data."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .cloudio import PointCloud, write_ply
from .datapack import Manifest, ManifestEntry, write_manifest

MOS_MAX = 9.0
MOS_MIN = 1.0


def _sphere(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _cube(rng, n):
    pts = rng.uniform(-1, 1, size=(n, 3))
    face = rng.integers(0, 3, size=n)
    sign = rng.choice([-1.0, 1.0], size=n)
    pts[np.arange(n), face] = sign
    return pts


def _torus(rng, n, r_major=0.8, r_minor=0.35):
    u = rng.uniform(0, 2 * np.pi, size=n)
    v = rng.uniform(0, 2 * np.pi, size=n)
    x = (r_major + r_minor * np.cos(v)) * np.cos(u)
    y = (r_major + r_minor * np.cos(v)) * np.sin(u)
    z = r_minor * np.sin(v)
    return np.stack([x, y, z], axis=1)


def _cylinder(rng, n):
    u = rng.uniform(0, 2 * np.pi, size=n)
    z = rng.uniform(-1, 1, size=n)
    return np.stack([np.cos(u) * 0.6, np.sin(u) * 0.6, z], axis=1)


_PRIMITIVES = (_sphere, _cube, _torus, _cylinder)


def make_content(content_index: int, seed: int, points: int = 4000) -> PointCloud:
    """A pristine colored primitive; the color pattern varies per content."""
    rng = np.random.default_rng(seed * 1000 + content_index)
    pos = _PRIMITIVES[content_index % len(_PRIMITIVES)](rng, points)
    phase = rng.uniform(0, 2 * np.pi, size=3)
    freq = rng.uniform(1.0, 4.0, size=3)
    colors = 0.5 + 0.5 * np.sin(pos * freq + phase)
    return PointCloud(
        positions=pos,
        colors=np.clip(colors, 0.0, 1.0),
        name=f"content{content_index:02d}",
    )


def distort(pc: PointCloud, severity: float, rng: np.random.Generator) -> PointCloud:
    """Apply geometry noise, color noise, and downsampling scaled by severity.

    severity in [0, 1]; 0 returns a copy of the pristine cloud.
    """
    if not 0.0 <= severity <= 1.0:
        raise ValueError("severity must lie in [0, 1]")
    pos = pc.positions.copy()
    col = pc.colors.copy()
    if severity > 0:
        keep = max(8, int(len(pc) * (1.0 - 0.7 * severity)))
        idx = rng.choice(len(pc), size=keep, replace=False)
        pos = pos[idx] + rng.normal(scale=0.08 * severity, size=(keep, 3))
        col = np.clip(col[idx] + rng.normal(scale=0.35 * severity, size=(keep, 3)), 0, 1)
    return PointCloud(positions=pos, colors=col, name=f"{pc.name}_s{severity:.2f}")


def pseudo_mos(severity: float) -> float:
    """Monotone decreasing pseudo quality score in [MOS_MIN, MOS_MAX]."""
    return MOS_MAX - (MOS_MAX - MOS_MIN) * severity


def generate_dataset(
    out_dir,
    contents: int = 4,
    levels: int = 4,
    seed: int = 0,
    points: int = 4000,
) -> Manifest:
    """Write PLY files and a manifest.csv under out_dir; returns the Manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for ci in range(contents):
        ref = make_content(ci, seed, points=points)
        rng = np.random.default_rng(seed * 7919 + ci)
        severities = np.linspace(0.0, 1.0, levels)
        for li, sev in enumerate(severities):
            pc = distort(ref, float(sev), rng)
            sample_id = f"c{ci:02d}_l{li}"
            path = out_dir / f"{sample_id}.ply"
            write_ply(pc, path, binary=True)
            entries.append(
                ManifestEntry(
                    sample_id=sample_id,
                    path=str(path),
                    content=ref.name,
                    mos=pseudo_mos(float(sev)),
                )
            )
    manifest = Manifest(entries)
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest
