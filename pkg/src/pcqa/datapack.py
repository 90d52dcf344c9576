"""Dataset manifests, content-disjoint k-fold splits, cropping, batching."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .projector import ViewSet

MANIFEST_HEADER = ["id", "path", "content", "mos"]


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    path: str
    content: str
    mos: float


@dataclass
class Manifest:
    entries: list

    def __post_init__(self):
        ids = [e.sample_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("sample ids must be unique")
        for e in self.entries:
            if not math.isfinite(e.mos):
                raise ValueError(f"non-finite MOS for sample {e.sample_id}")

    @property
    def contents(self):
        return sorted({e.content for e in self.entries})

    def __len__(self):
        return len(self.entries)


def read_manifest(path) -> Manifest:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ValueError(
                f"manifest header must be {','.join(MANIFEST_HEADER)!r}, got {header}"
            )
        entries = [
            ManifestEntry(row[0], row[1], row[2], float(row[3])) for row in reader if row
        ]
    return Manifest(entries)


def write_manifest(manifest: Manifest, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for e in manifest.entries:
            writer.writerow([e.sample_id, e.path, e.content, repr(e.mos)])


@dataclass
class FoldPlan:
    """k disjoint sets of content ids covering every content."""

    k: int
    folds: list  # list of k sorted lists of content ids
    seed: int

    def __post_init__(self):
        flat = [c for fold in self.folds for c in fold]
        if len(flat) != len(set(flat)):
            raise ValueError("folds must be pairwise disjoint")

    def split(self, manifest: Manifest, fold_index: int):
        """Return (train_entries, test_entries) for one fold; contents never overlap."""
        test_contents = set(self.folds[fold_index])
        train = [e for e in manifest.entries if e.content not in test_contents]
        test = [e for e in manifest.entries if e.content in test_contents]
        return train, test

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"k": self.k, "seed": self.seed, "folds": self.folds}, fh, indent=2)

    @staticmethod
    def from_json(path) -> "FoldPlan":
        with open(path) as fh:
            d = json.load(fh)
        return FoldPlan(k=d["k"], folds=d["folds"], seed=d["seed"])


def kfold_split(manifest: Manifest, k: int, seed: int) -> FoldPlan:
    """Partition contents into k folds, as even as possible, deterministic in seed.

    Every distorted sample follows its reference content, so train and test
    never share content.
    """
    contents = manifest.contents
    if k > len(contents):
        raise ValueError(f"k={k} exceeds number of distinct contents ({len(contents)})")
    rng = np.random.default_rng(seed)
    order = [contents[i] for i in rng.permutation(len(contents))]
    folds = [sorted(chunk.tolist()) for chunk in np.array_split(np.array(order), k)]
    return FoldPlan(k=k, folds=folds, seed=seed)


def crop_sample(vs: ViewSet, size: int, rng: np.random.Generator) -> ViewSet:
    """One uniform crop location applied identically to every image of all six views.

    A single draw keeps the stitched mosaic self-consistent across views.
    Occupancy ratios are recomputed on the cropped occupancy.
    """
    h, w = vs.occupancy.shape[1:]
    if size > h or size > w:
        raise ValueError(f"crop size {size} exceeds view resolution {h}x{w}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    occ = vs.occupancy[:, top:top + size, left:left + size].copy()
    return ViewSet(
        texture=vs.texture[:, top:top + size, left:left + size].copy(),
        depth=vs.depth[:, top:top + size, left:left + size].copy(),
        occupancy=occ,
        ratios=occ.mean(axis=(1, 2)),
    )


@dataclass
class Batch:
    """Stacked view tensors plus the MOS vector, ready for the network."""

    texture: torch.Tensor    # (B, 6, 3, H, W)
    depth: torch.Tensor      # (B, 6, 1, H, W)
    occupancy: torch.Tensor  # (B, 6, H, W)
    ratios: torch.Tensor     # (B, 6)
    mos: torch.Tensor        # (B,)

    def __len__(self):
        return self.mos.shape[0]


def make_batch(samples) -> Batch:
    """Stack (ViewSet, mos) pairs; all views must share one resolution."""
    if not samples:
        raise ValueError("cannot build an empty batch")
    res = {vs.resolution for vs, _ in samples}
    if len(res) != 1:
        raise ValueError(f"mixed view resolutions in batch: {sorted(res)}")
    tex = np.stack([vs.texture for vs, _ in samples])          # (B, 6, H, W, 3)
    dep = np.stack([vs.depth for vs, _ in samples])            # (B, 6, H, W)
    occ = np.stack([vs.occupancy for vs, _ in samples])
    ratios = np.stack([vs.ratios for vs, _ in samples])
    mos = np.array([float(m) for _, m in samples])
    return Batch(
        texture=torch.from_numpy(tex).permute(0, 1, 4, 2, 3).contiguous().float(),
        depth=torch.from_numpy(dep).unsqueeze(2).float(),
        occupancy=torch.from_numpy(occ).float(),
        ratios=torch.from_numpy(ratios).float(),
        mos=torch.from_numpy(mos).float(),
    )
