"""Orthographic six-view rendering to texture/depth/occupancy images."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloudio import PointCloud

# Fixed camera frames: (view direction, image right, image up), chosen so
# right x up == -direction (camera looks down -direction... i.e. along `dir`).
# Any deterministic convention is valid; this one is the layout contract.
VIEW_ORDER = ("+x", "+y", "+z", "-x", "-y", "-z")
VIEW_FRAMES = {
    "+x": (np.array([-1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.0])),
    "+y": (np.array([0.0, -1.0, 0.0]), np.array([-1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0])),
    "+z": (np.array([0.0, 0.0, -1.0]), np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])),
    "-x": (np.array([1.0, 0.0, 0.0]), np.array([0.0, -1.0, 0.0]), np.array([0.0, 0.0, 1.0])),
    "-y": (np.array([0.0, 1.0, 0.0]), np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0])),
    "-z": (np.array([0.0, 0.0, 1.0]), np.array([-1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])),
}

# Farthest occupied depth maps to this value; background stays exactly 0.
DEPTH_FLOOR = 1.0 / 255.0


@dataclass
class RenderSettings:
    resolution: int = 512          # H == W
    point_radius: float = 0.01     # splat radius in NDC ([-1, 1] spans the image)
    max_splats: int = 8            # K front-most splats composited per pixel

    def to_dict(self):
        return {
            "resolution": self.resolution,
            "point_radius": self.point_radius,
            "max_splats": self.max_splats,
        }


@dataclass
class ViewSet:
    """Six-view triplet of texture, depth, and occupancy images."""

    texture: np.ndarray    # (6, H, W, 3) float in [0, 1]
    depth: np.ndarray      # (6, H, W) float in [0, 1]
    occupancy: np.ndarray  # (6, H, W) float binary
    ratios: np.ndarray     # (6,) occupancy ratios

    @property
    def resolution(self):
        return self.texture.shape[1]


@dataclass
class StitchedInput:
    """2H x 3W mosaics: texture+depth (4 channels) and occupancy."""

    image: np.ndarray      # (2H, 3W, 4)
    occupancy: np.ndarray  # (2H, 3W)


def occupancy_ratio(occ: np.ndarray) -> float:
    """Exact proportion of occupied pixels in a binary image."""
    occ = np.asarray(occ)
    return float(np.count_nonzero(occ)) / occ.size


def _render_view(positions, colors, frame, cfg: RenderSettings):
    h = w = cfg.resolution
    direction, right, up = frame
    a = positions @ right            # [-1, 1] image x
    b = positions @ up               # [-1, 1] image y
    d = positions @ direction        # smaller = nearer to the camera
    px = (a + 1.0) / 2.0 * w - 0.5   # pixel-center coordinates
    py = (1.0 - (b + 1.0) / 2.0) * h - 0.5
    r_px = cfg.point_radius * w / 2.0

    m = max(int(np.ceil(r_px)), 0)
    offs = np.arange(-m, m + 1)
    cx = np.rint(px).astype(np.int64)
    cy = np.rint(py).astype(np.int64)

    # Fragments: every pixel whose center lies within the splat radius, plus
    # the pixel containing the splat center so a point always lands somewhere.
    frag_pix, frag_d, frag_a, frag_c = [], [], [], []
    for dy in offs:
        for dx in offs:
            ix = cx + dx
            iy = cy + dy
            dist2 = (ix - px) ** 2 + (iy - py) ** 2
            alpha = 1.0 - dist2 / max(r_px, 1e-12) ** 2
            keep = (alpha > 0.0) | ((dx == 0) & (dy == 0))
            keep &= (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
            if not keep.any():
                continue
            idx = np.nonzero(keep)[0]
            frag_pix.append(iy[idx] * w + ix[idx])
            frag_d.append(d[idx])
            frag_a.append(np.clip(alpha[idx], 1e-3, 1.0))
            frag_c.append(colors[idx])

    texture = np.zeros((h * w, 3))
    depth = np.zeros(h * w)
    occ = np.zeros(h * w)
    if frag_pix:
        pix = np.concatenate(frag_pix)
        dep = np.concatenate(frag_d)
        alp = np.concatenate(frag_a)
        col = np.concatenate(frag_c)

        order = np.lexsort((dep, pix))
        pix, dep, alp, col = pix[order], dep[order], alp[order], col[order]
        starts = np.ones(len(pix), dtype=bool)
        starts[1:] = pix[1:] != pix[:-1]
        seg_id = np.cumsum(starts) - 1
        first = np.nonzero(starts)[0]
        rank = np.arange(len(pix)) - first[seg_id]

        occ[pix] = 1.0
        depth[pix[starts]] = dep[starts]  # front-most raw depth per pixel

        # Front-to-back over-compositing of the K nearest splats.
        trans = np.ones(h * w)
        for k in range(cfg.max_splats):
            sel = rank == k
            if not sel.any():
                break
            p = pix[sel]
            texture[p] += (trans[p] * alp[sel])[:, None] * col[sel]
            trans[p] *= 1.0 - alp[sel]

        # Occupied depths mapped affinely: nearest -> 1, farthest -> DEPTH_FLOOR.
        occ_mask = occ > 0
        dvals = depth[occ_mask]
        dmin, dmax = dvals.min(), dvals.max()
        if dmax > dmin:
            depth[occ_mask] = 1.0 + (dvals - dmin) * (DEPTH_FLOOR - 1.0) / (dmax - dmin)
        else:
            depth[occ_mask] = 1.0

    texture = np.clip(texture, 0.0, 1.0)
    return (
        texture.reshape(h, w, 3),
        depth.reshape(h, w),
        occ.reshape(h, w),
    )


def project_views(pc: PointCloud, cfg: RenderSettings | None = None) -> ViewSet:
    """Render a canonicalized cloud along +-x, +-y, +-z with orthographic splatting.

    Per pixel, the K nearest-in-depth splats are alpha-composited front to
    back with alpha = 1 - (dist/radius)^2. Depth is normalized per view with
    nearest occupied pixel -> 1 and background 0; occupancy marks pixels
    covered by at least one splat.
    """
    cfg = cfg or RenderSettings()
    if len(pc) < 1:
        raise ValueError("cannot render an empty point cloud")
    if cfg.resolution < 64:
        raise ValueError(f"resolution must be >= 64, got {cfg.resolution}")
    textures, depths, occs = [], [], []
    for name in VIEW_ORDER:
        t, dpt, o = _render_view(pc.positions, pc.colors, VIEW_FRAMES[name], cfg)
        textures.append(t)
        depths.append(dpt)
        occs.append(o)
    occupancy = np.stack(occs)
    return ViewSet(
        texture=np.stack(textures),
        depth=np.stack(depths),
        occupancy=occupancy,
        ratios=np.array([occupancy_ratio(o) for o in occupancy]),
    )


def stitch(vs: ViewSet) -> StitchedInput:
    """Compose the six views into 2x3 mosaics (row 0: +x,+y,+z; row 1: -x,-y,-z)."""
    shapes = {vs.texture.shape[1:3], vs.depth.shape[1:3], vs.occupancy.shape[1:3]}
    if len(shapes) != 1:
        raise ValueError(f"mismatched view resolutions: {shapes}")
    layers = np.concatenate([vs.texture, vs.depth[..., None]], axis=-1)  # (6, H, W, 4)
    rows = [np.concatenate(list(layers[r * 3:(r + 1) * 3]), axis=1) for r in range(2)]
    occ_rows = [np.concatenate(list(vs.occupancy[r * 3:(r + 1) * 3]), axis=1) for r in range(2)]
    return StitchedInput(
        image=np.concatenate(rows, axis=0),
        occupancy=np.concatenate(occ_rows, axis=0),
    )


def unstitch(st: StitchedInput) -> ViewSet:
    """Invert stitch() exactly, recovering per-view images and ratios."""
    hh, ww = st.occupancy.shape
    h, w = hh // 2, ww // 3
    tex, dep, occ = [], [], []
    for r in range(2):
        for c in range(3):
            tile = st.image[r * h:(r + 1) * h, c * w:(c + 1) * w]
            tex.append(tile[..., :3])
            dep.append(tile[..., 3])
            occ.append(st.occupancy[r * h:(r + 1) * h, c * w:(c + 1) * w])
    occupancy = np.stack(occ)
    return ViewSet(
        texture=np.stack(tex),
        depth=np.stack(dep),
        occupancy=occupancy,
        ratios=np.array([occupancy_ratio(o) for o in occupancy]),
    )
