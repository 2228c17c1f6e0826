"""Probability maps -> label masks -> instance maps.

Touching tubules are split with a seeded watershed flooded on the negated
Euclidean distance transform of the (hole-filled) foreground, so floods
start at tubule centres and meet along the narrow waist between them.
"""
from __future__ import annotations

import heapq
from pathlib import Path

import numpy as np
from scipy import ndimage as ndi
from skimage.morphology import h_maxima

EIGHT = np.ones((3, 3), dtype=bool)
# neighbour scan order shared by every flood implementation
OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


class SeedError(ValueError):
    pass


def argmax_mask(probs: np.ndarray) -> np.ndarray:
    """(C, H, W) probabilities -> (H, W) class ids; ties go to the lower index."""
    return np.argmax(probs, axis=0).astype(np.uint8)


def connected_components(mask: np.ndarray, foreground_class: int = 1) -> np.ndarray:
    """8-connected labelling of ``mask == foreground_class``, ids in raster order."""
    labels, _ = ndi.label(np.asarray(mask) == foreground_class, structure=EIGHT)
    return labels.astype(np.int32)


def distance_transform(mask: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from each foreground pixel to the nearest background pixel."""
    fg = np.asarray(mask) > 0
    if not fg.any():
        return np.zeros(fg.shape)
    if fg.all():
        # no background inside the image: measure to the border instead
        fg = np.pad(fg, 1)
        return ndi.distance_transform_edt(fg)[1:-1, 1:-1]
    return ndi.distance_transform_edt(fg)


def seeded_watershed(surface: np.ndarray, seeds, mask: np.ndarray, return_boundary: bool = False):
    """Priority flood of ``surface`` from labelled seeds, restricted to ``mask``.

    ``seeds`` is a sequence of ``(x, y, label)``. A pixel's flood level is the
    lowest possible maximum elevation along an 8-connected path to a seed;
    pixels are claimed in order of (level, insertion order), so equal-level
    contention goes to whichever flood queued the pixel first. Foreground
    components that no seed reaches receive fresh labels. With
    ``return_boundary`` the pixels touching a differently labelled neighbour
    are returned as a second boolean map.
    """
    surface = np.asarray(surface, dtype=np.float64)
    fg = np.asarray(mask) > 0
    if surface.shape != fg.shape:
        raise ValueError(f"surface {surface.shape} and mask {fg.shape} differ")
    if not np.all(np.isfinite(surface)):
        raise ValueError("surface contains non-finite values")
    seeds = [(int(x), int(y), int(lab)) for x, y, lab in seeds]
    h, w = fg.shape
    if not seeds:
        labels = connected_components(fg.astype(np.uint8))
        return (labels, _boundary(labels)) if return_boundary else labels
    if len({lab for _, _, lab in seeds}) != len(seeds) or min(lab for _, _, lab in seeds) < 1:
        raise SeedError("seed labels must be distinct positive integers")

    labels = np.zeros((h, w), dtype=np.int32)
    heap: list = []
    counter = 0
    for x, y, lab in seeds:
        if not (0 <= y < h and 0 <= x < w) or not fg[y, x]:
            raise SeedError(f"seed ({x}, {y}) label {lab} lies on background or outside the image")
        heapq.heappush(heap, (surface[y, x], counter, y, x, lab))
        counter += 1

    while heap:
        level, _, y, x, lab = heapq.heappop(heap)
        if labels[y, x]:
            continue
        labels[y, x] = lab
        for dy, dx in OFFSETS:
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w and fg[ny, nx] and not labels[ny, nx]:
                heapq.heappush(heap, (max(level, surface[ny, nx]), counter, ny, nx, lab))
                counter += 1

    leftover = fg & (labels == 0)
    if leftover.any():
        extra, n_extra = ndi.label(leftover, structure=EIGHT)
        next_id = max(lab for _, _, lab in seeds)
        labels[extra > 0] = extra[extra > 0] + next_id
    return (labels, _boundary(labels)) if return_boundary else labels


def _boundary(labels: np.ndarray) -> np.ndarray:
    padded = np.pad(labels, 1)
    h, w = labels.shape
    out = np.zeros(labels.shape, dtype=bool)
    for dy, dx in OFFSETS:
        nb = padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
        out |= (nb != 0) & (nb != labels) & (labels != 0)
    return out


def auto_seeds(surface: np.ndarray, min_distance: float, h: float = 1.0, min_height: float = 0.0):
    """Regional maxima of ``surface`` thinned by non-maximum suppression.

    Candidates are the h-maxima: plateaus that rise at least ``h`` above
    every path to higher ground, which rejects the flat ridges a discrete
    distance map forms along the waist of two touching discs. Each plateau
    contributes its highest pixel (first in raster order on ties) if it lies
    above ``min_height``. Candidates are visited by decreasing elevation and
    kept unless an already kept seed lies closer than ``min_distance``.
    Returns ``(x, y, label)`` triples with labels 1..K.
    """
    if min_distance <= 0:
        raise ValueError("min_distance must be positive")
    if h <= 0:
        raise ValueError("h must be positive")
    surface = np.asarray(surface, dtype=np.float64)
    plateaus, _ = ndi.label(h_maxima(surface, h), structure=EIGHT)
    candidates = []
    for k, sl in enumerate(ndi.find_objects(plateaus), start=1):
        if sl is None:
            continue
        vals = np.where(plateaus[sl] == k, surface[sl], -np.inf)
        iy, ix = np.unravel_index(int(np.argmax(vals)), vals.shape)
        y, x = sl[0].start + int(iy), sl[1].start + int(ix)
        if surface[y, x] > min_height:
            candidates.append((-surface[y, x], y, x))
    candidates.sort()
    kept: list = []
    for _, y, x in candidates:
        if all((y - ky) ** 2 + (x - kx) ** 2 >= min_distance**2 for kx, ky in kept):
            kept.append((x, y))
    return [(x, y, k) for k, (x, y) in enumerate(kept, start=1)]


def relabel_sequential(labels: np.ndarray) -> np.ndarray:
    """Renumber instance ids to 1..K in raster order of first appearance."""
    flat = labels.ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids != 0
    ids, first = ids[keep], first[keep]
    ids = ids[np.argsort(first)]
    lut = np.zeros(int(labels.max()) + 1 if labels.size else 1, dtype=np.int32)
    lut[ids] = np.arange(1, ids.size + 1, dtype=np.int32)
    return lut[labels]


def split_touching(mask: np.ndarray, seeds=None, min_distance: float = 6.0, h: float = 1.0, foreground_class: int = 1) -> np.ndarray:
    """Instance map of ``mask == foreground_class`` with touching objects split.

    Holes (tubule lumens) are filled before computing the distance surface so
    that every tubule contributes one central peak; the final labels are
    restricted back to the original foreground. ``seeds`` (``(x, y)`` or
    ``(x, y, label)``) override the automatic ones and may lie in a lumen.
    """
    fg = np.asarray(mask) == foreground_class
    if not fg.any():
        return np.zeros(fg.shape, dtype=np.int32)
    filled = ndi.binary_fill_holes(fg, structure=np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], bool))
    dist = distance_transform(filled)
    if seeds is None:
        seeds = auto_seeds(dist, min_distance, h)
    else:
        seeds = [(s[0], s[1], s[2] if len(s) > 2 else k) for k, s in enumerate(seeds, start=1)]
    labels = seeded_watershed(-dist, seeds, filled)
    labels[~fg] = 0
    return relabel_sequential(labels)


def instances_from_three_class(mask3: np.ndarray) -> np.ndarray:
    """Instances from a 3-class mask: class-1 components, border pixels to the nearest one."""
    mask3 = np.asarray(mask3)
    core = connected_components(mask3, 1)
    border = mask3 == 2
    if core.max() == 0:
        return connected_components(border.astype(np.uint8), 1)
    _, (iy, ix) = ndi.distance_transform_edt(core == 0, return_indices=True)
    out = core.copy()
    out[border] = core[iy[border], ix[border]]
    return out


def read_seeds(path) -> list:
    """Seeds file: one ``x y`` pair per line, origin top-left; ``#`` comments allowed."""
    seeds = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise SeedError(f"{path}:{lineno}: expected 'x y', got {line!r}")
        seeds.append((int(parts[0]), int(parts[1])))
    return seeds


def write_seeds(path, seeds) -> None:
    Path(path).write_text("".join(f"{s[0]} {s[1]}\n" for s in seeds))
