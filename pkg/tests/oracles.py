"""Slow reference implementations used only by the tests."""
import itertools

import numpy as np

from tubeseg.postprocess import OFFSETS


def flood_oracle(surface, seeds, mask):
    """Dijkstra flood without a heap: every step scans the whole frontier.

    Frontier entries are ordered by (level, insertion index), the documented
    tie rule. A pixel's pending entries die as soon as it is labelled.
    """
    surface = np.asarray(surface, dtype=np.float64)
    fg = np.asarray(mask) > 0
    h, w = fg.shape
    cap = len(seeds) + 8 * fg.sum() + 1
    level = np.full(cap, np.inf)
    pix = np.zeros(cap, dtype=np.int64)
    lab = np.zeros(cap, dtype=np.int64)
    alive = np.zeros(cap, dtype=bool)
    n = 0
    for x, y, label in seeds:
        level[n], pix[n], lab[n], alive[n] = surface[y, x], y * w + x, label, True
        n += 1
    labels = np.zeros(h * w, dtype=np.int64)
    while alive[:n].any():
        live = np.flatnonzero(alive[:n])
        best = live[level[live] == level[live].min()][0]  # lowest index breaks ties
        p, label, lv = pix[best], lab[best], level[best]
        labels[p] = label
        alive[:n][pix[:n] == p] = False
        y, x = divmod(int(p), w)
        for dy, dx in OFFSETS:
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w and fg[ny, nx] and not labels[ny * w + nx]:
                level[n], pix[n], lab[n], alive[n] = max(lv, surface[ny, nx]), ny * w + nx, label, True
                n += 1
    return labels.reshape(h, w)


def _shift(a, dy, dx, fill):
    out = np.full_like(a, fill)
    h, w = a.shape
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = a[ys, xs]
    return out


def minimax_levels(surface, seeds, allowed):
    """Bellman-Ford relaxation of the minimax path level from ``seeds`` within ``allowed``."""
    surface = np.asarray(surface, dtype=np.float64)
    best = np.full(surface.shape, np.inf)
    for x, y, *_ in seeds:
        best[y, x] = surface[y, x]
    while True:
        prev = best
        cand = best
        for dy, dx in OFFSETS:
            cand = np.minimum(cand, np.maximum(_shift(best, dy, dx, np.inf), surface))
        best = np.where(allowed, cand, np.inf)
        if np.array_equal(best, prev):
            return best


def brute_distance(mask):
    fg = np.asarray(mask) > 0
    by, bx = np.nonzero(~fg)
    out = np.zeros(fg.shape)
    for y, x in zip(*np.nonzero(fg)):
        out[y, x] = np.sqrt(((by - y) ** 2 + (bx - x) ** 2).min())
    return out


def brute_aji(gt, pred):
    """Exhaustive search over injective gt -> pred assignments for the best AJI."""
    g_ids = [i for i in np.unique(gt) if i]
    p_ids = [j for j in np.unique(pred) if j]
    area = lambda m, i: int((m == i).sum())
    inter = {(i, j): int(((gt == i) & (pred == j)).sum()) for i in g_ids for j in p_ids}
    best = 0.0 if (g_ids or p_ids) else 1.0
    options = p_ids + [None] * len(g_ids)
    for assign in set(itertools.permutations(options, len(g_ids))):
        num = den = 0
        used = set()
        for i, j in zip(g_ids, assign):
            if j is None or inter[i, j] == 0:
                den += area(gt, i)
                continue
            used.add(j)
            num += inter[i, j]
            den += area(gt, i) + area(pred, j) - inter[i, j]
        den += sum(area(pred, j) for j in p_ids if j not in used)
        if den:
            best = max(best, num / den)
    return best


def greedy_aji_by_sets(gt, pred):
    """The greedy matching rule written with explicit pixel sets."""
    def objects(m):
        out = {}
        for y, x in zip(*np.nonzero(m)):
            out.setdefault(int(m[y, x]), set()).add((y, x))
        return out

    g, p = objects(np.asarray(gt)), objects(np.asarray(pred))
    if not g and not p:
        return 1.0
    used, num, den = set(), 0, 0
    for i in sorted(g):
        best, best_iou = None, 0.0
        for j in sorted(p):
            if j in used:
                continue
            score = len(g[i] & p[j]) / len(g[i] | p[j])
            if score > best_iou:
                best, best_iou = j, score
        if best is None:
            den += len(g[i])
        else:
            used.add(best)
            num += len(g[i] & p[best])
            den += len(g[i] | p[best])
    den += sum(len(p[j]) for j in p if j not in used)
    return num / den if den else 0.0


def random_rect_map(rng, shape, n_objects):
    """Instance map painted with up to ``n_objects`` random rectangles (later ones on top)."""
    m = np.zeros(shape, dtype=np.int64)
    h, w = shape
    for k in range(1, n_objects + 1):
        y0, x0 = rng.integers(0, h - 1), rng.integers(0, w - 1)
        y1, x1 = rng.integers(y0 + 1, h + 1), rng.integers(x0 + 1, w + 1)
        m[y0:y1, x0:x1] = k
    return m


def perturbed_map(rng, gt, n_objects):
    """Prediction near ``gt``: each object shifted by up to two pixels, some dropped, ids shuffled."""
    pred = np.zeros_like(gt)
    ids = rng.permutation(n_objects) + 1
    for i in range(1, int(gt.max()) + 1):
        if rng.random() < 0.15:
            continue
        dy, dx = rng.integers(-2, 3, 2)
        pred[np.roll(np.roll(gt == i, dy, axis=0), dx, axis=1)] = ids[i - 1]
    return pred


def disc(shape, cx, cy, r):
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]]
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r


def touching_blob_scene(rng):
    """2-4 discs, each after the first overlapping an earlier one."""
    h, w = (int(v) for v in rng.integers(24, 65, 2))
    mask = np.zeros((h, w), bool)
    centres = []
    for _ in range(int(rng.integers(2, 5))):
        r = float(rng.uniform(4, min(h, w) / 4))
        if centres:
            px, py, pr = centres[rng.integers(len(centres))]
            d = rng.uniform(0.6, 0.95) * (r + pr)
            t = rng.uniform(0, 2 * np.pi)
            cx, cy = px + d * np.cos(t), py + d * np.sin(t)
        else:
            cx, cy = rng.uniform(r, w - r), rng.uniform(r, h - r)
        cx, cy = float(np.clip(cx, 0, w - 1)), float(np.clip(cy, 0, h - 1))
        mask |= disc((h, w), cx, cy, r)
        centres.append((cx, cy, r))
    seeds = []
    for cx, cy, _ in centres:
        x, y = int(round(cx)), int(round(cy))
        if mask[y, x] and all((x, y) != s[:2] for s in seeds):
            seeds.append((x, y, len(seeds) + 1))
    return mask, seeds
