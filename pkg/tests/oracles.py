"""Independent reference implementations shared by the unit and acceptance tests."""

import numpy as np

from portmon import detection as det

# rotation-stage angles of the tilt comparison table, degrees
STAGE_ANGLES_DEG = (1.0, 0.1, 0.01, 0.001, 5.0, 10.0, 15.0, 20.0, 25.0)


def naive_filter_decimate(x, h, factor):
    """Direct convolution with a zero-primed delay line, keeping every ``factor``-th output."""
    full = np.convolve(x, h)[: len(x)]
    return full[factor - 1 :: factor]


def raster_iou(a, b, size=64):
    """IoU of integer boxes by counting covered unit cells."""
    grid = np.zeros((2, size, size), dtype=bool)
    for k, box in enumerate((a, b)):
        grid[k, int(box.y_min) : int(box.y_max), int(box.x_min) : int(box.x_max)] = True
    return np.sum(grid[0] & grid[1]) / np.sum(grid[0] | grid[1])


def brute_force_ap(dets, gts, thr=0.5):
    """All-points AP by enumerating the PR curve point by point, with its own greedy matcher."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].scene_id, i))
    taken = set()
    tp = []
    for i in order:
        d = dets[i]
        cands = [(det.iou(d.bbox, g), j) for j, g in enumerate(gts.get(d.scene_id, [])) if (d.scene_id, j) not in taken]
        cands = [c for c in cands if c[0] >= thr]
        if cands:
            best = max(cands, key=lambda c: (c[0], -c[1]))
            taken.add((d.scene_id, best[1]))
            tp.append(1)
        else:
            tp.append(0)
    n_gt = sum(len(v) for v in gts.values())
    points = []
    for k in range(1, len(tp) + 1):
        hits = sum(tp[:k])
        points.append((hits / n_gt, hits / k))
    ap, prev_r = 0.0, 0.0
    for k, (r, _) in enumerate(points):
        if r > prev_r:
            ap += (r - prev_r) * max(p for _, p in points[k:])
            prev_r = r
    return ap


def random_ap_instance(rng, max_dets=6, max_gts=4, scenes=("a", "b")):
    """Small random detection/ground-truth instance; about half the detections hug a GT box."""

    def box():
        x, y = rng.integers(0, 21, 2)
        w, h = rng.integers(2, 11, 2)
        return det.BBox(x, y, x + w, y + h)

    gts = {s: [] for s in scenes}
    for _ in range(rng.integers(1, max_gts + 1)):
        gts[scenes[rng.integers(len(scenes))]].append(box())
    dets = []
    for _ in range(rng.integers(0, max_dets + 1)):
        s = scenes[rng.integers(len(scenes))]
        if gts[s] and rng.random() < 0.5:
            g = gts[s][rng.integers(len(gts[s]))]
            dx = int(rng.integers(-2, 3))
            b = det.BBox(g.x_min + dx, g.y_min, g.x_max + dx, g.y_max)
        else:
            b = box()
        dets.append(det.Detection(b, float(rng.choice([0.1, 0.3, 0.5, 0.7, 0.9])), scene_id=s))
    return dets, gts


def hysteresis_holds(d, fires, threshold, margin, cooldown):
    """Fires are genuine down-crossings separated by a re-arm excursion and the cooldown."""
    for a, b in zip(fires, fires[1:]):
        if not np.any(d[a + 1 : b] > threshold + margin) or b - a < cooldown:
            return False
    return all(d[f - 1] > threshold >= d[f] for f in fires)
