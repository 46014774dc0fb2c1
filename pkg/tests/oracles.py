"""Independent reference implementations used by the tests."""

from collections import deque

import numpy as np


def flood_fill_components(cells: np.ndarray) -> int:
    """Number of 4-connected components of nonzero cells, by breadth-first search."""
    cells = np.asarray(cells, dtype=bool)
    seen = np.zeros_like(cells)
    count = 0
    h, w = cells.shape
    for sy in range(h):
        for sx in range(w):
            if not cells[sy, sx] or seen[sy, sx]:
                continue
            count += 1
            queue = deque([(sy, sx)])
            seen[sy, sx] = True
            while queue:
                y, x = queue.popleft()
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < h and 0 <= nx < w and cells[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        queue.append((ny, nx))
    return count


def brute_confusion(labels, preds, positive=1):
    tp = fp = tn = fn = 0
    for t, p in zip(labels, preds):
        if t == positive and p == positive:
            tp += 1
        elif t == positive:
            fn += 1
        elif p == positive:
            fp += 1
        else:
            tn += 1
    return tp, fp, tn, fn


def brute_roc_auc(labels, scores):
    """Probability a random positive outscores a random negative (ties count half)."""
    pos = [s for t, s in zip(labels, scores) if t == 1]
    neg = [s for t, s in zip(labels, scores) if t == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def brute_average_precision(labels, scores):
    """Step-wise area under precision-recall, one step per distinct threshold."""
    labels = list(labels)
    n_pos = sum(labels)
    ap = 0.0
    prev_recall = 0.0
    for thr in sorted(set(scores), reverse=True):
        tp = sum(1 for t, s in zip(labels, scores) if s >= thr and t == 1)
        fp = sum(1 for t, s in zip(labels, scores) if s >= thr and t == 0)
        recall = tp / n_pos
        ap += (recall - prev_recall) * tp / (tp + fp)
        prev_recall = recall
    return ap


def brute_dice(a, b):
    a, b = np.asarray(a).ravel().tolist(), np.asarray(b).ravel().tolist()
    inter = sum(1 for x, y in zip(a, b) if x and y)
    total = sum(a) + sum(b)
    return 1.0 if total == 0 else 2 * inter / total


def brute_iou(a, b):
    a, b = np.asarray(a).ravel().tolist(), np.asarray(b).ravel().tolist()
    inter = sum(1 for x, y in zip(a, b) if x and y)
    union = sum(1 for x, y in zip(a, b) if x or y)
    return 1.0 if union == 0 else inter / union


def brute_boundary(mask):
    """Foreground pixels with a 4-neighbour that is background or off-image."""
    m = np.asarray(mask, dtype=bool)
    h, w = m.shape
    out = []
    for y in range(h):
        for x in range(w):
            if not m[y, x]:
                continue
            for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                if not (0 <= ny < h and 0 <= nx < w) or not m[ny, nx]:
                    out.append((y, x))
                    break
    return out


def _percentile95(values):
    v = sorted(values)
    pos = 0.95 * (len(v) - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, len(v) - 1)
    t = pos - lo
    # numpy's symmetric lerp form, so the result rounds identically
    if t >= 0.5:
        return v[hi] - (v[hi] - v[lo]) * (1 - t)
    return v[lo] + (v[hi] - v[lo]) * t


def brute_hd95(a, b):
    """Symmetric 95th-percentile boundary-to-boundary distance, all pairs enumerated."""
    def directed(src, dst_mask):
        dst = brute_boundary(dst_mask)
        ds = [min(((y - v) ** 2 + (x - u) ** 2) ** 0.5 for v, u in dst) for y, x in brute_boundary(src)]
        return _percentile95(ds)

    return max(directed(a, b), directed(b, a))


def matrix_product_rollout(attentions):
    """Rollout by explicit loops over layers and matrix entries."""
    L = attentions[0].shape[-1]
    result = None
    for attn in attentions:
        heads = attn.shape[0]
        a = [[sum(attn[h][i][j] for h in range(heads)) / heads + (1.0 if i == j else 0.0) for j in range(L)]
             for i in range(L)]
        a = [[v / sum(row) for v in row] for row in a]
        if result is None:
            result = a
        else:
            result = [[sum(a[i][k] * result[k][j] for k in range(L)) for j in range(L)] for i in range(L)]
    return np.array(result)


def is_connected(cells: np.ndarray) -> bool:
    """True when the nonzero cells form a single 4-connected region (flood fill from one cell)."""
    cells = np.asarray(cells, dtype=bool)
    coords = np.argwhere(cells)
    if len(coords) == 0:
        return False
    h, w = cells.shape
    seen = {tuple(coords[0])}
    queue = deque(seen)
    while queue:
        y, x = queue.popleft()
        for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
            if 0 <= ny < h and 0 <= nx < w and cells[ny, nx] and (ny, nx) not in seen:
                seen.add((ny, nx))
                queue.append((ny, nx))
    return len(seen) == len(coords)
