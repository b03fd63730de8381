"""Independent reference implementations used as test oracles.

Everything here is deliberately naive (loops, exact fractions, brute force)
and shares no code with the package under test.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from fractions import Fraction

import numpy as np


# --------------------------------------------------------------------------
# slides


def decode_spyr_level(path, level: int) -> np.ndarray:
    """Parse an SPYR file by hand and stitch one whole level (unpadded)."""
    data = open(path, "rb").read()
    assert data[:4] == b"SPYR"
    _, header_len = struct.unpack_from("<II", data, 4)
    header = json.loads(data[12 : 12 + header_len])
    ts = header["tile_size"]
    index_start = 12 + header_len
    tile_no = 0
    for lv, dims in enumerate(header["levels"]):
        rows = -(-dims["h"] // ts)
        cols = -(-dims["w"] // ts)
        if lv == level:
            canvas = np.zeros((rows * ts, cols * ts, 3), dtype=np.uint8)
            for r in range(rows):
                for c in range(cols):
                    off, ln = struct.unpack_from("<QQ", data, index_start + 16 * (tile_no + r * cols + c))
                    tile = np.frombuffer(zlib.decompress(data[off : off + ln]), dtype=np.uint8)
                    canvas[r * ts : (r + 1) * ts, c * ts : (c + 1) * ts] = tile.reshape(ts, ts, 3)
            return canvas[: dims["h"], : dims["w"]]
        tile_no += rows * cols
    raise IndexError(level)


def crop_with_fill(level_img: np.ndarray, x: int, y: int, w: int, h: int) -> np.ndarray:
    out = np.full((h, w, 3), 255, dtype=np.uint8)
    for j in range(h):
        for i in range(w):
            yy, xx = y + j, x + i
            if 0 <= yy < level_img.shape[0] and 0 <= xx < level_img.shape[1]:
                out[j, i] = level_img[yy, xx]
    return out


def block_mean_2x2(img: np.ndarray) -> np.ndarray:
    """2x2 block mean per channel, round half up, trailing odd row/col dropped."""
    h, w = img.shape[0] // 2, img.shape[1] // 2
    out = np.zeros((h, w, img.shape[2]), dtype=np.uint8)
    for y in range(h):
        for x in range(w):
            for c in range(img.shape[2]):
                s = sum(int(img[2 * y + dy, 2 * x + dx, c]) for dy in (0, 1) for dx in (0, 1))
                out[y, x, c] = math.floor(Fraction(s, 4) + Fraction(1, 2))
    return out


# --------------------------------------------------------------------------
# segmentation and patching


def otsu_brute(hist) -> int:
    """Exhaustive scan of every threshold with exact rational arithmetic."""
    hist = [int(v) for v in hist]
    n = sum(hist)
    best_t, best = None, Fraction(-1)
    for t in range(255):
        n0 = sum(hist[: t + 1])
        n1 = n - n0
        if n0 == 0 or n1 == 0:
            continue
        mu0 = Fraction(sum(i * hist[i] for i in range(t + 1)), n0)
        mu1 = Fraction(sum(i * hist[i] for i in range(t + 1, 256)), n1)
        score = Fraction(n0, n) * Fraction(n1, n) * (mu0 - mu1) ** 2
        if score > best:
            best_t, best = t, score
    return best_t


def otsu_int_scan(hist) -> int:
    """Every threshold scanned with integer prefix sums; scores compared by
    cross-multiplication, so no rounding anywhere.

    The between-class score for threshold t is proportional to
    (n * s0 - n0 * s)^2 / (n0 * n1).
    """
    hist = [int(v) for v in hist]
    n = sum(hist)
    s = sum(i * h for i, h in enumerate(hist))
    n0 = s0 = 0
    best_t, best_num, best_den = None, -1, 1
    for t in range(255):
        n0 += hist[t]
        s0 += t * hist[t]
        n1 = n - n0
        if n0 == 0 or n1 == 0:
            continue
        num = (n * s0 - n0 * s) ** 2
        den = n0 * n1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


def rect_fraction(mask: np.ndarray, scale, x, y, w, h) -> Fraction:
    """Fraction of the level-0 rectangle covered by foreground mask pixels,
    each mask pixel being a ``scale``-sided square. Exact."""
    scale = Fraction(scale)
    x, y, w, h = Fraction(x), Fraction(y), Fraction(w), Fraction(h)
    # only mask pixels whose square can touch the rectangle
    r0, r1 = max(0, math.floor(y / scale)), min(mask.shape[0], math.ceil((y + h) / scale))
    c0, c1 = max(0, math.floor(x / scale)), min(mask.shape[1], math.ceil((x + w) / scale))
    covered = Fraction(0)
    for r in range(r0, r1):
        oy = min(y + h, (r + 1) * scale) - max(y, r * scale)
        if oy <= 0:
            continue
        for c in range(c0, c1):
            if not mask[r, c]:
                continue
            ox = min(x + w, (c + 1) * scale) - max(x, c * scale)
            if ox > 0:
                covered += ox * oy
    return covered / (w * h)


def brute_grid(mask, scale, level0_w, level0_h, extent, step, min_frac) -> list[tuple[int, int]]:
    coords = []
    for y in range(0, level0_h - extent + 1, step):
        for x in range(0, level0_w - extent + 1, step):
            if rect_fraction(mask, scale, x, y, extent, extent) >= Fraction(min_frac).limit_denominator(10**9):
                coords.append((x, y))
    return coords


# --------------------------------------------------------------------------
# features


def stats64_scalar(patch: np.ndarray) -> list[float]:
    """One patch at a time, pixel loops for the histogram and texture sums."""
    h, w, _ = patch.shape
    px = [[[int(patch[y, x, c]) for c in range(3)] for x in range(w)] for y in range(h)]
    area = h * w
    moments, hists = [], []
    for c in range(3):
        vals = [px[y][x][c] for y in range(h) for x in range(w)]
        mean = math.fsum(vals) / area
        var = math.fsum((v - mean) ** 2 for v in vals) / area
        srt = sorted(vals)
        med = (srt[(area - 1) // 2] + srt[area // 2]) / 2
        dx = math.fsum(abs(px[y][x + 1][c] - px[y][x][c]) for y in range(h) for x in range(w - 1)) / (h * (w - 1))
        dy = math.fsum(abs(px[y + 1][x][c] - px[y][x][c]) for y in range(h - 1) for x in range(w)) / ((h - 1) * w)
        moments += [mean / 255, math.sqrt(var) / 127.5, 0.5 + (mean - med) / 510, (dx + dy) / 510]
        counts = [0] * 16
        for v in vals:
            counts[min(15, max(0, math.floor((v - mean + 128) / 16)))] += 1
        hists += [k / area for k in counts]
    g = [[sum(px[y][x]) / 3 for x in range(w)] for y in range(h)]

    def avg(pairs):
        pairs = list(pairs)
        return math.fsum(abs(a - b) for a, b in pairs) / len(pairs) / 255

    tex = [
        avg((g[y][x + 1], g[y][x]) for y in range(h) for x in range(w - 1)),
        avg((g[y + 1][x], g[y][x]) for y in range(h - 1) for x in range(w)),
        avg((g[y + 1][x + 1], g[y][x]) for y in range(h - 1) for x in range(w - 1)),
        avg((g[y + 1][x], g[y][x + 1]) for y in range(h - 1) for x in range(w - 1)),
    ]
    return moments + hists + tex


# --------------------------------------------------------------------------
# metrics


def auroc_pairs(scores, labels) -> Fraction:
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    credit = Fraction(0)
    for p in pos:
        for n in neg:
            credit += 1 if p > n else Fraction(1, 2) if p == n else 0
    return credit / (len(pos) * len(neg))


def cindex_pairs(risk, time, event) -> Fraction:
    credit, total = Fraction(0), 0
    n = len(risk)
    for i in range(n):
        for j in range(n):
            if event[i] and time[i] < time[j]:
                total += 1
                credit += 1 if risk[i] > risk[j] else Fraction(1, 2) if risk[i] == risk[j] else 0
    return credit / total


def qwk_direct(pred, labels, k) -> float:
    obs = [[0] * k for _ in range(k)]
    for p, t in zip(pred, labels):
        obs[t][p] += 1
    n = len(pred)
    rows = [sum(obs[i]) for i in range(k)]
    cols = [sum(obs[i][j] for i in range(k)) for j in range(k)]
    num = sum((i - j) ** 2 * obs[i][j] for i in range(k) for j in range(k))
    den = sum((i - j) ** 2 * rows[i] * cols[j] / n for i in range(k) for j in range(k))
    return 1 - num / den


def balanced_accuracy_direct(pred, labels) -> float:
    recalls = []
    for c in sorted(set(labels)):
        idx = [i for i, t in enumerate(labels) if t == c]
        recalls.append(sum(pred[i] == c for i in idx) / len(idx))
    return sum(recalls) / len(recalls)


def knn_brute(train, test, k, metric) -> list[list[int]]:
    out = []
    for q in test:
        dists = []
        for idx, g in enumerate(train):
            if metric == "euclidean":
                d = math.sqrt(math.fsum((a - b) ** 2 for a, b in zip(q, g)))
            else:
                nq = math.sqrt(math.fsum(a * a for a in q))
                ng = math.sqrt(math.fsum(b * b for b in g))
                d = 1 - math.fsum(a * b for a, b in zip(q, g)) / (nq * ng)
            dists.append((d, idx))
        dists.sort()
        out.append([i for _, i in dists[:k]])
    return out


# --------------------------------------------------------------------------
# optimisation


def central_difference(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(x, dtype=np.float64)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        grad[idx] = (f(xp) - f(xm)) / (2 * eps)
    return grad


def max_rel_error(analytic, numeric) -> float:
    analytic, numeric = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


def breslow_loglik(beta: float, x, time, event) -> float:
    """Scalar-covariate Breslow partial log-likelihood by direct summation."""
    ll = 0.0
    for i in range(len(x)):
        if event[i]:
            risk = [math.exp(beta * x[j]) for j in range(len(x)) if time[j] >= time[i]]
            ll += beta * x[i] - math.log(math.fsum(risk))
    return ll


def count_components8(mask: np.ndarray) -> int:
    """Number of 8-connected foreground components, by explicit flood fill."""
    seen = np.zeros(mask.shape, dtype=bool)
    h, w = mask.shape
    count = 0
    for sy, sx in zip(*np.nonzero(mask)):
        if seen[sy, sx]:
            continue
        count += 1
        stack = [(sy, sx)]
        seen[sy, sx] = True
        while stack:
            y, x = stack.pop()
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w and mask[yy, xx] and not seen[yy, xx]:
                        seen[yy, xx] = True
                        stack.append((yy, xx))
    return count


def nearest_foreground_distance(mask: np.ndarray) -> np.ndarray:
    """Euclidean distance from every pixel to the nearest foreground pixel (inf if none)."""
    fg = np.argwhere(mask).astype(float)
    grid = np.indices(mask.shape).reshape(2, -1).T.astype(float)
    if not len(fg):
        return np.full(mask.shape, np.inf)
    d2 = ((grid[:, None, :] - fg[None, :, :]) ** 2).sum(-1).min(1)
    return np.sqrt(d2).reshape(mask.shape)
