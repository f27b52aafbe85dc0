"""Independent reference implementations used only by the test suite."""

import math

import numpy as np


def polygon_vertices(v, geometry):
    cx, cy = geometry.center
    R = geometry.max_radius
    d = len(v)
    pts = []
    for k in range(d):
        a = math.pi / 2 - 2 * math.pi * k / d
        pts.append((cx + v[k] * R * math.cos(a), cy - v[k] * R * math.sin(a)))
    return pts


def pnpoly_mask(v, geometry):
    """Ray casting to the right from every pixel center; plus the hub pixel."""
    h, w = geometry.shape
    pts = polygon_vertices(v, geometry)
    if h * w <= 4096:
        mask = np.zeros((h, w), dtype=bool)
        for r in range(h):
            y = r + 0.5
            for c in range(w):
                x = c + 0.5
                inside = False
                j = len(pts) - 1
                for i in range(len(pts)):
                    xi, yi = pts[i]
                    xj, yj = pts[j]
                    if (yi > y) != (yj > y) and x < (xj - xi) * (y - yi) / (yj - yi) + xi:
                        inside = not inside
                    j = i
                mask[r, c] = inside
    else:
        # same test, one edge at a time over the whole pixel grid
        yy, xx = np.mgrid[0:h, 0:w] + 0.5
        mask = np.zeros((h, w), dtype=bool)
        j = len(pts) - 1
        for i in range(len(pts)):
            xi, yi = pts[i]
            xj, yj = pts[j]
            straddle = (yi > yy) != (yj > yy)
            with np.errstate(divide="ignore", invalid="ignore"):
                xint = (xj - xi) * (yy - yi) / (yj - yi) + xi
            mask ^= straddle & (xx < xint)
            j = i
    mask[int(math.floor(geometry.center[1])), int(math.floor(geometry.center[0]))] = True
    return mask


def windows_brute(L, s, T=50):
    if L < T:
        return [(0, L - 1)]
    out = []
    end = T - 1
    while end <= L - 1:
        out.append((end - T + 1, end))
        end += s
    return out


def auc_pairwise(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else (0.5 if p == n else 0.0)
    return total / (len(pos) * len(neg))


def mcc_direct(tp, tn, fp, fn):
    den = math.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    return 0.0 if den == 0 else (tp * tn - fp * fn) / den


def interval_scan(active_set, ref, horizon=45):
    """Label by scanning every day of the horizon after ``ref``."""
    return int(not any(ref + i in active_set for i in range(1, horizon + 1)))


def precision_recall_f1(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return p, r, (2 * p * r / (p + r) if p + r else 0.0)
