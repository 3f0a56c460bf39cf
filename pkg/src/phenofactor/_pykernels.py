"""Vectorised numpy implementations of the pixel kernels.

Used when the compiled extension is unavailable, and as the reference the
compiled kernels are checked against. Pixel (row i, col j) has its centre at
(x, y) = (j + 0.5, i + 0.5).
"""
import numpy as np


def masked_color_sums(image, mask):
    """Return (count, sum_v, sum_s, sum_cr) over pixels where ``mask`` is set."""
    sel = image[mask.astype(bool)].astype(np.float64)
    if sel.shape[0] == 0:
        return 0, 0.0, 0.0, 0.0
    r, g, b = sel[:, 0], sel[:, 1], sel[:, 2]
    mx = sel.max(axis=1)
    mn = sel.min(axis=1)
    v = mx / 255.0
    s = np.divide(mx - mn, mx, out=np.zeros_like(mx), where=mx > 0)
    cr = np.clip(0.5 * r - 0.4187 * g - 0.0813 * b + 128.0, 0.0, 255.0) / 255.0
    return int(sel.shape[0]), float(v.sum()), float(s.sum()), float(cr.sum())


def fill_convex_polygon(height, width, vertices):
    verts = np.asarray(vertices, dtype=np.float64)
    ys, xs = np.mgrid[0:height, 0:width]
    px = xs + 0.5
    py = ys + 0.5
    n = verts.shape[0]
    area2 = 0.0
    for k in range(n):
        x0, y0 = verts[k]
        x1, y1 = verts[(k + 1) % n]
        area2 += x0 * y1 - x1 * y0
    sign = 1.0 if area2 >= 0 else -1.0
    inside = np.ones((height, width), dtype=bool)
    for k in range(n):
        x0, y0 = verts[k]
        x1, y1 = verts[(k + 1) % n]
        cross = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
        inside &= sign * cross >= 0
    return inside


def fill_ellipse(height, width, cx, cy, rx, ry, angle=0.0):
    ys, xs = np.mgrid[0:height, 0:width]
    dx = xs + 0.5 - cx
    dy = ys + 0.5 - cy
    c, s = np.cos(angle), np.sin(angle)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def warp_affine_bilinear(image, inverse, out_h, out_w):
    """Sample ``image`` (H x W x C float) at ``inverse @ [x, y, 1]`` per output pixel.

    Coordinates outside the source are clamped to the border.
    """
    src = np.asarray(image, dtype=np.float64)
    squeeze = src.ndim == 2
    if squeeze:
        src = src[:, :, None]
    h, w = src.shape[:2]
    a = np.asarray(inverse, dtype=np.float64)
    ys, xs = np.mgrid[0:out_h, 0:out_w]
    px = xs + 0.5
    py = ys + 0.5
    sx = a[0, 0] * px + a[0, 1] * py + a[0, 2] - 0.5
    sy = a[1, 0] * px + a[1, 1] * py + a[1, 2] - 0.5
    sx = np.clip(sx, 0.0, w - 1.0)
    sy = np.clip(sy, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(sx).astype(np.intp), w - 1)
    y0 = np.minimum(np.floor(sy).astype(np.intp), h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    top = src[y0, x0] * (1 - fx) + src[y0, x1] * fx
    bot = src[y1, x0] * (1 - fx) + src[y1, x1] * fx
    out = top * (1 - fy) + bot * fy
    return out[:, :, 0] if squeeze else out
