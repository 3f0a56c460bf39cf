# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled pixel kernels; same contracts as ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, floor

cnp.import_array()


def masked_color_sums(image, mask):
    cdef const unsigned char[:, :, ::1] img = np.ascontiguousarray(image, dtype=np.uint8)
    cdef const unsigned char[:, ::1] m = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1], i, j
    cdef double r, g, b, mx, mn, cr
    cdef double sv = 0.0, ss = 0.0, scr = 0.0
    cdef long count = 0
    with nogil:
        for i in range(h):
            for j in range(w):
                if m[i, j] == 0:
                    continue
                r = img[i, j, 0]
                g = img[i, j, 1]
                b = img[i, j, 2]
                mx = r
                if g > mx:
                    mx = g
                if b > mx:
                    mx = b
                mn = r
                if g < mn:
                    mn = g
                if b < mn:
                    mn = b
                sv += mx / 255.0
                if mx > 0:
                    ss += (mx - mn) / mx
                cr = 0.5 * r - 0.4187 * g - 0.0813 * b + 128.0
                if cr < 0.0:
                    cr = 0.0
                elif cr > 255.0:
                    cr = 255.0
                scr += cr / 255.0
                count += 1
    return int(count), sv, ss, scr


def fill_convex_polygon(Py_ssize_t height, Py_ssize_t width, vertices):
    cdef const double[:, ::1] v = np.ascontiguousarray(vertices, dtype=np.float64)
    cdef Py_ssize_t n = v.shape[0], i, j, k, k1
    out = np.zeros((height, width), dtype=np.bool_)
    cdef cnp.npy_bool[:, ::1] o = out
    cdef double area2 = 0.0, sign, px, py, cross
    cdef bint inside
    for k in range(n):
        k1 = (k + 1) % n
        area2 += v[k, 0] * v[k1, 1] - v[k1, 0] * v[k, 1]
    sign = 1.0 if area2 >= 0 else -1.0
    with nogil:
        for i in range(height):
            py = i + 0.5
            for j in range(width):
                px = j + 0.5
                inside = True
                for k in range(n):
                    k1 = (k + 1) % n
                    cross = (v[k1, 0] - v[k, 0]) * (py - v[k, 1]) - (v[k1, 1] - v[k, 1]) * (px - v[k, 0])
                    if sign * cross < 0:
                        inside = False
                        break
                o[i, j] = inside
    return out


def fill_ellipse(Py_ssize_t height, Py_ssize_t width, double cx, double cy,
                 double rx, double ry, double angle=0.0):
    out = np.zeros((height, width), dtype=np.bool_)
    cdef cnp.npy_bool[:, ::1] o = out
    cdef double c = cos(angle), s = sin(angle), dx, dy, u, q
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(height):
            dy = i + 0.5 - cy
            for j in range(width):
                dx = j + 0.5 - cx
                u = dx * c + dy * s
                q = -dx * s + dy * c
                o[i, j] = (u / rx) * (u / rx) + (q / ry) * (q / ry) <= 1.0
    return out


def warp_affine_bilinear(image, inverse, Py_ssize_t out_h, Py_ssize_t out_w):
    src_arr = np.ascontiguousarray(image, dtype=np.float64)
    squeeze = src_arr.ndim == 2
    if squeeze:
        src_arr = src_arr[:, :, None]
    cdef const double[:, :, ::1] src = src_arr
    cdef const double[:, ::1] a = np.ascontiguousarray(inverse, dtype=np.float64)
    cdef Py_ssize_t h = src.shape[0], w = src.shape[1], nc = src.shape[2]
    out = np.empty((out_h, out_w, nc), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    cdef Py_ssize_t i, j, c, x0, y0, x1, y1
    cdef double px, py, sx, sy, fx, fy, top, bot
    with nogil:
        for i in range(out_h):
            py = i + 0.5
            for j in range(out_w):
                px = j + 0.5
                sx = a[0, 0] * px + a[0, 1] * py + a[0, 2] - 0.5
                sy = a[1, 0] * px + a[1, 1] * py + a[1, 2] - 0.5
                if sx < 0.0:
                    sx = 0.0
                elif sx > w - 1.0:
                    sx = w - 1.0
                if sy < 0.0:
                    sy = 0.0
                elif sy > h - 1.0:
                    sy = h - 1.0
                x0 = <Py_ssize_t>floor(sx)
                y0 = <Py_ssize_t>floor(sy)
                if x0 > w - 1:
                    x0 = w - 1
                if y0 > h - 1:
                    y0 = h - 1
                x1 = x0 + 1 if x0 + 1 < w else w - 1
                y1 = y0 + 1 if y0 + 1 < h else h - 1
                fx = sx - x0
                fy = sy - y0
                for c in range(nc):
                    top = src[y0, x0, c] * (1 - fx) + src[y0, x1, c] * fx
                    bot = src[y1, x0, c] * (1 - fx) + src[y1, x1, c] * fx
                    o[i, j, c] = top * (1 - fy) + bot * fy
    if squeeze:
        return out[:, :, 0]
    return out
