# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled mask kernels: RLE codec, 4-connected labeling, pairwise mask IoU.

Masks use column-major (Fortran) order for RLE to match COCO counts.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def rle_counts(const unsigned char[::1, :] mask):
    """Column-major run lengths starting with a (possibly empty) zero run."""
    cdef Py_ssize_t h = mask.shape[0], w = mask.shape[1]
    cdef Py_ssize_t n = h * w, i, j, k = 0
    cdef const unsigned char* flat = &mask[0, 0] if n > 0 else NULL
    out = np.empty(n + 1, dtype=np.uint32)
    cdef unsigned int[::1] counts = out
    cdef unsigned char prev = 0, cur
    cdef unsigned int run = 0
    for i in range(n):
        cur = 1 if flat[i] else 0
        if cur != prev:
            counts[k] = run
            k += 1
            run = 0
            prev = cur
        run += 1
    counts[k] = run
    k += 1
    return out[:k].copy()


def rle_decode(const unsigned int[::1] counts, Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t n = h * w, pos = 0, i, j, end
    cdef unsigned char val = 0
    out = np.zeros((h, w), dtype=np.uint8, order="F")
    if n == 0:
        return out
    cdef unsigned char[::1, :] view = out
    cdef unsigned char* flat = &view[0, 0]
    for i in range(counts.shape[0]):
        end = pos + counts[i]
        if end > n:
            raise ValueError(f"RLE counts sum past mask size {n}")
        if val:
            for j in range(pos, end):
                flat[j] = 1
        pos = end
        val = 1 - val
    if pos != n:
        raise ValueError(f"RLE counts sum to {pos}, expected {n}")
    return out


cdef Py_ssize_t _find(Py_ssize_t[::1] parent, Py_ssize_t x) noexcept nogil:
    cdef Py_ssize_t root = x, nxt
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        nxt = parent[x]
        parent[x] = root
        x = nxt
    return root


def label4(const unsigned char[:, ::1] mask):
    """Two-pass union-find labeling; labels numbered in raster order of first pixel."""
    cdef Py_ssize_t h = mask.shape[0], w = mask.shape[1]
    cdef Py_ssize_t y, x, idx, a, b, n = 0
    labels = np.zeros((h, w), dtype=np.int32)
    cdef int[:, ::1] lab = labels
    parent_arr = np.arange(h * w, dtype=np.intp)
    cdef Py_ssize_t[::1] parent = parent_arr
    remap_arr = np.zeros(h * w, dtype=np.int32)
    cdef int[::1] remap = remap_arr
    with nogil:
        for y in range(h):
            for x in range(w):
                if not mask[y, x]:
                    continue
                idx = y * w + x
                if x > 0 and mask[y, x - 1]:
                    a = _find(parent, idx - 1)
                    parent[idx] = a
                if y > 0 and mask[y - 1, x]:
                    b = _find(parent, idx - w)
                    a = _find(parent, idx)
                    if a != b:
                        if a < b:
                            parent[b] = a
                        else:
                            parent[a] = b
        for y in range(h):
            for x in range(w):
                if not mask[y, x]:
                    continue
                a = _find(parent, y * w + x)
                if remap[a] == 0:
                    n += 1
                    remap[a] = <int>n
                lab[y, x] = remap[a]
    return labels, n


def mask_iou_matrix(const unsigned char[:, ::1] a, const unsigned char[:, ::1] b):
    """IoU between rows of two flattened binary (0/1) mask stacks; empty union gives 0."""
    cdef Py_ssize_t na = a.shape[0], nb = b.shape[0], p = a.shape[1]
    cdef Py_ssize_t i, j, k
    cdef cnp.int64_t inter, union_
    cdef const unsigned char* ra
    cdef const unsigned char* rb
    if b.shape[1] != p:
        raise ValueError(f"mask sizes differ: {p} vs {b.shape[1]}")
    out = np.zeros((na, nb), dtype=np.float64)
    if na == 0 or nb == 0 or p == 0:
        return out
    area_a_arr = np.asarray(a, dtype=np.int64).sum(axis=1)
    area_b_arr = np.asarray(b, dtype=np.int64).sum(axis=1)
    cdef cnp.int64_t[::1] area_a = area_a_arr
    cdef cnp.int64_t[::1] area_b = area_b_arr
    cdef double[:, ::1] res = out
    with nogil:
        for i in range(na):
            ra = &a[i, 0]
            for j in range(nb):
                rb = &b[j, 0]
                inter = 0
                # branchless so the compiler can vectorise the byte AND
                for k in range(p):
                    inter += ra[k] & rb[k]
                union_ = area_a[i] + area_b[j] - inter
                if union_ > 0:
                    res[i, j] = <double>inter / <double>union_
    return out
