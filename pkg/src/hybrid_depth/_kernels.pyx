# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled scan kernels; see ``hybrid_depth.kernels`` for the Python contract."""


def recursive_filter_rows(double[:, :, ::1] img, double[:, ::1] coef):
    """In-place causal + anti-causal first-order recursion along axis 1.

    img: (H, W, C); coef[i, j] weights the link between pixels j-1 and j.
    """
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1], nc = img.shape[2]
    cdef Py_ssize_t i, j, c
    cdef double a
    with nogil:
        for i in range(h):
            for j in range(1, w):
                a = coef[i, j]
                for c in range(nc):
                    img[i, j, c] = img[i, j, c] + a * (img[i, j - 1, c] - img[i, j, c])
            for j in range(w - 2, -1, -1):
                a = coef[i, j + 1]
                for c in range(nc):
                    img[i, j, c] = img[i, j, c] + a * (img[i, j + 1, c] - img[i, j, c])
