# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled projection kernels. Mirrors the NumPy routines in kv2mv.projops."""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, sin, floor

cnp.import_array()


def splat_project(double[:, ::1] image, double[::1] angles, int n_det):
    cdef int d = image.shape[0]
    cdef int n_ang = angles.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.zeros((n_ang, n_det))
    cdef double[:, ::1] sino = out
    cdef double c = (d - 1) / 2.0
    cdef double t_center = (n_det - 1) / 2.0
    cdef double ct, st, t, w, v
    cdef Py_ssize_t k, i, j, i0
    for k in range(n_ang):
        ct = cos(angles[k])
        st = sin(angles[k])
        for i in range(d):
            for j in range(d):
                v = image[i, j]
                if v == 0.0:
                    continue
                t = (j - c) * ct + (i - c) * st + t_center
                i0 = <Py_ssize_t>floor(t)
                w = t - i0
                sino[k, i0] += v * (1.0 - w)
                sino[k, i0 + 1] += v * w
    return out


def backproject(double[:, ::1] proj, double[::1] angles, int image_size):
    cdef int n_ang = angles.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.zeros((image_size, image_size))
    cdef double[:, ::1] img = out
    cdef double c = (image_size - 1) / 2.0
    cdef double t_center = (proj.shape[1] - 1) / 2.0
    cdef double ct, st, t, w
    cdef Py_ssize_t k, i, j, i0
    for k in range(n_ang):
        ct = cos(angles[k])
        st = sin(angles[k])
        for i in range(image_size):
            for j in range(image_size):
                t = (j - c) * ct + (i - c) * st + t_center
                i0 = <Py_ssize_t>floor(t)
                w = t - i0
                img[i, j] += proj[k, i0] * (1.0 - w) + proj[k, i0 + 1] * w
    return out
