"""Parallel-beam projection kernels with a compiled fast path.

Two inner loops dominate the simulator: splatting pixel values onto detector
bins (forward projection) and gathering interpolated detector values back onto
the pixel grid (back projection).  Both are implemented twice, as a Cython
extension (``kv2mv._projkern``) and as vectorized NumPy, with the backend
chosen once at import.  Set ``KV2MV_PROJ_BACKEND=python`` to force the NumPy
fallback, ``=cython`` to require the extension.

The forward kernel distributes each pixel's value between the two detector
bins adjacent to t = x*cos(theta) + y*sin(theta), so every detector row sums
to the total image mass exactly (up to float rounding).  The back projector is
its exact adjoint: linear interpolation of the projection at the same t.
"""

import os

import numpy as np

_requested = os.environ.get("KV2MV_PROJ_BACKEND", "auto").lower()

_kern = None
if _requested in ("auto", "cython"):
    try:
        from kv2mv import _projkern as _kern
    except ImportError:
        _kern = None
        if _requested == "cython":
            raise ImportError(
                "KV2MV_PROJ_BACKEND=cython but kv2mv._projkern is not built; "
                "run `python setup.py build_ext --inplace`"
            )

BACKEND = "cython" if _kern is not None else "numpy"


def detector_count(image_size: int) -> int:
    """Detector bins needed so every pixel of a centered square image projects
    inside the detector for all angles (diagonal plus margin, odd count)."""
    n = int(np.ceil(image_size * np.sqrt(2.0))) + 5
    return n if n % 2 == 1 else n + 1


def _pixel_grid(image_size):
    c = (image_size - 1) / 2.0
    coords = np.arange(image_size, dtype=np.float64) - c
    y, x = np.meshgrid(coords, coords, indexing="ij")
    return x.ravel(), y.ravel()


def splat_project_numpy(image, angles, n_det):
    image = np.ascontiguousarray(image, dtype=np.float64)
    d = image.shape[0]
    x, y = _pixel_grid(d)
    v = image.ravel()
    t_center = (n_det - 1) / 2.0
    sino = np.zeros((len(angles), n_det), dtype=np.float64)
    for k, theta in enumerate(angles):
        t = x * np.cos(theta) + y * np.sin(theta) + t_center
        i0 = np.floor(t).astype(np.intp)
        w = t - i0
        row = sino[k]
        np.add.at(row, i0, v * (1.0 - w))
        np.add.at(row, i0 + 1, v * w)
    return sino


def backproject_numpy(proj, angles, image_size):
    proj = np.ascontiguousarray(proj, dtype=np.float64)
    n_det = proj.shape[1]
    x, y = _pixel_grid(image_size)
    t_center = (n_det - 1) / 2.0
    out = np.zeros(image_size * image_size, dtype=np.float64)
    for k, theta in enumerate(angles):
        t = x * np.cos(theta) + y * np.sin(theta) + t_center
        i0 = np.floor(t).astype(np.intp)
        w = t - i0
        row = proj[k]
        out += row[i0] * (1.0 - w) + row[i0 + 1] * w
    return out.reshape(image_size, image_size)


def splat_project(image, angles, n_det):
    """Forward project a square image onto ``n_det`` detector bins per angle.

    Returns an [n_angles, n_det] float64 array of line integrals in
    value*pixel units.
    """
    if _kern is not None:
        image = np.ascontiguousarray(image, dtype=np.float64)
        angles = np.ascontiguousarray(angles, dtype=np.float64)
        return _kern.splat_project(image, angles, n_det)
    return splat_project_numpy(image, angles, n_det)


def backproject(proj, angles, image_size):
    """Adjoint of :func:`splat_project`: accumulate linearly interpolated
    projection values over all angles onto an image grid."""
    if _kern is not None:
        proj = np.ascontiguousarray(proj, dtype=np.float64)
        angles = np.ascontiguousarray(angles, dtype=np.float64)
        return _kern.backproject(proj, angles, image_size)
    return backproject_numpy(proj, angles, image_size)
