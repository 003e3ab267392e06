"""Builds the optional compiled projection kernels.

The package is fully functional without the extension (a NumPy fallback is
selected at import time); compiling just makes forward/back projection faster,
which matters at 256+ pixel grids.  Skip compilation with KV2MV_NO_EXT=1.
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("KV2MV_NO_EXT") != "1":
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "kv2mv._projkern",
                    ["src/kv2mv/_projkern.pyx"],
                    include_dirs=[numpy.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            language_level=3,
        )
    except Exception as exc:  # noqa: BLE001 - pure-python install must survive
        print(f"kv2mv: skipping compiled projection kernels ({exc})")
        ext_modules = []

setup(ext_modules=ext_modules)
