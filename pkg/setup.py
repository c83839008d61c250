"""Builds the optional Cython warp kernels.

The package also works without the extension: atlaseg._kernels falls back
to the numpy implementation at import time.
"""

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

ext_modules = []
if cythonize is not None:
    extensions = [
        Extension(
            "atlaseg._kernels._warp_cy",
            ["src/atlaseg/_kernels/_warp_cy.pyx"],
            include_dirs=[np.get_include()],
            # -ffp-contract=off keeps results bit-identical to the numpy
            # fallback (no FMA contraction).
            extra_compile_args=["-O3", "-ffp-contract=off"],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        )
    ]
    ext_modules = cythonize(
        extensions,
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )

setup(ext_modules=ext_modules)
