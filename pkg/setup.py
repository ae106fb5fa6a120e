import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("GPULEAK_NO_EXT"):
    try:
        from Cython.Build import cythonize
    except ImportError:  # pure-Python install
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "gpuleak._kernels._chase",
                    ["src/gpuleak/_kernels/_chase.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    # keep float results bit-identical to the Python fallback
                    extra_compile_args=["-O2", "-ffp-contract=off"],
                )
            ],
            language_level="3",
        )

setup(ext_modules=ext_modules)
