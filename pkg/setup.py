"""Build script for the optional compiled kernels.

The Cython extension is optional: if it cannot be built the package
falls back to the numpy implementations in ``speckletact._fallback``.
"""
import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if os.environ.get("SPECKLETACT_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "speckletact._kernels",
                    ["src/speckletact/_kernels.pyx"],
                    include_dirs=[np.get_include(), "src/speckletact"],
                    extra_compile_args=["-O3", "-march=native", "-fno-math-errno", "-fno-trapping-math", "-ffp-contract=off"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
