"""Build script for the compiled kernel extension.

The package works without the extension (a pure numpy fallback is selected
at import time), so a failed compile only costs speed.
"""

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "gridsynth.kernels._fast",
        ["src/gridsynth/kernels/_fast.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(ext_modules=cythonize(extensions, language_level=3))
