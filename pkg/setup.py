"""Build the optional Cython kernel core.

If Cython or a C compiler is unavailable the package still installs and
falls back to the pure-Python kernels at import time.
"""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("NUCLEUS3D_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "nucleus3d._core",
                    ["src/nucleus3d/_core.pyx"],
                    include_dirs=[np.get_include(), "src/nucleus3d"],
                    extra_compile_args=["-O3", "-march=native", "-mprefer-vector-width=512", "-Wno-psabi"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
