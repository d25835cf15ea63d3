"""Build script for the optional compiled kernel extension.

The package is fully functional without the extension (a numpy fallback is
selected at import time), so compile failures are tolerated.  Set
SOFTPIPE_NO_EXT=1 to skip the build entirely.
"""

import os

from setuptools import setup

ext_modules = []
if not os.environ.get("SOFTPIPE_NO_EXT"):
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext = Extension(
            "softpipe.kernels._ckernels",
            sources=["src/softpipe/kernels/_ckernels.pyx"],
            include_dirs=[numpy.get_include()],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            extra_compile_args=["-O3"],
            optional=True,
        )
        ext_modules = cythonize([ext], language_level="3")
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
