"""Build script.

The compiled kernel extension is optional: if Cython or a C compiler is
unavailable, the package installs without it and falls back to the numpy
kernel backend at import time.
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("DPFINE_NO_NATIVE", "0") != "1":
    try:
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "dpfine._native",
                    ["src/dpfine/_native.pyx"],
                    extra_compile_args=["-O3", "-march=native"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
