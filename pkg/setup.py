"""Build script: compiles the optional C kernel extension.

The package works without the extension (a pure-Python fallback is selected
at import time), so the build is marked optional and failures are non-fatal.
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "ringsim._kernels._core",
                ["src/ringsim/_kernels/_core.pyx"],
                optional=True,
            )
        ],
        language_level="3",
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
