"""Build hook for the optional Cython kernels.

If Cython or a C compiler is missing the package still installs and
``labgate.kernels`` falls back to the pure-Python implementation.
"""
from setuptools import setup

ext_modules = []
try:
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [Extension("labgate._speedups", ["src/labgate/_speedups.pyx"], extra_compile_args=["-O3"])],
        compiler_directives={"language_level": "3"},
    )
except Exception:  # pragma: no cover - build environment dependent
    ext_modules = []

setup(ext_modules=ext_modules)
