"""Build script: compiles the optional native kernel extension.

The package works without the extension (the pure NumPy backend is selected
at import time), so a failed compile only costs speed.  -ffp-contract=off
keeps the native float kernels bit-identical to the pure backend by
forbidding FMA contraction.
"""

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "anomseg.kernels._native",
                ["src/anomseg/kernels/_native.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3", "-ffp-contract=off"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
