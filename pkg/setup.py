"""Build script for the optional compiled kernel extension.

The Cython extension accelerates the conv lowering kernels (im2col/col2im).
If it cannot be built on the host, installation still succeeds and the
package falls back to the pure-numpy kernels at import time.
"""

import sys

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "conmatformer.kernels._ckernels",
                ["src/conmatformer/kernels/_ckernels.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except Exception as exc:  # pragma: no cover - exercised only on broken toolchains
    print(f"conmatformer: skipping compiled kernels ({exc}); "
          "pure-numpy fallback will be used", file=sys.stderr)

setup(ext_modules=ext_modules)
