import os
import sys

from setuptools import setup

ext_modules = []
if os.environ.get("NUMERLA_NO_EXT", "") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "numerla._kernels",
                    ["src/numerla/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3", "-march=native", "-ffast-math"],
                    extra_link_args=["-lmvec"] if sys.platform.startswith("linux") else [],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
