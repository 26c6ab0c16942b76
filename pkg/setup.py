import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "worldloop.kernels._native",
                ["src/worldloop/kernels/_native.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    # No Cython: the package still works on the numpy kernel lane.
    ext_modules = []

setup(ext_modules=ext_modules)
