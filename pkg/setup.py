import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "scenepursuit._sweep_c",
                ["src/scenepursuit/_sweep_c.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )
except ImportError:
    # No Cython available: the package still works via the pure-Python kernel.
    extensions = []

setup(ext_modules=extensions)
