"""Build hook for the compiled rasterizer kernel.

The package works without the extension (a NumPy fallback is selected at
import time); the extension is simply much faster for large clouds.
"""

import os

import numpy
from setuptools import Extension, setup

ext_modules = []
pyx = os.path.join("src", "splatgen", "splat", "_rasterize_cy.pyx")
if os.path.exists(pyx):
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "splatgen.splat._rasterize_cy",
                [pyx],
                extra_compile_args=["-O3"],
                include_dirs=[numpy.get_include()],
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules)
