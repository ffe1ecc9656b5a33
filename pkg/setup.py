"""Build the optional compiled kernels.

The package works without them (numpy fallback); set VITPRUNE_NO_EXT=1 to
skip the extension, VITPRUNE_PORTABLE=1 to avoid host-specific instructions.
"""
import os
import sys

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("VITPRUNE_NO_EXT"):
    from Cython.Build import cythonize

    compile_args = ["-O3", "-fno-fast-math", "-ffp-contract=fast", "-std=c99"]
    link_args = []
    if sys.platform.startswith("linux"):
        compile_args.append("-fopenmp")
        link_args.append("-fopenmp")
    if not os.environ.get("VITPRUNE_PORTABLE"):
        compile_args.append("-march=native")
    ext_modules = cythonize(
        [
            Extension(
                "vitprune.tensor._kernels",
                ["src/vitprune/tensor/_kernels.pyx"],
                include_dirs=[np.get_include(), "src/vitprune/tensor"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=compile_args,
                extra_link_args=link_args,
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules)
