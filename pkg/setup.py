import os
import platform
import sys

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; numpy fallback kernels are used
    cythonize = None

compile_args = ["-O3"]
link_args = []
if sys.platform.startswith("linux") and platform.machine() in ("x86_64", "AMD64"):
    # -ffast-math lets GCC call glibc's vectorised tanh/exp (libmvec)
    compile_args.append("-ffast-math")
    link_args.append("-lmvec")
    if os.environ.get("CATEXPAND_PORTABLE") != "1":
        compile_args.append("-march=native")

ext_modules = []
if cythonize is not None and os.environ.get("CATEXPAND_NO_EXT") != "1":
    ext_modules = cythonize(
        [
            Extension(
                "catexpand._ckernels",
                ["src/catexpand/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=compile_args,
                extra_link_args=link_args,
                optional=True,
            )
        ],
        compiler_directives={"language_level": 3},
    )

setup(ext_modules=ext_modules)
