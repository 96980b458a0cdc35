import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("CAUSALGCL_PURE_PYTHON"):
    try:
        from Cython.Build import cythonize
    except ImportError:  # fallback kernels are picked at import time
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "causalgcl._ckernels",
                    ["src/causalgcl/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    # no -ffast-math / -march=native: summation order must stay IEEE-exact
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
