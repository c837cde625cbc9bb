import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

ext = Extension(
    "takeover_cog._kernels._ckernel",
    ["src/takeover_cog/_kernels/_ckernel.pyx"],
    include_dirs=[np.get_include()],
    # no fast-math and no FMA contraction: results must match the Python backend
    extra_compile_args=["-O2", "-ffp-contract=off", "-fno-fast-math"],
    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
)

setup(ext_modules=cythonize([ext], language_level=3))
