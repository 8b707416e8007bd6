import numpy
from setuptools import Extension, setup
from Cython.Build import cythonize

# -ffp-contract=off keeps the C kernels bit-compatible with the numpy
# fallback (no FMA contraction of the trilinear accumulation).
ext = Extension(
    "sparsecraft.kernels._hashgrid",
    ["src/sparsecraft/kernels/_hashgrid.pyx"],
    include_dirs=[numpy.get_include()],
    extra_compile_args=["-O3", "-march=native", "-ffp-contract=off"],
    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
)

setup(ext_modules=cythonize([ext], language_level=3))
