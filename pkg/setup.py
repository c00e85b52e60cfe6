import os

import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None


PYX = "src/tissuesim/backends/_kernels.pyx"


def extensions():
    # the compiled backend needs OpenMP; without a toolchain the numpy
    # fallback is selected at import, so skipping the build is safe
    if cythonize is None or os.environ.get("TISSUESIM_NO_EXT") or not os.path.exists(PYX):
        return []
    compile_args = ["-O3", "-march=native", "-fopenmp", "-ffp-contract=off", "-fno-math-errno", "-fno-wrapv"]
    link_args = ["-fopenmp"]
    ext = Extension(
        "tissuesim.backends._kernels",
        [PYX],
        extra_compile_args=compile_args,
        extra_link_args=link_args,
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], language_level=3)


setup(ext_modules=extensions())
