import numpy
from setuptools import setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; kernels fall back to NumPy
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            "src/anchor/_kernels/_conv3x3.pyx",
        ],
        compiler_directives={"language_level": "3"},
    )
    for ext in ext_modules:
        ext.include_dirs = [numpy.get_include()]
        ext.extra_compile_args = ["-O3"]

setup(ext_modules=ext_modules)
