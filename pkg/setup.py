import numpy as np
from Cython.Build import cythonize
from setuptools import setup
from setuptools.extension import Extension

# optional: the package falls back to pure Python when the build fails
extensions = [
    Extension(
        "dndrec._kernels",
        ["src/dndrec/_kernels.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"],
        optional=True,
    )
]

setup(ext_modules=cythonize(extensions, language_level=3))
