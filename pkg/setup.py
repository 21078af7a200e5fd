"""
Builds the optional compiled kernels:

    pip install -e . --no-build-isolation

If Cython or a C compiler is unavailable the package still installs and
falls back to the pure-Python kernels at import time.
"""
from setuptools import setup, Extension

try:
    import numpy
    from Cython.Build import cythonize
except ImportError:  # build without the extension
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "overlapdet._ckernels",
                ["src/overlapdet/_ckernels.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
