import numpy
from setuptools import setup, Extension

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "dta.nn._lstm_cy",
                ["src/dta/nn/_lstm_cy.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                # let the compiler vectorize the exp/tanh gate loops
                extra_compile_args=["-O3", "-march=native", "-ffast-math"],
                extra_link_args=["-lmvec", "-lm"],
            )
        ],
        language_level=3,
    )
except ImportError:
    # Pure-python fallback kernels are used when the extension is absent.
    extensions = []

setup(ext_modules=extensions)
