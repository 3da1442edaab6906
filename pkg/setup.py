from setuptools import Extension, setup

# The compiled voxel kernels are optional: if Cython (or a C compiler) is
# unavailable the package falls back to the numpy implementation at import.
try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "refusion._kernels_cy",
                ["src/refusion/_kernels_cy.pyx"],
                extra_compile_args=["-O2"],
            )
        ],
        language_level=3,
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
