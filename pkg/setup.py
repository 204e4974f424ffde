import os

from setuptools import setup

ext_modules = []
if os.environ.get("ISPFORGE_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        extensions = [
            Extension(
                "ispforge._kernels",
                ["src/ispforge/_kernels.pyx"],
                include_dirs=[np.get_include()],
                # no -ffast-math / -march=native: FMA contraction and
                # reassociation would change the reduction order
                extra_compile_args=["-O3", "-ffp-contract=off", "-fno-fast-math"],
            )
        ]
        ext_modules = cythonize(extensions, compiler_directives={"language_level": "3"})
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
