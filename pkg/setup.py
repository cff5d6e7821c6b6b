"""Build the optional compiled kernels; everything else lives in pyproject.toml."""
import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("RFMKIT_NO_EXT", "") != "1":
    try:
        from Cython.Build import cythonize
        import numpy as np
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [Extension("rfmkit._kernels", ["src/rfmkit/_kernels.pyx"],
                       include_dirs=[np.get_include()], extra_compile_args=["-O3"])],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
