"""Build script; compiles the optional Cython fast core.

Set MAUKF_NO_EXT=1 to skip the extension entirely (the package then runs on
the pure-numpy fallback). A failed compile is downgraded to a warning for the
same reason: the extension is an accelerator, not a requirement.
"""

import os
import sys

from setuptools import setup

ext_modules = []
if not os.environ.get("MAUKF_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "maukf._core",
                    sources=["src/maukf/_core.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3", "-fno-math-errno"],
                )
            ],
            language_level=3,
        )
    except Exception as exc:  # pragma: no cover
        sys.stderr.write(f"maukf: skipping fast core build ({exc})\n")
        ext_modules = []

setup(ext_modules=ext_modules)
