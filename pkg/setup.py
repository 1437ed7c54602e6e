"""Build script: compiles the optional fast kernels.

The package is fully functional without the extension (a pure-Python
fallback is selected at import time), so any compiler or Cython failure
downgrades to a warning instead of failing the install. Set
CONSTRUM_PURE_PYTHON=1 to skip the extension build entirely.
"""

import os
import sys

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, etc.
            self._warn(exc)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            self._warn(exc)

    @staticmethod
    def _warn(exc):
        print(
            "WARNING: building the construm._native kernels failed "
            f"({exc!r}); falling back to the pure-Python implementation.",
            file=sys.stderr,
        )


ext_modules = []
if not os.environ.get("CONSTRUM_PURE_PYTHON"):
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "construm.kernels._native",
                    ["src/construm/kernels/_native.pyx"],
                )
            ],
            language_level=3,
        )
    except ImportError:
        print(
            "WARNING: Cython not available; installing without compiled kernels.",
            file=sys.stderr,
        )

setup(ext_modules=ext_modules, cmdclass={"build_ext": optional_build_ext})
