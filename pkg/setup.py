"""Build script: compiles the optional numerical core extension.

The package works without the extension (a numpy fallback is selected at
import time), so any failure to cythonize or compile downgrades to a
pure-python install instead of aborting.
"""

import warnings

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """build_ext that tolerates a missing compiler toolchain."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # noqa: BLE001 - any toolchain failure downgrades
            warnings.warn(f"compiled core skipped ({exc}); using pure-python kernels",
                          stacklevel=2)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # noqa: BLE001
            warnings.warn(f"compiled core skipped ({exc}); using pure-python kernels",
                          stacklevel=2)


def extensions():
    try:
        from Cython.Build import cythonize
    except ImportError:
        warnings.warn("Cython not available; installing with pure-python kernels",
                      stacklevel=2)
        return []
    ext = Extension(
        "evisynth._core",
        sources=["src/evisynth/_core.pyx"],
        extra_compile_args=["-O3"],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(
    ext_modules=extensions(),
    cmdclass={"build_ext": OptionalBuildExt},
)
