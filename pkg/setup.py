"""Build script for the optional compiled vote kernel.

The package is fully functional without the extension; a failed or
skipped compile falls back to the pure-Python kernel at import time.
"""
import os
import sys

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, etc.
            print(f"warning: skipping compiled vote kernel ({exc})", file=sys.stderr)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"warning: failed to build {ext.name} ({exc})", file=sys.stderr)


ext_modules = []
if not os.environ.get("RPQUORUM_NO_EXT"):
    try:
        from Cython.Build import cythonize
    except ImportError:
        print("warning: Cython not available, using pure-Python vote kernel", file=sys.stderr)
    else:
        ext_modules = cythonize(
            [Extension("rpquorum._vote_kernel", ["src/rpquorum/_vote_kernel.pyx"],
                       extra_compile_args=["-O3"])],
            compiler_directives={"language_level": "3", "boundscheck": False,
                                 "wraparound": False},
        )

setup(ext_modules=ext_modules, cmdclass={"build_ext": OptionalBuildExt})
