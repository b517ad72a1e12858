"""Builds the optional C extension for the broker's topic-matching kernel.

The package works without it: son.broker.matching falls back to the pure
Python matcher when the compiled module is absent or SON_PURE_PYTHON is set.
"""

import os

from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("SON_PURE_PYTHON"):
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "son.broker._matching_c",
                    sources=["src/son/broker/_matching_c.pyx"],
                    optional=True,
                )
            ],
            language_level="3",
        )
    except ImportError:
        pass

setup(ext_modules=ext_modules)
