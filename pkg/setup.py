from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    # The package falls back to the pure-Python kernels at import time.
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "offdyn.envs._ckernels",
                ["src/offdyn/envs/_ckernels.pyx"],
                # keep IEEE semantics so both backends agree bit for bit
                extra_compile_args=["-O2", "-ffp-contract=off", "-fno-fast-math"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
