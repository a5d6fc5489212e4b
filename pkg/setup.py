from setuptools import Extension, setup

setup(
    ext_modules=[
        Extension("ftpmkit._stretch", ["src/ftpmkit/_stretch.c"],
                  extra_compile_args=["-O3"], optional=True),
    ],
)
