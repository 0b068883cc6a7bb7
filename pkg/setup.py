from setuptools import setup, find_packages

setup(
    name="swarmsim",
    version="0.1.0",
    packages=find_packages(exclude=["tests", "examples", "examples.*"]),
    py_modules=["swarmsim"],
    install_requires=["numpy>=1.17"],
    entry_points={"console_scripts": ["swarmsim=src.cli:main"]},
    python_requires=">=3.8",
)
