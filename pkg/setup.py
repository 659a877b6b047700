#!/usr/bin/env python
"""SALSA is a LiDAR place recognition and metric localization pipeline."""

from setuptools import setup

__version__ = '0.3.0'

CLASSIFIERS = [
    "Development Status :: 4 - Beta",
    "Intended Audience :: Science/Research",
    "License :: OSI Approved :: MIT License",
    "Operating System :: OS Independent",
    "Programming Language :: Python",
    "Programming Language :: Python :: 3",
    "Programming Language :: Python :: 3.8",
    "Programming Language :: Python :: 3.9",
    "Programming Language :: Python :: 3.10",
    "Programming Language :: Python :: 3.11",
    "Topic :: Scientific/Engineering :: Image Recognition",
]

with open("README.rst", "rt") as f:
    DESCRIPTION = f.read()

REQUIREMENTS = ["fs", "numpy", "scipy", "rich"]

setup(
    name="salsa-lpr",
    author="SALSA developers",
    classifiers=CLASSIFIERS,
    description="LiDAR place recognition with spherical local descriptors",
    install_requires=REQUIREMENTS,
    license="MIT",
    long_description=DESCRIPTION,
    packages=["salsa"],
    keywords=["lidar", "place recognition", "localization", "pyfilesystem"],
    platforms=["any"],
    python_requires=">=3.8",
    version=__version__,
    entry_points={
        "console_scripts": ["salsa = salsa.cli:main"]
    },
)
