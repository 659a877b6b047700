# coding: utf-8
"""SALSA package version."""

__author__ = "SALSA developers"
__copyright__ = "Copyright (C) 2024 SALSA developers"
__license__ = (
    "This software is released under the MIT license cited in " "LICENSE.txt"
)

__version__ = '0.3.0'
