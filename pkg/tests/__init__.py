# coding: utf-8
"""SALSA test suite."""
