# coding: utf-8
"""Allow ``python -m salsa``."""

import sys

from .cli import main

sys.exit(main())
