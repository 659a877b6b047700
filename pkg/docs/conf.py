# -*- coding: utf-8 -*-
#
# SALSA documentation build configuration file.
#
# This file is execfile()d with the current directory set to its
# containing dir.

import os
import sys

sys.path.insert(0, os.path.abspath('..'))

import salsa  # noqa: E402
import sphinx_rtd_theme  # noqa: E402

html_theme = "sphinx_rtd_theme"
html_theme_path = [sphinx_rtd_theme.get_html_theme_path()]

# -- General configuration ------------------------------------------------

extensions = ['sphinx.ext.autodoc']

templates_path = ['_templates']

source_suffix = '.rst'

# The master toctree document.
master_doc = 'index'

# General information about the project.
project = u'SALSA'
copyright = u'2024, SALSA developers'
author = u'SALSA developers'

# The short X.Y version.
version = salsa.__version__
# The full version, including alpha/beta/rc tags.
release = salsa.__version__

language = 'en'

exclude_patterns = ['_build', 'Thumbs.db', '.DS_Store']

# The name of the Pygments (syntax highlighting) style to use.
pygments_style = 'sphinx'

todo_include_todos = False

# -- Options for HTML output ----------------------------------------------

html_static_path = ['_static']

# Output file base name for HTML help builder.
htmlhelp_basename = 'SALSAdoc'

# -- Options for manual page output ---------------------------------------

man_pages = [
    (master_doc, 'salsa', u'SALSA Documentation',
     [author], 1)
]
