import sphinx_rtd_theme  # noqa: F401
# Configuration file for the Sphinx documentation builder.
#
# This file only contains a selection of the most common options. For a full
# list see the documentation:
# https://www.sphinx-doc.org/en/master/usage/configuration.html

# -- Path setup --------------------------------------------------------------

import os
import sys

sys.path.insert(0, os.path.abspath('../..'))

import steprefine  # noqa: E402

# -- Project information -----------------------------------------------------

project = 'steprefine'
copyright = '2026, steprefine contributors'
author = 'steprefine contributors'

# The full version, including alpha/beta/rc tags
release = steprefine.__version__
version = steprefine.__version__


# -- General configuration ---------------------------------------------------

extensions = [
    "sphinx_rtd_theme",
    "sphinx.ext.autodoc",
]

templates_path = []

exclude_patterns = []


# -- Options for HTML output -------------------------------------------------

html_theme = 'sphinx_rtd_theme'

autodoc_typehints = 'description'

autodoc_default_options = {
    'member-order': 'bysource',
    'special-members': '__init__',
}

autodoc_inherit_docstrings = False
