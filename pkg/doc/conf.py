# Sphinx configuration of the MARTA documentation.
import os
import sys

from importlib_metadata import version as distribution_version

sys.path.insert(0, os.path.abspath('..'))

extensions = [
    'sphinx.ext.autodoc',
    'sphinx.ext.intersphinx',
    'sphinx.ext.coverage',
    'sphinx.ext.viewcode',
]

autodoc_default_options = {
    'members': None,
    'inherited-members': None,
    'show-inheritance': None,
}

templates_path = ['_templates']
source_suffix = '.rst'
master_doc = 'index'

project = 'MARTA'
copyright = '2026, the MARTA developers'
author = 'The MARTA developers'

# Full version including tags, and the short X.Y version
release = distribution_version('marta')
version = '.'.join(release.split('.')[:2])

exclude_patterns = ['_build', 'Thumbs.db', '.DS_Store']
pygments_style = 'sphinx'

html_theme = 'sphinx_rtd_theme'
html_static_path = ['_static']
htmlhelp_basename = 'MARTAdoc'

latex_documents = [
    (master_doc, 'MARTA.tex', 'MARTA Documentation', author, 'manual'),
]
man_pages = [
    (master_doc, 'marta', 'MARTA Documentation', [author], 1),
]
texinfo_documents = [
    (master_doc, 'MARTA', 'MARTA Documentation', author, 'MARTA',
     'Rank tests for the mean of matrix-valued data.', 'Miscellaneous'),
]

intersphinx_mapping = {
    'python': ('https://docs.python.org/3/', None),
    'numpy': ('https://numpy.org/doc/stable/', None),
}
