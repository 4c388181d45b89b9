import os
import sys

sys.path.insert(0, os.path.abspath("../src"))

project = "HTSC"
author = "HTSC contributors"
release = "0.1.0"

extensions = ["sphinx.ext.autodoc", "sphinx.ext.viewcode"]
autodoc_member_order = "bysource"
autodoc_typehints = "description"

html_theme = "alabaster"
