from datetime import date

# -- Project information -----------------------------------------------------

project = "Response Trajectories Python"
version = "0.1.0"
copyright = f"{date.today().year}, Mark Shui Hu"
author = "Mark Shui Hu"

# -- General configuration ---------------------------------------------------

extensions = [
    "myst_parser",
    "autodoc2",
    "sphinx.ext.intersphinx",
    "sphinx.ext.viewcode",
    "sphinx.ext.todo",
    "sphinx.ext.mathjax",
    "sphinxcontrib.mermaid",
]
exclude_patterns = ["_build", "Thumbs.db", ".DS_Store"]
intersphinx_mapping = {
    "python": ("https://docs.python.org/3/", None),
    "numpy": ("https://numpy.org/doc/stable/", None),
    "pandas": ("https://pandas.pydata.org/docs/", None),
}
myst_enable_extensions = ["fieldlist", "deflist", "dollarmath"]

# -- HTML output -------------------------------------------------

html_theme = "furo"
html_title = "Response Trajectories Python"

# --- Autodoc configuration ------

autodoc2_packages = ["../src/response_trajectories"]
autodoc2_hidden_objects = ["dunder", "private", "inherited"]
