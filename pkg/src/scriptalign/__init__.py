"""Cross-stage word alignment toolkit for historical Egyptian scripts."""

__version__ = "0.1.0"
