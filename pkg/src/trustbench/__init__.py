"""Trust evaluation workbench for DNN-based THz modulation classifiers."""

__version__ = "0.1.0"
