"""Background-bias audit toolkit for image classification datasets."""

__version__ = "0.1.0"
