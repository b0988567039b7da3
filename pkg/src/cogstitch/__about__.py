# flake8: noqa
# type: ignore

__version__ = "0.1.0"
