"""Cascaded self-supervised EEG emotion recognition on a small numpy autodiff core."""

__version__ = "0.1.0"
