"""Order-marginalized autoregressive generative image classification."""

__version__ = "0.1.0"
