"""Image-to-LaTeX: attentional encoder-decoder for math-formula images."""

__version__ = "0.1.0"
