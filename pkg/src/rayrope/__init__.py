"""Ray-based rotary positional encodings for multi-view transformers, on a small numpy autodiff core."""

__version__ = "0.1.0"
