"""Cross-view graph pooling on a small dense autodiff stack."""

__version__ = "0.1.0"
