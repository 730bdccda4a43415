"""qvt: a desk-scale multimodal quantum vision transformer for enzyme (EC) class prediction."""

__version__ = "0.1.0"
