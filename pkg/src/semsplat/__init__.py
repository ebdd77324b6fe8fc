"""Semantic dynamic Gaussian splatting with stage-gated anchors and masked guidance."""
__version__ = "0.1.0"
