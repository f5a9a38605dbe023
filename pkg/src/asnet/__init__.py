"""Set-prediction HOI detection: forward pass, matching losses, post-processing and mAP evaluation."""

__version__ = "0.1.0"
