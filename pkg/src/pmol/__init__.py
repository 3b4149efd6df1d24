"""Grouped LoRA experts with a preference-aware router, trained by DPO/ORPO."""

__version__ = "0.1.0"
