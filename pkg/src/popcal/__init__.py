"""popcal: knowledge-popularity measurement and LLM confidence calibration."""

__version__ = "0.1.0"
