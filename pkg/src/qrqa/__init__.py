"""Question rewriting for conversational question answering."""

__version__ = "0.1.0"
