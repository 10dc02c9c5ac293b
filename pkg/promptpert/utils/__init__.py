"""Shared utilities: configuration helpers, logging, and exceptions."""

from .exceptions import PromptPertError
from .logging import get_logger

__all__ = ["PromptPertError", "get_logger"]
