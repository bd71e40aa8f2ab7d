"""Question-attended span extraction on a from-scratch toy encoder-decoder."""

__version__ = "0.1.0"
