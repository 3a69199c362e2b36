"""LSTM language-model lattice rescoring toolkit."""

__version__ = "0.1.0"
