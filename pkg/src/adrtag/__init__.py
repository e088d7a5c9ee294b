"""Semi-supervised BiLSTM toolkit for adverse-drug-reaction mention extraction."""

__version__ = "0.1.0"
