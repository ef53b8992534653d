"""Language-model-augmented autotelic agent (LMA3) in a text kitchen."""

__version__ = "0.1.0"
