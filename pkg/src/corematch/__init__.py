"""Co-adaptive token and neuron pruning for toy transformer decoders."""

__version__ = "0.1.0"
