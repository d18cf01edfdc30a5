"""Encoder-decoder transformer for mesh recovery with topology-masked attention."""
