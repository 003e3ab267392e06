"""kv2mv: desk-scale kVCT to MVCT translation pipeline for metal artifact
reduction, from synthetic phantom simulation through training and ablations."""

__version__ = "0.1.0"
