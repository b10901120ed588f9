"""Neurosymbolic network-flow intrusion detection.

A compact transformer encoder (neural path) and a bank of learnable logic
predicates (symbolic path) score flows jointly; a hierarchical two-stage head
separates benign-vs-attack detection from attack-stage categorization, and
explanation reports are validated with two-sample statistics.
"""

__version__ = "0.1.0"
