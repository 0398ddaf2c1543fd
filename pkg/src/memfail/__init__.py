"""Memory failure prediction from correctable-error logs.

Streams CE events per DIMM through an incremental feature engine that keeps a
sliding observation window and the full lifetime history apart, labels failed
DIMMs with the largest-gap heuristic, and trains a random forest that is
evaluated against a CE-rate threshold baseline.
"""

__version__ = "0.1.0"
