"""driftlab: a self-contained continual-learning laboratory.

Trains a small self-attention encoder over sequences of disjoint
classification tasks under four continual-learning strategies, probes
the frozen encoder layer by layer on syntactic and semantic tasks, and
reports generality-forgetting metrics (G, GD, SynF, SemF) with their
cross-run correlations.
"""

__version__ = "0.1.0"
