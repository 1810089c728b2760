"""newsfuse: hybrid local/global news recommendation toolkit.

Trains category- and locality-specific sequential recommenders (self-attentive
experts plus session-kNN baselines), fuses their candidate scores through a
trainable neural fusion layer or a mean-rank ensemble, and evaluates every
variant with a chronological next-click protocol (HR@K, catalog coverage).
"""

__version__ = "0.1.0"
