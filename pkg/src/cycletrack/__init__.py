"""Self-supervised Siamese tracking on synthetic video: differentiable
region masks, attention-based template propagation, cycle training, and an
online tracker with a score-ranked memory queue."""

__version__ = "0.1.0"
