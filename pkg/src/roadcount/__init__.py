"""Vehicle detection, tracking and counting from grayscale frame sequences.

Two detector pipelines (background subtraction and an MB-LBP boosted
cascade), an EKF multi-vehicle tracker, virtual-marker counting, and a
deterministic synthetic scene generator for end-to-end evaluation.
"""

__version__ = "0.1.0"
