"""Explanation auditing toolkit: black-box models, post-hoc explainers, and
the experiments that show how much latitude those explainers leave."""

__version__ = "0.1.0"
